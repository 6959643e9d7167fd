//! Prints exact, naive and adjusted moments of seven analytic
//! distributions recovered from 37 quantiles.

fn main() -> distforge::Result<()> {
    let rows = distforge::moments::reproduce_table()?;
    distforge::moments::write_table(&rows, std::io::stdout())
}
