//! Distributional return forecasting.
//!
//! The crate covers the whole path from prices to evaluated distribution
//! forecasts:
//!
//! * [`nn`]: a small reverse-mode network toolkit (dense, batch-norm,
//!   dropout, clipping) with Adam and binary checkpoints.
//! * [`qnn`]: the two-stage multi-output quantile network, its benchmark
//!   siblings, the aggregated pinball loss and the training protocol
//!   (early stopping, ensembles, fine-tuning on expanding windows).
//! * [`density`] and [`moments`]: quantile grid → spline CDF → density
//!   with discrete tail masses → moments, plus the polynomial bias
//!   adjustment and its Monte Carlo refit.
//! * [`features`]: EWMA / range volatilities, cross-sectional aggregates
//!   and rank normalisation.
//! * [`garch`]: GARCH(1,1)-t estimation and Monte Carlo quantile forecasts.
//! * [`market_sim`]: a GJR-GARCH + jumps panel simulator with a
//!   true-quantile oracle.
//! * [`evaluation`] and [`portfolio`]: quantile loss, CRPS, Diebold-Mariano
//!   with Newey-West errors, R², volatility errors and decile sorts.
//! * [`study`]: the controlled simulation study comparing the network and
//!   GARCH against true quantiles.
//! * [`cli`]: the batch front end used by the `distforge` binary.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod cli;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod garch;
pub mod io;
pub mod market_sim;
pub mod moments;
pub mod nn;
pub mod panel;
pub mod portfolio;
pub mod qnn;
pub mod stats;
pub mod study;
pub mod taus;

pub use error::{Error, Result};
pub use taus::TauGrid;

/// Random generator used everywhere randomness appears. ChaCha keeps
/// seeded runs reproducible across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// A generator seeded from `seed`.
pub fn seeded(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// A generator for sub-task `stream` of a run seeded with `seed`. Streams
/// are independent, so work split across threads stays deterministic.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}
