//! Builds a small network from layer specs, takes one Adam step and checks
//! one gradient entry against a finite difference.

use distforge::nn::{AdamConfig, LayerSpec, Mode, ParamStore, Sequential, Tensor2};

fn main() -> distforge::Result<()> {
    let mut rng = distforge::seeded(0);
    let mut store = ParamStore::new();
    let specs = [
        LayerSpec::dense(6),
        LayerSpec::BatchNorm,
        LayerSpec::Tanh,
        LayerSpec::dense(1),
        LayerSpec::Softplus { shift: 0.0 },
    ];
    let mut net = Sequential::build("net", 3, &specs, &mut store, &mut rng)?;
    let x = Tensor2::from_rows(&[vec![0.1, -0.3, 0.7], vec![1.2, 0.4, -0.5], vec![-0.8, 0.9, 0.2]])?;
    let loss = |net: &mut Sequential, store: &mut ParamStore, rng: &mut distforge::Rng| -> distforge::Result<f64> {
        Ok(net.forward(store, &x, Mode::Train, rng)?.data().iter().sum())
    };

    store.zero_grad();
    let before = loss(&mut net, &mut store, &mut rng)?;
    net.backward(&mut store, &Tensor2::filled(3, 1, 1.0))?;
    let analytic = store.params()[0].grad.data()[0];
    let h = 1e-6;
    store.params_mut()[0].value.data_mut()[0] += h;
    let fd = (loss(&mut net, &mut store, &mut rng)? - before) / h;
    store.params_mut()[0].value.data_mut()[0] -= h;
    println!(
        "{} parameters; dL/dw0 analytic {analytic:.6}, finite difference {fd:.6}",
        store.num_scalars()
    );

    store.adam_step(&AdamConfig::default());
    println!(
        "loss {before:.6} -> {:.6} after one Adam step",
        loss(&mut net, &mut store, &mut rng)?
    );
    Ok(())
}
