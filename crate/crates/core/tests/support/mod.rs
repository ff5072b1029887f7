//! Oracles shared by the integration targets.

use hiha_core::siren::SirenNetwork;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

/// First-layer weights act through `omega_0 * w`, so their step is taken in
/// that scaled coordinate; otherwise truncation error grows as omega_0 cubed.
fn step_for(layer: usize, is_weight: bool, omega_0: f64) -> f64 {
    if layer == 0 && is_weight {
        H / omega_0
    } else {
        H
    }
}

fn nudge(net: &mut SirenNetwork<f64>, layer: usize, idx: usize, by: f64) {
    let l = &mut net.layers_mut()[layer];
    let cols = l.weight.ncols();
    if idx < l.weight.len() {
        l.weight[[idx / cols, idx % cols]] += by;
    } else {
        l.bias[idx - l.weight.len()] += by;
    }
}

/// Worst relative gap between analytic gradients and central differences of
/// the f64 loss over 64 random points, across every parameter.
pub fn worst_gradient_error(widths: &[usize], omega_0: f32, seed: u64) -> f64 {
    let net = SirenNetwork::init(widths, omega_0, seed).unwrap().to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Array2::from_shape_simple_fn((64, widths[0]), || rng.random_range(-1.0..1.0));
    let y = Array1::from_shape_simple_fn(64, || rng.random_range(-1.0..1.0));
    let (_, grads) = net.loss_and_gradient(x.view(), y.view());
    let loss = |n: &SirenNetwork<f64>| n.loss_and_gradient(x.view(), y.view()).0;

    let mut worst = 0.0f64;
    for (l, g) in grads.iter().enumerate() {
        let n_weights = g.weight.len();
        for idx in 0..n_weights + g.bias.len() {
            let analytic = if idx < n_weights {
                g.weight.as_slice().unwrap()[idx]
            } else {
                g.bias[idx - n_weights]
            };
            let h = step_for(l, idx < n_weights, net.omega_0());
            let (mut plus, mut minus) = (net.clone(), net.clone());
            nudge(&mut plus, l, idx, h);
            nudge(&mut minus, l, idx, -h);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
