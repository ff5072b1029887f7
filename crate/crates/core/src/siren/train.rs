//! Overfitting loop: Adam with a cosine-annealed learning rate, best-so-far
//! checkpointing and early stop at a target RMSE.

use crate::timing::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Layer, SirenNetwork};
use crate::error::{HihaError, Result};

/// Voxel counts above this train on random subsets.
pub const FULL_BATCH_LIMIT: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Batch {
    /// Full grid up to [`FULL_BATCH_LIMIT`] voxels, otherwise a quarter per step.
    Auto,
    Full,
    Fraction(f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub lr_init: f64,
    /// Final learning rate as a fraction of `lr_init`.
    pub lr_final_ratio: f64,
    pub batch: Batch,
    pub target_rmse: f64,
    pub seed: u64,
    /// Full-data RMSE check interval when training on subsets.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            lr_init: 1e-4,
            lr_final_ratio: 1e-2,
            batch: Batch::Auto,
            target_rmse: 0.0,
            seed: 0,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_rmse: f64,
    /// (step, rmse) samples.
    pub loss_curve: Vec<(usize, f64)>,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn reached(&self, target: f64) -> bool {
        self.final_rmse <= target
    }
}

/// `lr_final + (lr_init - lr_final) * (1 + cos(pi * step / total)) / 2`
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.lr_init;
        }
        let t = (step.min(self.total) as f64) / self.total as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Gradients<f32>,
    v: Gradients<f32>,
}

impl Adam {
    pub fn new(net: &SirenNetwork) -> Self {
        let zeros = || {
            net.layers()
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, net: &mut SirenNetwork, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step_size = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let scales = step_scales(net);
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let g = &grads[l];
            let (wm, bm) = scales[l];
            update(
                layer.weight.as_slice_mut().expect("contiguous"),
                g.weight.as_slice().expect("contiguous"),
                self.m[l].weight.as_slice_mut().expect("contiguous"),
                self.v[l].weight.as_slice_mut().expect("contiguous"),
                b1,
                b2,
                step_size * wm,
                eps,
            );
            update(
                layer.bias.as_slice_mut().expect("contiguous"),
                g.bias.as_slice().expect("contiguous"),
                self.m[l].bias.as_slice_mut().expect("contiguous"),
                self.v[l].bias.as_slice_mut().expect("contiguous"),
                b1,
                b2,
                step_size * bm,
                eps,
            );
        }
    }
}

/// Per-layer (weight, bias) step multipliers. Inside a sine layer every
/// parameter except the first-layer weights moves `omega_0` times faster, as
/// if the layer computed `sin(omega_0 * (W x + b))` with `W` stored divided by
/// `omega_0`; the linear head moves at the plain rate.
fn step_scales(net: &SirenNetwork) -> Vec<(f32, f32)> {
    let om = net.omega_0();
    let n = net.layers().len();
    (0..n)
        .map(|l| match l {
            _ if n > 1 && l + 1 == n => (1.0, 1.0),
            0 => (1.0, om),
            _ => (om, om),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], b1: f32, b2: f32, step: f32, eps: f32) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= step * m[i] / (v[i].sqrt() + eps);
    }
}

/// Fits a freshly initialized network.
pub fn fit(
    coords: ArrayView2<f32>,
    targets: ArrayView1<f32>,
    widths: &[usize],
    omega_0: f32,
    cfg: &TrainConfig,
) -> Result<(SirenNetwork, TrainReport)> {
    let net = SirenNetwork::init(widths, omega_0, cfg.seed)?;
    fit_from(net, coords, targets, cfg)
}

pub fn rmse_of(net: &SirenNetwork, coords: ArrayView2<f32>, targets: ArrayView1<f32>) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let pred = net.forward(coords);
    let sse: f64 = pred
        .iter()
        .zip(targets.iter())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    (sse / targets.len() as f64).sqrt()
}

/// Continues training `net` (warm start). Returns the best parameters seen.
pub fn fit_from(
    mut net: SirenNetwork,
    coords: ArrayView2<f32>,
    targets: ArrayView1<f32>,
    cfg: &TrainConfig,
) -> Result<(SirenNetwork, TrainReport)> {
    let started = Instant::now();
    let n = targets.len();
    let fraction = match cfg.batch {
        Batch::Full => None,
        Batch::Auto if n <= FULL_BATCH_LIMIT => None,
        Batch::Auto => Some(0.25),
        Batch::Fraction(f) if f >= 1.0 => None,
        Batch::Fraction(f) => Some(f.max(1e-6)),
    };
    let schedule = CosineSchedule {
        lr_init: cfg.lr_init,
        lr_final: cfg.lr_init * cfg.lr_final_ratio,
        total: cfg.max_steps,
    };
    let curve_every = (cfg.max_steps / 100).max(1);
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut best = net.clone();
    let mut best_mse = f64::INFINITY;
    let mut curve = Vec::new();
    let mut steps_run = 0;
    let target_mse = cfg.target_rmse * cfg.target_rmse;

    for step in 0..cfg.max_steps {
        let (mse, grads) = match fraction {
            None => net.loss_and_gradient(coords, targets),
            Some(f) => {
                let k = ((n as f64 * f as f64).ceil() as usize).clamp(1, n.max(1));
                let mut rows = index::sample(&mut rng, n, k).into_vec();
                rows.sort_unstable();
                let xb = coords.select(Axis(0), &rows);
                let yb = targets.select(Axis(0), &rows);
                net.loss_and_gradient(xb.view(), yb.view())
            }
        };
        if !mse.is_finite() {
            return Err(HihaError::Diverged { step });
        }
        if step % curve_every == 0 {
            curve.push((step, mse.sqrt()));
        }
        // the loss above belongs to the parameters before this step's update
        let full_mse = match fraction {
            None => Some(mse),
            Some(_) if step % cfg.eval_every.max(1) == 0 => {
                let r = rmse_of(&net, coords, targets);
                Some(r * r)
            }
            Some(_) => None,
        };
        if let Some(m) = full_mse {
            if m < best_mse {
                best_mse = m;
                best.clone_from(&net);
            }
            if m <= target_mse {
                break;
            }
        }
        adam.step(&mut net, &grads, schedule.lr(step));
        steps_run = step + 1;
    }

    if steps_run == cfg.max_steps {
        // parameters after the final update have not been scored yet
        let r = rmse_of(&net, coords, targets);
        if r * r < best_mse {
            best = net;
        }
    }
    let final_rmse = rmse_of(&best, coords, targets);
    if !final_rmse.is_finite() {
        return Err(HihaError::Diverged { step: steps_run });
    }
    curve.push((steps_run, final_rmse));
    Ok((
        best,
        TrainReport {
            steps_run,
            final_rmse,
            loss_curve: curve,
            wall_time: started.elapsed(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_coordinates;
    use crate::siren::coordinate_widths;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            lr_init: 1e-4,
            lr_final: 1e-6,
            total: 1000,
        };
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(1000) - 1e-6).abs() < 1e-18);
        assert!((s.lr(500) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-15);
        assert!(s.lr(300) > s.lr(301));
    }

    #[test]
    fn zero_steps_is_identity() {
        let coords = build_coordinates([1, 4, 4]).unwrap();
        let y = Array1::<f32>::zeros(16);
        let cfg = TrainConfig {
            max_steps: 0,
            seed: 3,
            ..Default::default()
        };
        let (net, report) = fit(coords.data().view(), y.view(), &[4, 8, 1], 14.0, &cfg).unwrap();
        assert_eq!(net, SirenNetwork::init(&[4, 8, 1], 14.0, 3).unwrap());
        assert_eq!(report.steps_run, 0);
    }

    #[test]
    fn zero_target_fits() {
        let coords = build_coordinates([2, 8, 16]).unwrap();
        let y = Array1::<f32>::zeros(coords.len());
        let cfg = TrainConfig {
            max_steps: 3000,
            lr_init: 1e-3,
            target_rmse: 1e-4,
            seed: 1,
            ..Default::default()
        };
        let (_, report) = fit(coords.data().view(), y.view(), &coordinate_widths(3, 256), 14.0, &cfg).unwrap();
        assert!(report.final_rmse <= 1e-4, "rmse {}", report.final_rmse);
        assert!(report.steps_run < 3000);
    }

    #[test]
    fn report_rmse_is_recomputable_and_deterministic() {
        let coords = build_coordinates([1, 8, 8]).unwrap();
        let y = Array1::from_shape_fn(64, |i| ((i as f32) * 0.1).sin() * 0.5);
        let cfg = TrainConfig {
            max_steps: 150,
            seed: 9,
            ..Default::default()
        };
        let (a, ra) = fit(coords.data().view(), y.view(), &[4, 16, 16, 1], 14.0, &cfg).unwrap();
        let (b, _) = fit(coords.data().view(), y.view(), &[4, 16, 16, 1], 14.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((ra.final_rmse - rmse_of(&a, coords.data().view(), y.view())).abs() < 1e-7);
    }

    #[test]
    fn subsampled_training_runs() {
        let coords = build_coordinates([1, 8, 8]).unwrap();
        let y = Array1::from_shape_fn(64, |i| (i as f32 / 64.0) - 0.5);
        let cfg = TrainConfig {
            max_steps: 300,
            lr_init: 1e-3,
            batch: Batch::Fraction(0.25),
            eval_every: 50,
            seed: 2,
            ..Default::default()
        };
        let start = rmse_of(&SirenNetwork::init(&[4, 16, 1], 14.0, 2).unwrap(), coords.data().view(), y.view());
        let (_, report) = fit(coords.data().view(), y.view(), &[4, 16, 1], 14.0, &cfg).unwrap();
        assert!(report.final_rmse < start);
    }
}
