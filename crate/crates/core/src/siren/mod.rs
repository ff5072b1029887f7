//! Fully connected sine-activation networks (coordinate -> value) with
//! hand-written backpropagation.
//!
//! Layer 0 computes `sin(omega_0 * W x + b)`, hidden layers `sin(W x + b)`
//! and the head is linear. A single-layer net applies the sine to its output.

pub mod fastmath;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HihaError, Result};
use crate::field::{CoordinateTensor, GridField, Shape};

pub use train::{fit, fit_from, Adam, Batch, CosineSchedule, TrainConfig, TrainReport};

/// The linear head starts this much below the hidden-layer bound, so a fresh
/// network predicts almost zero instead of random sine structure.
pub const HEAD_INIT_SCALE: f32 = 1e-3;

/// Rows per forward/backward chunk; bounds activation memory.
const CHUNK_ROWS: usize = 4096;

/// Scalar type a network can run in. Training uses `f32`; `f64` exists so
/// gradients can be checked against finite differences.
pub trait Real:
    LinalgScalar + ScalarOperand + PartialOrd + Send + Sync + Debug + AddAssign + SubAssign + MulAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sin_cos_slice(z: &mut [Self], cos: &mut [Self]);
    fn sin_slice(z: &mut [Self]);
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sin_cos_slice(z: &mut [Self], cos: &mut [Self]) {
        fastmath::sin_cos_slice(z, cos)
    }
    fn sin_slice(z: &mut [Self]) {
        fastmath::sin_slice(z)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sin_cos_slice(z: &mut [Self], cos: &mut [Self]) {
        for (s, c) in z.iter_mut().zip(cos.iter_mut()) {
            let (sv, cv) = s.sin_cos();
            *s = sv;
            *c = cv;
        }
    }
    fn sin_slice(z: &mut [Self]) {
        for s in z.iter_mut() {
            *s = s.sin();
        }
    }
}

/// Storage precision of the weights in an archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WeightPrecision {
    #[default]
    F32,
    F16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// (fan_out, fan_in)
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Parameter gradients, shaped like the network's layers.
pub type Gradients<T> = Vec<Layer<T>>;

/// Sigma (fan_in + 1) * fan_out over consecutive widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Widths for `hidden` sine layers of size `width` between 4 inputs and 1 output.
pub fn coordinate_widths(hidden: usize, width: usize) -> Vec<usize> {
    let mut w = vec![4];
    w.extend(std::iter::repeat(width).take(hidden));
    w.push(1);
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenNetwork<T: Real = f32> {
    widths: Vec<usize>,
    omega_0: T,
    layers: Vec<Layer<T>>,
    precision: WeightPrecision,
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(HihaError::invalid("a network needs at least an input and an output width"));
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return Err(HihaError::invalid(format!("layer width {i} is zero")));
    }
    if *widths.last().unwrap() != 1 {
        return Err(HihaError::invalid("coordinate networks have a single output"));
    }
    Ok(())
}

impl SirenNetwork<f32> {
    /// Seeded sine-network initialization.
    ///
    /// First layer weights are drawn from U(-1/fan_in, 1/fan_in) and scaled by
    /// `omega_0` in the forward pass; every later sine layer from
    /// U(-sqrt(6/fan_in), sqrt(6/fan_in)) and the head from that range times
    /// [`HEAD_INIT_SCALE`]. First-layer biases are uniform
    /// phases in (-pi, pi); others U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(widths: &[usize], omega_0: f32, seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        if !(omega_0 > 0.0) || !omega_0.is_finite() {
            return Err(HihaError::invalid(format!("omega_0 must be positive, got {omega_0}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let (w_bound, b_bound) = if l == 0 {
                (1.0 / fan_in as f32, std::f32::consts::PI)
            } else {
                ((6.0 / fan_in as f32).sqrt(), 1.0 / (fan_in as f32).sqrt())
            };
            let w_bound = if l > 0 && l + 2 == widths.len() { w_bound * HEAD_INIT_SCALE } else { w_bound };
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-w_bound..w_bound));
            let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-b_bound..b_bound));
            layers.push(Layer { weight, bias });
        }
        Ok(Self {
            widths: widths.to_vec(),
            omega_0,
            layers,
            precision: WeightPrecision::F32,
        })
    }

    /// Evaluates the network on every coordinate and reshapes to `shape`.
    pub fn predict_field(&self, coords: &CoordinateTensor, shape: Shape) -> GridField {
        let out = self.forward(coords.data().view());
        GridField::from_array(
            out.into_shape_with_order((shape[0], shape[1], shape[2]))
                .expect("coordinate count matches shape"),
        )
    }

    /// Rounds every parameter through IEEE half precision.
    pub fn quantized_f16(&self) -> Self {
        let q = |v: &f32| half::f16::from_f32(*v).to_f32();
        Self {
            widths: self.widths.clone(),
            omega_0: self.omega_0,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.map(q),
                    bias: l.bias.map(q),
                })
                .collect(),
            precision: WeightPrecision::F16,
        }
    }

    pub fn precision(&self) -> WeightPrecision {
        self.precision
    }

    /// Reassembles a network from stored parts.
    pub fn from_parts(widths: Vec<usize>, omega_0: f32, layers: Vec<Layer<f32>>, precision: WeightPrecision) -> Result<Self> {
        validate_widths(&widths)?;
        if layers.len() != widths.len() - 1 {
            return Err(HihaError::invalid("layer count does not match widths"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.dim() != (widths[l + 1], widths[l]) || layer.bias.len() != widths[l + 1] {
                return Err(HihaError::invalid(format!("layer {l} shape does not match widths")));
            }
        }
        Ok(Self {
            widths,
            omega_0,
            layers,
            precision,
        })
    }

    /// Widens the scalar type, for gradient checking.
    pub fn to_f64(&self) -> SirenNetwork<f64> {
        SirenNetwork {
            widths: self.widths.clone(),
            omega_0: self.omega_0 as f64,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| v as f64),
                    bias: l.bias.mapv(|v| v as f64),
                })
                .collect(),
            precision: self.precision,
        }
    }
}

impl<T: Real> SirenNetwork<T> {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn omega_0(&self) -> T {
        self.omega_0
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.widths)
    }

    fn is_sine_layer(&self, l: usize) -> bool {
        let n = self.layers.len();
        l + 1 < n || n == 1
    }

    fn check_input(&self, x: &ArrayView2<T>) {
        assert_eq!(
            x.ncols(),
            self.widths[0],
            "input has {} columns, network expects {}",
            x.ncols(),
            self.widths[0]
        );
    }

    /// Per-row prediction.
    pub fn forward(&self, x: ArrayView2<T>) -> Array1<T> {
        self.check_input(&x);
        let mut out = Array1::zeros(x.nrows());
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + CHUNK_ROWS).min(x.nrows());
            let chunk = x.slice(ndarray::s![start..end, ..]);
            let y = self.forward_chunk(chunk);
            out.slice_mut(ndarray::s![start..end]).assign(&y.column(0));
            start = end;
        }
        out
    }

    fn pre_activation(&self, l: usize, a: ArrayView2<T>) -> Array2<T> {
        let layer = &self.layers[l];
        let mut z = a.dot(&layer.weight.t());
        if l == 0 {
            z *= self.omega_0;
        }
        z += &layer.bias;
        z
    }

    fn forward_chunk(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut a = x.to_owned();
        for l in 0..self.layers.len() {
            let mut z = self.pre_activation(l, a.view());
            if self.is_sine_layer(l) {
                T::sin_slice(z.as_slice_mut().expect("fresh arrays are contiguous"));
            }
            a = z;
        }
        a
    }

    /// Mean-squared error over all rows and its gradient w.r.t. every weight
    /// and bias. Chunks are reduced in a fixed order, so results are
    /// deterministic.
    pub fn loss_and_gradient(&self, x: ArrayView2<T>, y: ArrayView1<T>) -> (f64, Gradients<T>) {
        self.check_input(&x);
        assert_eq!(x.nrows(), y.len(), "one target per input row");
        let n = x.nrows();
        let mut grads: Gradients<T> = self
            .widths
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        if n == 0 {
            return (0.0, grads);
        }
        let scale = T::from_f64(2.0 / n as f64);
        let mut sse = 0.0f64;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            sse += self.backward_chunk(
                x.slice(ndarray::s![start..end, ..]),
                y.slice(ndarray::s![start..end]),
                scale,
                &mut grads,
            );
            start = end;
        }
        (sse / n as f64, grads)
    }

    fn backward_chunk(&self, x: ArrayView2<T>, y: ArrayView1<T>, scale: T, grads: &mut [Layer<T>]) -> f64 {
        let nl = self.layers.len();
        let mut inputs: Vec<Array2<T>> = Vec::with_capacity(nl);
        let mut cosines: Vec<Option<Array2<T>>> = Vec::with_capacity(nl);
        let mut a = x.to_owned();
        for l in 0..nl {
            let mut z = self.pre_activation(l, a.view());
            if self.is_sine_layer(l) {
                let mut c = Array2::zeros(z.raw_dim());
                T::sin_cos_slice(
                    z.as_slice_mut().expect("contiguous"),
                    c.as_slice_mut().expect("contiguous"),
                );
                cosines.push(Some(c));
            } else {
                cosines.push(None);
            }
            inputs.push(a);
            a = z;
        }

        // a is (rows, 1): residuals and dL/dprediction
        let mut sse = 0.0f64;
        let mut g = a;
        for (gi, &yi) in g.column_mut(0).iter_mut().zip(y.iter()) {
            let r = *gi - yi;
            sse += r.to_f64() * r.to_f64();
            *gi = r * scale;
        }

        for l in (0..nl).rev() {
            if let Some(c) = &cosines[l] {
                g *= c;
            }
            let mut dw = g.t().dot(&inputs[l]);
            if l == 0 {
                dw *= self.omega_0;
            }
            grads[l].weight += &dw;
            grads[l].bias += &g.sum_axis(Axis(0));
            if l > 0 {
                g = g.dot(&self.layers[l].weight);
            }
        }
        sse
    }
}
