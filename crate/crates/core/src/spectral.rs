//! Harmonic decomposition: a masked 3D FFT splits a field into low, mid and
//! high frequency bands whose sum is the input.

use std::fmt;

use ndarray::Array3;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, HihaError, Result};
use crate::field::{GridField, Shape};

/// Level counts below this use a 2D (lat, lon) transform per level.
pub const MIN_LEVELS_FOR_3D: usize = 4;

/// `omega * sqrt(6 / n_c)`: the highest frequency a freshly initialized sine
/// network reliably picks up.
pub fn base_frequency(omega: f64, n_c: u32) -> Result<f64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(HihaError::invalid(format!("omega must be positive, got {omega}")));
    }
    if n_c == 0 {
        return Err(HihaError::invalid("n_c must be at least 1"));
    }
    Ok(omega * (6.0 / n_c as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FreqUnit {
    /// Euclidean norm of signed integer mode indices.
    #[default]
    ModeIndex,
    /// `pi * |m|`: angular frequency over a [-1, 1] domain.
    Angular,
}

impl fmt::Display for FreqUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreqUnit::ModeIndex => f.write_str("mode-index"),
            FreqUnit::Angular => f.write_str("angular"),
        }
    }
}

impl std::str::FromStr for FreqUnit {
    type Err = HihaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode-index" | "mode" => Ok(FreqUnit::ModeIndex),
            "angular" => Ok(FreqUnit::Angular),
            other => Err(HihaError::invalid(format!("unknown frequency unit '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandThresholds {
    pub omega: f64,
    pub n_c: u32,
    pub base_freq: f64,
    pub freq_unit: FreqUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    Mid,
    High,
}

impl BandThresholds {
    pub fn new(omega: f64, n_c: u32, freq_unit: FreqUnit) -> Result<Self> {
        Ok(Self {
            omega,
            n_c,
            base_freq: base_frequency(omega, n_c)?,
            freq_unit,
        })
    }

    /// Thresholds of the initial decomposition (Omega 14, n_c 256).
    pub fn initial() -> Self {
        Self::new(14.0, 256, FreqUnit::ModeIndex).expect("constants are valid")
    }

    /// Thresholds used when re-decomposing a block (Omega 22, n_c 128).
    pub fn redecomposition() -> Self {
        Self::new(22.0, 128, FreqUnit::ModeIndex).expect("constants are valid")
    }

    pub fn mid_upper(&self) -> f64 {
        3.0 * self.base_freq
    }

    pub fn radial(&self, mode: [i64; 3]) -> f64 {
        let norm = mode.iter().map(|&m| (m * m) as f64).sum::<f64>().sqrt();
        match self.freq_unit {
            FreqUnit::ModeIndex => norm,
            FreqUnit::Angular => std::f64::consts::PI * norm,
        }
    }

    pub fn classify(&self, rho: f64) -> Band {
        if rho < self.base_freq {
            Band::Low
        } else if rho < self.mid_upper() {
            Band::Mid
        } else {
            Band::High
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBands {
    pub low: GridField,
    pub mid: GridField,
    pub high: GridField,
    pub thresholds: BandThresholds,
    pub warnings: Vec<String>,
}

impl SpectralBands {
    /// Sum of squares of each band, in 64-bit.
    pub fn energies(&self) -> [f64; 3] {
        [energy(&self.low), energy(&self.mid), energy(&self.high)]
    }
}

pub fn energy(f: &GridField) -> f64 {
    f.values().iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Signed, Nyquist-folded mode index of FFT bin `k` on an axis of length `n`.
pub fn signed_mode(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// In-place multi-axis complex FFT over a C-ordered (level, lat, lon) buffer.
pub(crate) struct Fft3 {
    shape: Shape,
    use_levels: bool,
    plans: Vec<(usize, std::sync::Arc<dyn Fft<f64>>)>,
}

impl Fft3 {
    pub fn new(shape: Shape, inverse: bool) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let use_levels = shape[0] >= MIN_LEVELS_FOR_3D;
        let mut plans = Vec::new();
        for axis in 0..3 {
            let n = shape[axis];
            if n < 2 || (axis == 0 && !use_levels) {
                continue;
            }
            let plan = if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            };
            plans.push((axis, plan));
        }
        Self {
            shape,
            use_levels,
            plans,
        }
    }

    pub fn process(&self, data: &mut [Complex64]) {
        let [np, nt, nf] = self.shape;
        let strides = [nt * nf, nf, 1];
        for (axis, plan) in &self.plans {
            let n = self.shape[*axis];
            let stride = strides[*axis];
            let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
            if stride == 1 {
                for line in data.chunks_exact_mut(n) {
                    plan.process_with_scratch(line, &mut scratch);
                }
                continue;
            }
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            let total = np * nt * nf;
            // every line start along this axis: indices whose coordinate on `axis` is 0
            for start in 0..total {
                if (start / stride) % n != 0 {
                    continue;
                }
                for (i, slot) in line.iter_mut().enumerate() {
                    *slot = data[start + i * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[start + i * stride] = *v;
                }
            }
        }
    }

    /// Number of points the inverse must divide by.
    pub fn norm(&self) -> f64 {
        self.plans.iter().map(|(a, _)| self.shape[*a] as f64).product()
    }

    pub fn uses_levels(&self) -> bool {
        self.use_levels
    }
}

/// Mode index triple for every flat spectrum position.
pub(crate) fn mode_of(flat: usize, shape: Shape, use_levels: bool) -> [i64; 3] {
    let [_, nt, nf] = shape;
    let k = flat / (nt * nf);
    let i = (flat / nf) % nt;
    let j = flat % nf;
    [
        if use_levels { signed_mode(k, shape[0]) } else { 0 },
        signed_mode(i, nt),
        signed_mode(j, nf),
    ]
}

pub(crate) fn forward_spectrum(field: &GridField) -> (Vec<Complex64>, bool) {
    let shape = field.shape();
    let fft = Fft3::new(shape, false);
    let mut data: Vec<Complex64> = field
        .values()
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    fft.process(&mut data);
    (data, fft.uses_levels())
}

pub(crate) fn inverse_to_field(mut spectrum: Vec<Complex64>, shape: Shape) -> GridField {
    let fft = Fft3::new(shape, true);
    fft.process(&mut spectrum);
    let scale = 1.0 / fft.norm();
    let data: Vec<f32> = spectrum.iter().map(|c| (c.re * scale) as f32).collect();
    GridField::from_array(
        Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).expect("spectrum length matches shape"),
    )
}

/// Splits `field` into low/mid/high bands with hard per-mode masks.
pub fn decompose(field: &GridField, thresholds: &BandThresholds) -> Result<SpectralBands> {
    let shape = field.shape();
    let mut warnings = Vec::new();
    for (axis, name) in ["level", "lat", "lon"].iter().enumerate() {
        if shape[axis] == 1 {
            warnings.push(format!("{name} axis has extent 1 and contributes nothing to the radial frequency"));
        }
    }
    if shape[0] > 1 && shape[0] < MIN_LEVELS_FOR_3D {
        warnings.push(format!(
            "{} levels: transform is 2D over (lat, lon) per level",
            shape[0]
        ));
    }

    let (spectrum, use_levels) = forward_spectrum(field);
    let zero = Complex64::new(0.0, 0.0);
    let mut low = vec![zero; spectrum.len()];
    let mut mid = vec![zero; spectrum.len()];
    let mut high = vec![zero; spectrum.len()];
    for (flat, &c) in spectrum.iter().enumerate() {
        let rho = thresholds.radial(mode_of(flat, shape, use_levels));
        match thresholds.classify(rho) {
            Band::Low => low[flat] = c,
            Band::Mid => mid[flat] = c,
            Band::High => high[flat] = c,
        }
    }
    let named = |f: GridField| f.with_meta_of(field);
    Ok(SpectralBands {
        low: named(inverse_to_field(low, shape)),
        mid: named(inverse_to_field(mid, shape)),
        high: named(inverse_to_field(high, shape)),
        thresholds: *thresholds,
        warnings,
    })
}

/// Elementwise `low + mid + high`.
pub fn recombine(bands: &SpectralBands) -> Result<GridField> {
    check_shape(bands.low.shape(), bands.mid.shape())?;
    check_shape(bands.low.shape(), bands.high.shape())?;
    let mut out = bands.low.clone();
    out.add_assign(&bands.mid);
    out.add_assign(&bands.high);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Real field holding exactly the FFT mode pair (+m, -m).
    fn pure_mode(shape: Shape, m: [i64; 3], amp: f64) -> GridField {
        let mut data = Vec::with_capacity(shape.iter().product());
        for k in 0..shape[0] {
            for i in 0..shape[1] {
                for j in 0..shape[2] {
                    let phase = 2.0
                        * PI
                        * (m[0] as f64 * k as f64 / shape[0] as f64
                            + m[1] as f64 * i as f64 / shape[1] as f64
                            + m[2] as f64 * j as f64 / shape[2] as f64);
                    data.push((amp * phase.cos()) as f32);
                }
            }
        }
        GridField::from_vec(shape, data).unwrap()
    }

    #[test]
    fn base_frequency_examples() {
        assert!((base_frequency(14.0, 256).unwrap() - 2.1433).abs() < 5e-5);
        assert!((base_frequency(22.0, 128).unwrap() - 4.76314).abs() < 1e-5);
        assert_eq!(base_frequency(1.0, 6).unwrap(), 1.0);
        assert!(base_frequency(0.0, 6).is_err());
        assert!(base_frequency(-1.0, 6).is_err());
        assert!(base_frequency(1.0, 0).is_err());
    }

    #[test]
    fn thresholds_relations() {
        let t = BandThresholds::initial();
        assert_eq!(t.base_freq, 14.0 * (6.0f64 / 256.0).sqrt());
        assert_eq!(t.mid_upper(), 3.0 * t.base_freq);
    }

    #[test]
    fn constant_field_is_all_low() {
        let f = GridField::constant([4, 8, 16], 0.25);
        let b = decompose(&f, &BandThresholds::initial()).unwrap();
        for (a, e) in b.low.values().iter().zip(f.values()) {
            assert!((a - e).abs() < 1e-7);
        }
        assert!(b.mid.max_abs() < 1e-7);
        assert!(b.high.max_abs() < 1e-7);
    }

    #[test]
    fn pure_mid_mode_lands_in_mid() {
        // rho = 2 * base  ->  |m| ~ 4.29; (0, 3, 3) has |m| = 4.24
        let t = BandThresholds::initial();
        let m = [0, 3, 3];
        assert_eq!(t.classify(t.radial(m)), Band::Mid);
        let f = pure_mode([4, 16, 32], m, 0.8);
        let b = decompose(&f, &t).unwrap();
        assert!(b.low.max_abs() < 1e-6);
        assert!(b.high.max_abs() < 1e-6);
        for (a, e) in b.mid.values().iter().zip(f.values()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_plus_high_mode() {
        let t = BandThresholds::initial();
        let m = [1, 5, 6];
        assert_eq!(t.classify(t.radial(m)), Band::High);
        let mode = pure_mode([4, 16, 32], m, 0.5);
        let f = mode.add(&GridField::constant([4, 16, 32], 0.3)).unwrap();
        let b = decompose(&f, &t).unwrap();
        assert!(b.mid.max_abs() < 1e-6);
        assert!(b.low.values().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        for (a, e) in b.high.values().iter().zip(mode.values()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn few_levels_use_2d_transform() {
        let t = BandThresholds::initial();
        // alternating levels would be high frequency in 3D; with 2 levels the
        // level axis is not transformed so each level is constant -> low
        let mut data = Vec::new();
        for k in 0..2 {
            data.extend(std::iter::repeat(if k == 0 { 0.5f32 } else { -0.5 }).take(8 * 8));
        }
        let f = GridField::from_vec([2, 8, 8], data).unwrap();
        let b = decompose(&f, &t).unwrap();
        assert!(b.high.max_abs() < 1e-7 && b.mid.max_abs() < 1e-7);
        assert!(!b.warnings.is_empty());
    }

    #[test]
    fn degenerate_axis_warns() {
        let f = GridField::constant([1, 8, 8], 0.1);
        let b = decompose(&f, &BandThresholds::initial()).unwrap();
        assert!(b.warnings.iter().any(|w| w.contains("level")));
    }

    #[test]
    fn angular_unit_keeps_only_dc_low() {
        let t = BandThresholds::new(14.0, 256, FreqUnit::Angular).unwrap();
        assert_eq!(t.classify(t.radial([0, 0, 0])), Band::Low);
        assert_eq!(t.classify(t.radial([0, 0, 1])), Band::Mid);
    }

    #[test]
    fn recombine_zero_and_mismatch() {
        let z = GridField::zeros([2, 2, 2]);
        let bands = SpectralBands {
            low: z.clone(),
            mid: z.clone(),
            high: z.clone(),
            thresholds: BandThresholds::initial(),
            warnings: vec![],
        };
        assert_eq!(recombine(&bands).unwrap(), z);
        let bad = SpectralBands {
            high: GridField::zeros([2, 2, 3]),
            ..bands
        };
        assert!(recombine(&bad).is_err());
    }
}
