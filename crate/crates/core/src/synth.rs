//! Synthetic ground truth: superposed integer-mode harmonics, single-voxel
//! spikes and a constant offset, optionally drifting over frames.
//!
//! A harmonic with modes `m` and phase `b` contributes
//! `a * sin(2 pi (m_p k / n_p + m_lat i / n_lat + m_lon j / n_lon) + b)` at
//! voxel `(k, i, j)`, so it lives on exactly one FFT mode pair and its band is
//! known in advance.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HihaError, Result};
use crate::field::{voxel_count, GridField, Shape};
use crate::spectral::{Band, BandThresholds, MIN_LEVELS_FOR_3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    /// Signed mode index per (level, lat, lon) axis.
    pub modes: [i64; 3],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Singularity {
    pub voxel: [usize; 3],
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct HarmonicSpec {
    pub harmonics: Vec<Harmonic>,
    #[serde(default)]
    pub singularities: Vec<Singularity>,
    #[serde(default)]
    pub offset: f64,
    /// Drives spike resampling in drifting series.
    #[serde(default)]
    pub seed: u64,
}

impl HarmonicSpec {
    pub fn validate(&self, shape: Shape) -> Result<()> {
        if shape.contains(&0) {
            return Err(HihaError::invalid("shape extents must be at least 1"));
        }
        if !self.offset.is_finite() {
            return Err(HihaError::invalid("offset must be finite"));
        }
        for (n, h) in self.harmonics.iter().enumerate() {
            if !h.amplitude.is_finite() || !h.phase.is_finite() {
                return Err(HihaError::invalid(format!("harmonic {n} has a non-finite amplitude or phase")));
            }
            for axis in 0..3 {
                if h.modes[axis].unsigned_abs() as usize > shape[axis] / 2 {
                    return Err(HihaError::invalid(format!(
                        "harmonic {n}: mode {} exceeds the Nyquist limit {} on axis {axis}",
                        h.modes[axis],
                        shape[axis] / 2
                    )));
                }
            }
        }
        for (n, s) in self.singularities.iter().enumerate() {
            if !s.magnitude.is_finite() {
                return Err(HihaError::invalid(format!("singularity {n} has a non-finite magnitude")));
            }
            if (0..3).any(|a| s.voxel[a] >= shape[a]) {
                return Err(HihaError::invalid(format!("singularity {n} lies outside the grid")));
            }
        }
        Ok(())
    }

    /// Smooth part only.
    fn harmonic_values(&self, shape: Shape, phase_shift: &[f64]) -> Vec<f64> {
        let [np, nt, nf] = shape;
        let mut out = vec![self.offset; voxel_count(shape)];
        for (n, h) in self.harmonics.iter().enumerate() {
            let beta = h.phase + phase_shift.get(n).copied().unwrap_or(0.0);
            let fp = h.modes[0] as f64 / np as f64;
            let ft = h.modes[1] as f64 / nt as f64;
            let ff = h.modes[2] as f64 / nf as f64;
            let mut idx = 0;
            for k in 0..np {
                for i in 0..nt {
                    let base = fp * k as f64 + ft * i as f64;
                    for j in 0..nf {
                        out[idx] += h.amplitude * (2.0 * PI * (base + ff * j as f64) + beta).sin();
                        idx += 1;
                    }
                }
            }
        }
        out
    }
}

fn flat(shape: Shape, v: [usize; 3]) -> usize {
    (v[0] * shape[1] + v[1]) * shape[2] + v[2]
}

pub fn gen_field(shape: Shape, spec: &HarmonicSpec) -> Result<GridField> {
    spec.validate(shape)?;
    render(shape, spec, &[], &spec.singularities)
}

fn render(shape: Shape, spec: &HarmonicSpec, phase_shift: &[f64], spikes: &[Singularity]) -> Result<GridField> {
    let mut v = spec.harmonic_values(shape, phase_shift);
    for s in spikes {
        v[flat(shape, s.voxel)] += s.magnitude;
    }
    GridField::from_vec(shape, v.into_iter().map(|x| x as f32).collect())
}

/// Per-harmonic phase increment per frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Drift {
    Uniform(f64),
    PerHarmonic(Vec<f64>),
    /// Frame `t` is shifted by `schedule[t]` (cumulative phase, not a rate).
    Schedule(Vec<f64>),
}

impl Drift {
    fn shifts(&self, t: usize, n_harmonics: usize) -> Vec<f64> {
        match self {
            Drift::Uniform(d) => vec![t as f64 * d; n_harmonics],
            Drift::PerHarmonic(d) => (0..n_harmonics).map(|n| t as f64 * d.get(n).copied().unwrap_or(0.0)).collect(),
            Drift::Schedule(s) => vec![s.get(t).copied().unwrap_or(0.0); n_harmonics],
        }
    }
}

/// Frame `t` shifts every phase by its drift. With `churn`, frames after the
/// first draw new spike positions (same magnitudes) from the spec seed.
pub fn gen_series(shape: Shape, spec: &HarmonicSpec, n_frames: usize, drift: &Drift, churn: bool) -> Result<Vec<GridField>> {
    spec.validate(shape)?;
    if n_frames == 0 {
        return Err(HihaError::invalid("a series needs at least one frame"));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let spikes = if churn && t > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let voxels = distinct_voxels(&mut rng, shape, spec.singularities.len());
            spec.singularities
                .iter()
                .zip(voxels)
                .map(|(s, voxel)| Singularity {
                    voxel,
                    magnitude: s.magnitude,
                })
                .collect()
        } else {
            spec.singularities.clone()
        };
        let mut f = render(shape, spec, &drift.shifts(t, spec.harmonics.len()), &spikes)?;
        f.frame_index = t as u32;
        frames.push(f);
    }
    Ok(frames)
}

fn distinct_voxels(rng: &mut ChaCha8Rng, shape: Shape, n: usize) -> Vec<[usize; 3]> {
    let n = n.min(voxel_count(shape));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = [
            rng.random_range(0..shape[0]),
            rng.random_range(0..shape[1]),
            rng.random_range(0..shape[2]),
        ];
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Recipe for a random spec with a chosen number of harmonics per band.
/// Fields missing from a serialized mix take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandMix {
    /// (count, amplitude) for low, mid, high.
    pub low: (usize, f64),
    pub mid: (usize, f64),
    pub high: (usize, f64),
    pub spikes: usize,
    /// Spike magnitude as a multiple of the harmonic field's standard deviation.
    pub spike_factor: f64,
    /// Low modes have every |m_axis| at most this.
    pub max_low_mode: i64,
    pub offset: f64,
    /// Low and mid harmonics get no longitude mode, so the field is constant
    /// along the pole rows, where every longitude shares one coordinate.
    pub pole_consistent: bool,
}

impl Default for BandMix {
    fn default() -> Self {
        Self {
            low: (4, 1.0),
            mid: (4, 0.1),
            high: (2, 0.005),
            spikes: 20,
            spike_factor: 10.0,
            max_low_mode: 2,
            offset: 0.0,
            pole_consistent: true,
        }
    }
}

/// Draws distinct integer modes strictly inside each band (at least 0.1 from
/// a boundary) plus spikes at distinct voxels with random signs.
pub fn random_spec(shape: Shape, thresholds: &BandThresholds, mix: &BandMix, seed: u64) -> Result<HarmonicSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = |a: usize| (shape[a] / 2) as i64;
    let level_lim = if shape[0] >= MIN_LEVELS_FOR_3D { (half(0) - 1).max(0) } else { 0 };
    let lims = [level_lim, (half(1) - 1).max(0), (half(2) - 1).max(0)];
    let mut candidates: [Vec<[i64; 3]>; 3] = Default::default();
    for p in 0..=lims[0] {
        for t in -lims[1]..=lims[1] {
            for f in -lims[2]..=lims[2] {
                let m = [p, t, f];
                // one representative per +-m pair
                if p == 0 && (t < 0 || (t == 0 && f <= 0)) {
                    continue;
                }
                let rho = thresholds.radial(m);
                let band = thresholds.classify(rho);
                let margin = (rho - thresholds.base_freq).abs().min((rho - thresholds.mid_upper()).abs());
                if margin < 0.1 {
                    continue;
                }
                if mix.pole_consistent && f != 0 && band != Band::High {
                    continue;
                }
                let slot = match band {
                    Band::Low => {
                        if m.iter().any(|c| c.abs() > mix.max_low_mode) {
                            continue;
                        }
                        0
                    }
                    Band::Mid => 1,
                    Band::High => 2,
                };
                candidates[slot].push(m);
            }
        }
    }
    let mut harmonics = Vec::new();
    for (slot, (count, amp)) in [mix.low, mix.mid, mix.high].into_iter().enumerate() {
        let pool = &mut candidates[slot];
        if count > pool.len() {
            return Err(HihaError::invalid(format!(
                "grid {shape:?} offers only {} modes in band {slot}, {count} requested",
                pool.len()
            )));
        }
        for _ in 0..count {
            let m = pool.swap_remove(rng.random_range(0..pool.len()));
            harmonics.push(Harmonic {
                amplitude: amp * rng.random_range(0.75..1.25),
                modes: m,
                phase: rng.random_range(0.0..2.0 * PI),
            });
        }
    }
    let mut spec = HarmonicSpec {
        harmonics,
        singularities: Vec::new(),
        offset: mix.offset,
        seed,
    };
    let smooth = gen_field(shape, &spec)?;
    let std = smooth.std_dev().max(f64::MIN_POSITIVE);
    spec.singularities = distinct_voxels(&mut rng, shape, mix.spikes)
        .into_iter()
        .map(|voxel| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Singularity {
                voxel,
                magnitude: sign * mix.spike_factor * std * rng.random_range(0.8..1.2),
            }
        })
        .collect();
    Ok(spec)
}
