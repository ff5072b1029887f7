//! Browser bindings over a single-level synthetic field.
//!
//! Images cross the boundary as row-major `Float32Array`s of `lat * lon`
//! values; statistics come back as JSON strings from [`Demo::stats`].

use hiha_core::field::{build_coordinates, normalize, GridField, Shape};
use hiha_core::siren::{coordinate_widths, fit, TrainConfig};
use hiha_core::spectral::{decompose, energy, BandThresholds, FreqUnit, SpectralBands};
use hiha_core::ssm::{densify, sparsify, SparsePolicy};
use hiha_core::synth::{gen_field, random_spec, BandMix};
use ndarray::Array1;
use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn msg(e: hiha_core::HihaError) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    shape: Shape,
    field: GridField,
    bands: Option<SpectralBands>,
    stats: serde_json::Value,
}

#[wasm_bindgen]
impl Demo {
    /// Random field of one level; `lat` and `lon` must be at least 8.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lat: usize, lon: usize) -> Result<Demo, JsError> {
        Demo::generate(seed, lat, lon).map_err(js)
    }

    pub fn lat(&self) -> usize {
        self.shape[1]
    }

    pub fn lon(&self) -> usize {
        self.shape[2]
    }

    /// The normalized field in [-1, 1].
    pub fn field(&self) -> Vec<f32> {
        self.field.as_slice().to_vec()
    }

    /// Splits the field; returns low, mid and high images back to back.
    pub fn split(&mut self, omega: f64, n_c: u32) -> Result<Vec<f32>, JsError> {
        self.split_bands(omega, n_c).map_err(js)
    }

    /// Keeps the top `1 - q` of the high band; returns the densified result.
    pub fn sparsify(&mut self, q: f64) -> Result<Vec<f32>, JsError> {
        self.sparsify_high(q).map_err(js)
    }

    /// Fits a small sine network to the whole field; returns its prediction.
    pub fn fit(&mut self, hidden: usize, width: usize, omega: f32, steps: usize, seed: u32) -> Result<Vec<f32>, JsError> {
        self.fit_net(hidden, width, omega, steps, seed).map_err(js)
    }

    /// JSON statistics of the last operation.
    pub fn stats(&self) -> String {
        self.stats.to_string()
    }
}

// The operations proper, kept free of JS types so native tests can call them.
impl Demo {
    fn generate(seed: u32, lat: usize, lon: usize) -> Result<Demo, String> {
        if lat < 8 || lon < 8 {
            return Err("grid must be at least 8x8".into());
        }
        let shape = [1, lat, lon];
        let thresholds = BandThresholds::initial();
        let mix = BandMix {
            low: (3, 1.0),
            mid: (3, 0.2),
            high: (2, 0.02),
            spikes: 6,
            max_low_mode: 2,
            // the demo only draws pictures, so longitude modes are welcome
            pole_consistent: false,
            ..Default::default()
        };
        let spec = random_spec(shape, &thresholds, &mix, seed as u64).map_err(msg)?;
        let (field, _) = normalize(&gen_field(shape, &spec).map_err(msg)?).map_err(msg)?;
        Ok(Demo {
            shape,
            field,
            bands: None,
            stats: serde_json::Value::Null,
        })
    }

    fn split_bands(&mut self, omega: f64, n_c: u32) -> Result<Vec<f32>, String> {
        let t = BandThresholds::new(omega, n_c, FreqUnit::ModeIndex).map_err(msg)?;
        let bands = decompose(&self.field, &t).map_err(msg)?;
        let [el, em, eh] = bands.energies();
        let total = energy(&self.field).max(f64::MIN_POSITIVE);
        self.stats = serde_json::json!({
            "base_freq": t.base_freq,
            "mid_upper": t.mid_upper(),
            "energy_share": [el / total, em / total, eh / total],
        });
        let mut out = Vec::with_capacity(3 * self.field.len());
        for b in [&bands.low, &bands.mid, &bands.high] {
            out.extend_from_slice(b.as_slice());
        }
        self.bands = Some(bands);
        Ok(out)
    }

    fn sparsify_high(&mut self, q: f64) -> Result<Vec<f32>, String> {
        let bands = self.bands.as_ref().ok_or("call split first")?;
        let s = sparsify(&bands.high, SparsePolicy::Quantile(q)).map_err(msg)?;
        let dense = densify(&s).map_err(msg)?;
        let err = hiha_core::metrics::rmse(&bands.high, &dense).map_err(msg)?;
        self.stats = serde_json::json!({
            "kept": s.nnz(),
            "bytes": s.encoded_len(),
            "dense_bytes": 4 * self.field.len(),
            "rmse": err,
        });
        Ok(dense.as_slice().to_vec())
    }

    fn fit_net(&mut self, hidden: usize, width: usize, omega: f32, steps: usize, seed: u32) -> Result<Vec<f32>, String> {
        let coords = build_coordinates(self.shape).map_err(msg)?;
        let targets = Array1::from(self.field.as_slice().to_vec());
        let cfg = TrainConfig {
            max_steps: steps,
            lr_init: 1e-3,
            seed: seed as u64,
            ..Default::default()
        };
        let widths = coordinate_widths(hidden, width);
        let (net, report) = fit(coords.data().view(), targets.view(), &widths, omega, &cfg).map_err(msg)?;
        self.stats = serde_json::json!({
            "steps": report.steps_run,
            "rmse": report.final_rmse,
            "params": net.param_count(),
        });
        Ok(net.predict_field(&coords, self.shape).as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_chain() {
        let mut d = Demo::generate(1, 48, 96).unwrap();
        let n = d.lat() * d.lon();
        let bands = d.split_bands(22.0, 128).unwrap();
        assert_eq!(bands.len(), 3 * n);
        // bands add back to the field
        let f = d.field();
        for i in 0..n {
            let sum = bands[i] + bands[n + i] + bands[2 * n + i];
            assert!((sum - f[i]).abs() < 1e-4);
        }
        let high = d.sparsify_high(0.9).unwrap();
        assert_eq!(high.len(), n);
        assert!(d.stats().contains("\"kept\""));
        let pred = d.fit_net(1, 16, 14.0, 20, 0).unwrap();
        assert_eq!(pred.len(), n);
        assert!(d.stats().contains("\"rmse\""));
    }
}
