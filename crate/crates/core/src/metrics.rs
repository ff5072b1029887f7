//! Fidelity measures and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{check_shape, HihaError, Result};
use crate::field::{GridField, NormalizationParams};

/// `sqrt(mean((a - b)^2))`, accumulated in f64.
pub fn rmse(a: &GridField, b: &GridField) -> Result<f64> {
    check_shape(a.shape(), b.shape())?;
    Ok(rmse_slices(a.as_slice(), b.as_slice()))
}

pub(crate) fn rmse_slices(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    (sse / a.len() as f64).sqrt()
}

/// RMSE measured in the normalized [-1, 1] space of `norm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedRmse {
    pub value: f64,
    /// The range was degenerate, so `value` is the plain RMSE.
    pub degenerate: bool,
}

pub fn normalized_rmse(a: &GridField, b: &GridField, norm: &NormalizationParams) -> Result<NormalizedRmse> {
    let raw = rmse(a, b)?;
    if norm.is_degenerate() {
        return Ok(NormalizedRmse {
            value: raw,
            degenerate: true,
        });
    }
    Ok(NormalizedRmse {
        value: raw * 2.0 / norm.range(),
        degenerate: false,
    })
}

/// `20 log10(range(truth) / rmse)`; infinite when the fields agree exactly.
pub fn psnr(truth: &GridField, b: &GridField) -> Result<f64> {
    let e = rmse(truth, b)?;
    let (lo, hi) = truth.min_max();
    let range = hi as f64 - lo as f64;
    if !(range > 0.0) {
        return Err(HihaError::invalid("PSNR is undefined for a constant ground truth"));
    }
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (range / e).log10())
}

/// Sentinel printed for an infinite PSNR.
pub const PSNR_INF: &str = "inf";

/// Ordered key/value report rendered as `key=value` lines plus one JSON object.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Report {
    entries: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.entries.insert(key.into(), v);
    }

    /// Infinite or NaN reals become the string sentinel (JSON has no infinity).
    pub fn set_real(&mut self, key: impl Into<String>, value: f64) {
        if value.is_finite() {
            self.set(key, value);
        } else if value == f64::INFINITY {
            self.set(key, PSNR_INF);
        } else {
            self.set(key, value.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.entries.get(key)
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            match v {
                serde_json::Value::String(s) => writeln!(out, "{k}={s}").unwrap(),
                other => writeln!(out, "{k}={other}").unwrap(),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("report values are JSON")
    }

    /// Key/value lines followed by the JSON line.
    pub fn render(&self) -> String {
        format!("{}{}\n", self.to_key_values(), self.to_json())
    }
}
