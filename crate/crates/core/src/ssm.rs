//! Sparse storage of high-band outliers in compressed sparse row form.
//!
//! Rows are (level, lat) pairs flattened level-major; columns are longitude.

use crate::error::{HihaError, Result};
use crate::field::{voxel_count, GridField, Shape};

/// Which high-band voxels survive.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SparsePolicy {
    /// Keep the top `1 - q` fraction of magnitudes.
    Quantile(f64),
    /// Keep every voxel with `|v| >= tau`.
    Absolute(f64),
}

impl Default for SparsePolicy {
    fn default() -> Self {
        SparsePolicy::Quantile(0.999)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseHighBand {
    shape: Shape,
    row_ptr: Vec<u64>,
    col_idx: Vec<u32>,
    values: Vec<f32>,
    threshold_used: f64,
}

/// Fixed bytes before the arrays: n_rows, n_cols, nnz.
pub const CSR_HEADER_BYTES: usize = 16;

impl SparseHighBand {
    /// No stored entries.
    pub fn empty(shape: Shape) -> Self {
        Self {
            shape,
            row_ptr: vec![0; shape[0] * shape[1] + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
            threshold_used: f64::INFINITY,
        }
    }

    /// Validating constructor.
    pub fn from_parts(shape: Shape, row_ptr: Vec<u64>, col_idx: Vec<u32>, values: Vec<f32>, threshold_used: f64) -> Result<Self> {
        let s = Self {
            shape,
            row_ptr,
            col_idx,
            values,
            threshold_used,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n_rows(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn row_ptr(&self) -> &[u64] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn threshold_used(&self) -> f64 {
        self.threshold_used
    }

    pub fn set_threshold_used(&mut self, t: f64) {
        self.threshold_used = t;
    }

    pub fn kept_fraction(&self) -> f64 {
        let n = voxel_count(self.shape);
        if n == 0 {
            0.0
        } else {
            self.values.len() as f64 / n as f64
        }
    }

    /// Checks every CSR invariant, naming the first offending index.
    pub fn validate(&self) -> Result<()> {
        let rows = self.n_rows();
        let cols = self.shape[2];
        if self.row_ptr.len() != rows + 1 {
            return Err(HihaError::MalformedSparse(format!(
                "row_ptr has {} entries, expected {}",
                self.row_ptr.len(),
                rows + 1
            )));
        }
        if self.col_idx.len() != self.values.len() {
            return Err(HihaError::MalformedSparse(format!(
                "{} column indices for {} values",
                self.col_idx.len(),
                self.values.len()
            )));
        }
        if self.row_ptr[0] != 0 {
            return Err(HihaError::MalformedSparse(format!("row_ptr[0] = {}, expected 0", self.row_ptr[0])));
        }
        for r in 0..rows {
            if self.row_ptr[r + 1] < self.row_ptr[r] {
                return Err(HihaError::MalformedSparse(format!("row_ptr decreases at index {}", r + 1)));
            }
        }
        if self.row_ptr[rows] != self.values.len() as u64 {
            return Err(HihaError::MalformedSparse(format!(
                "row_ptr[{rows}] = {}, but {} values are stored",
                self.row_ptr[rows],
                self.values.len()
            )));
        }
        for r in 0..rows {
            let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            for e in a..b {
                let c = self.col_idx[e] as usize;
                if c >= cols {
                    return Err(HihaError::MalformedSparse(format!(
                        "col_idx[{e}] = {c} is outside [0, {cols})"
                    )));
                }
                if e > a && self.col_idx[e - 1] >= self.col_idx[e] {
                    return Err(HihaError::MalformedSparse(format!("col_idx not strictly increasing at {e}")));
                }
            }
        }
        if let Some(e) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(HihaError::MalformedSparse(format!("values[{e}] is not finite")));
        }
        Ok(())
    }

    /// Exact serialized size of [`Self::to_bytes`].
    pub fn encoded_len(&self) -> usize {
        CSR_HEADER_BYTES + 8 * self.row_ptr.len() + 4 * self.col_idx.len() + 4 * self.values.len()
    }

    /// `u32 n_rows, u32 n_cols, u64 nnz, u64 row_ptr[], u32 col_idx[], f32 values[]`,
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.n_rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape[2] as u32).to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for p in &self.row_ptr {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for c in &self.col_idx {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    /// Parses [`Self::to_bytes`] output for a field of `shape`. Array lengths
    /// are checked against the available bytes before anything is allocated.
    pub fn from_bytes(bytes: &[u8], shape: Shape, threshold_used: f64) -> Result<Self> {
        let bad = |m: String| HihaError::MalformedSparse(m);
        if bytes.len() < CSR_HEADER_BYTES {
            return Err(bad(format!("{} bytes is shorter than the CSR header", bytes.len())));
        }
        let n_rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let n_cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let nnz = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if n_rows != shape[0] * shape[1] || n_cols != shape[2] {
            return Err(bad(format!(
                "CSR declares {n_rows}x{n_cols}, field needs {}x{}",
                shape[0] * shape[1],
                shape[2]
            )));
        }
        let expected = (n_rows as u128 + 1) * 8 + nnz as u128 * 8 + CSR_HEADER_BYTES as u128;
        if expected != bytes.len() as u128 {
            return Err(bad(format!("CSR needs {expected} bytes, got {}", bytes.len())));
        }
        let nnz = nnz as usize;
        let mut at = CSR_HEADER_BYTES;
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        for _ in 0..=n_rows {
            row_ptr.push(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
            at += 8;
        }
        let mut col_idx = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            col_idx.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
            at += 4;
        }
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            values.push(f32::from_bits(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())));
            at += 4;
        }
        Self::from_parts(shape, row_ptr, col_idx, values, threshold_used)
    }
}

/// Number of voxels a quantile policy keeps out of `n`.
pub fn quantile_keep_count(n: usize, q: f64) -> usize {
    let q = q.clamp(0.0, 1.0);
    n - ((q * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Keeps the high-band voxels selected by `policy`. Exact zeros are never
/// stored; quantile ties are broken by flat index order.
pub fn sparsify(high: &GridField, policy: SparsePolicy) -> Result<SparseHighBand> {
    let shape = high.shape();
    let data = high.as_slice();
    let mut keep = vec![false; data.len()];
    let threshold = match policy {
        SparsePolicy::Absolute(tau) => {
            if !(tau >= 0.0) {
                return Err(HihaError::invalid(format!("threshold must be non-negative, got {tau}")));
            }
            for (k, v) in keep.iter_mut().zip(data) {
                *k = *v != 0.0 && (v.abs() as f64) >= tau;
            }
            tau
        }
        SparsePolicy::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(HihaError::invalid(format!("quantile must lie in [0, 1], got {q}")));
            }
            let k = quantile_keep_count(data.len(), q);
            let mut order: Vec<usize> = (0..data.len()).collect();
            // descending magnitude, ascending index among equals
            order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
            let mut t = f64::INFINITY;
            for &i in order.iter().take(k) {
                if data[i] != 0.0 {
                    keep[i] = true;
                    t = data[i].abs() as f64;
                }
            }
            t
        }
    };

    let cols = shape[2];
    let rows = shape[0] * shape[1];
    let mut row_ptr = Vec::with_capacity(rows + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0u64);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if keep[i] {
                col_idx.push(c as u32);
                values.push(data[i]);
            }
        }
        row_ptr.push(values.len() as u64);
    }
    Ok(SparseHighBand {
        shape,
        row_ptr,
        col_idx,
        values,
        threshold_used: threshold,
    })
}

/// Zeros everywhere except the stored entries, which are copied bit-exactly.
pub fn densify(s: &SparseHighBand) -> Result<GridField> {
    s.validate()?;
    let mut out = vec![0.0f32; voxel_count(s.shape)];
    let cols = s.shape[2];
    for r in 0..s.n_rows() {
        for e in s.row_ptr[r] as usize..s.row_ptr[r + 1] as usize {
            out[r * cols + s.col_idx[e] as usize] = s.values[e];
        }
    }
    GridField::from_vec(s.shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_example() -> GridField {
        GridField::from_vec([1, 2, 3], vec![0.0, 5.0, 0.0, 7.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn hand_built_csr() {
        let s = sparsify(&hand_example(), SparsePolicy::Absolute(1.0)).unwrap();
        assert_eq!(s.row_ptr(), &[0, 1, 2]);
        assert_eq!(s.col_idx(), &[1, 0]);
        assert_eq!(s.values(), &[5.0, 7.0]);
        assert_eq!(densify(&s).unwrap(), hand_example());
    }

    #[test]
    fn all_zero_stores_nothing() {
        let z = GridField::zeros([2, 3, 4]);
        for p in [SparsePolicy::Absolute(0.0), SparsePolicy::Quantile(0.5), SparsePolicy::Quantile(0.0)] {
            assert_eq!(sparsify(&z, p).unwrap().nnz(), 0);
        }
    }

    #[test]
    fn empty_densifies_to_zeros() {
        let s = SparseHighBand::empty([2, 2, 5]);
        assert_eq!(densify(&s).unwrap(), GridField::zeros([2, 2, 5]));
    }

    #[test]
    fn zero_threshold_is_lossless() {
        let f = GridField::from_vec([1, 2, 3], vec![-1.5, 0.0, 2.25, 1e-30, -0.0, 3.0]).unwrap();
        let back = densify(&sparsify(&f, SparsePolicy::Absolute(0.0)).unwrap()).unwrap();
        for (a, b) in f.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn quantile_keeps_top_voxel_of_thousand() {
        let vals: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
        let f = GridField::from_vec([10, 10, 10], vals.clone()).unwrap();
        let s = sparsify(&f, SparsePolicy::Quantile(0.999)).unwrap();
        assert_eq!(s.nnz(), 1);
        let top = (0..1000).max_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()).then(b.cmp(&a))).unwrap();
        assert_eq!(s.values()[0], vals[top]);
    }

    #[test]
    fn quantile_ties_prefer_lower_index() {
        let f = GridField::from_vec([1, 1, 4], vec![1.0, -1.0, 1.0, 0.5]).unwrap();
        let s = sparsify(&f, SparsePolicy::Quantile(0.5)).unwrap();
        assert_eq!(s.col_idx(), &[0, 1]);
    }

    #[test]
    fn keep_count_edges() {
        assert_eq!(quantile_keep_count(1000, 0.999), 1);
        assert_eq!(quantile_keep_count(10, 0.0), 10);
        assert_eq!(quantile_keep_count(10, 1.0), 0);
        assert_eq!(quantile_keep_count(0, 0.5), 0);
    }

    #[test]
    fn bytes_round_trip_and_length() {
        let s = sparsify(&hand_example(), SparsePolicy::Absolute(1.0)).unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), s.encoded_len());
        assert_eq!(b.len(), 16 + 8 * 3 + 4 * 2 + 4 * 2);
        assert_eq!(SparseHighBand::from_bytes(&b, [1, 2, 3], 1.0).unwrap(), s);
    }

    #[test]
    fn malformed_structures_are_rejected() {
        let shape = [1, 2, 3];
        let cases = [
            (vec![0, 1], vec![1], vec![5.0]),
            (vec![1, 1, 1], vec![1], vec![5.0]),
            (vec![0, 2, 1], vec![1, 0], vec![5.0, 7.0]),
            (vec![0, 1, 2], vec![3, 0], vec![5.0, 7.0]),
            (vec![0, 2, 2], vec![1, 1], vec![5.0, 7.0]),
            (vec![0, 1, 3], vec![1, 0], vec![5.0, 7.0]),
            (vec![0, 1, 2], vec![1, 0], vec![5.0, f32::NAN]),
        ];
        for (rp, ci, v) in cases {
            let r = SparseHighBand::from_parts(shape, rp.clone(), ci, v, 1.0);
            assert!(matches!(r, Err(HihaError::MalformedSparse(_))), "{rp:?}");
        }
    }
}
