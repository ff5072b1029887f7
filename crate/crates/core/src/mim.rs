//! Multi-scale fitting of the low band: a box-mean thumbnail fitted by one
//! network, trilinear upscaling, and residual networks on the blocks that
//! still miss the tolerance.

use std::collections::BTreeMap;

use ndarray::ArrayView1;

use crate::config::{derive_seed, NetSpec};
use crate::error::{HihaError, Result};
use crate::field::{Bounds, CoordinateTensor, GridField, Shape};
use crate::metrics::rmse_slices;
use crate::par;
use crate::siren::{fit, SirenNetwork, TrainConfig};

/// Pyramid scale factor on axes long enough to take it.
pub const SCALE: usize = 3;
/// Axes shorter than this keep factor 1 and a single block.
pub const MIN_SCALED_EXTENT: usize = 9;

pub fn default_scale(shape: Shape) -> [usize; 3] {
    shape.map(|n| if n >= MIN_SCALED_EXTENT { SCALE } else { 1 })
}

pub fn default_block_grid(shape: Shape) -> [usize; 3] {
    default_scale(shape)
}

pub fn thumb_shape(shape: Shape, scale: [usize; 3]) -> Shape {
    [0, 1, 2].map(|a| shape[a].div_ceil(scale[a].max(1)))
}

/// Box start/end along one axis; the last box takes the remainder.
fn boxes(n: usize, s: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(s)).map(|b| (b * s, ((b + 1) * s).min(n))).collect()
}

/// Position of each box center in fine-grid index units.
pub fn box_centers(n: usize, s: usize) -> Vec<f64> {
    boxes(n, s.max(1))
        .into_iter()
        .map(|(a, b)| (a + b - 1) as f64 / 2.0)
        .collect()
}

/// Box-mean pooling by per-axis factors.
pub fn downscale(field: &GridField, scale: [usize; 3]) -> Result<GridField> {
    let shape = field.shape();
    for a in 0..3 {
        if scale[a] == 0 || (scale[a] > 1 && shape[a] < scale[a]) {
            return Err(HihaError::invalid(format!(
                "scale {} does not fit axis {a} of extent {}",
                scale[a], shape[a]
            )));
        }
    }
    let bx = [0, 1, 2].map(|a| boxes(shape[a], scale[a]));
    let v = field.values();
    let mut out = Vec::with_capacity(bx[0].len() * bx[1].len() * bx[2].len());
    for &(k0, k1) in &bx[0] {
        for &(i0, i1) in &bx[1] {
            for &(j0, j1) in &bx[2] {
                let mut sum = 0.0f64;
                for k in k0..k1 {
                    for i in i0..i1 {
                        for j in j0..j1 {
                            sum += v[[k, i, j]] as f64;
                        }
                    }
                }
                let n = (k1 - k0) * (i1 - i0) * (j1 - j0);
                out.push((sum / n as f64) as f32);
            }
        }
    }
    GridField::from_vec(thumb_shape(shape, scale), out)
}

/// (lower index, upper index, upper weight) for every fine position.
fn axis_weights(n: usize, s: usize, periodic: bool) -> Vec<(usize, usize, f64)> {
    let centers = box_centers(n, s);
    let m = centers.len();
    (0..n)
        .map(|x| {
            let x = x as f64;
            if m == 1 {
                return (0, 0, 0.0);
            }
            if periodic {
                // centers repeat with period n
                let (lo, lo_c, hi, hi_c) = match centers.iter().rposition(|&c| c <= x) {
                    None => (m - 1, centers[m - 1] - n as f64, 0, centers[0]),
                    Some(b) if b == m - 1 => (b, centers[b], 0, centers[0] + n as f64),
                    Some(b) => (b, centers[b], b + 1, centers[b + 1]),
                };
                (lo, hi, (x - lo_c) / (hi_c - lo_c))
            } else if x <= centers[0] {
                (0, 0, 0.0)
            } else if x >= centers[m - 1] {
                (m - 1, m - 1, 0.0)
            } else {
                let lo = centers.iter().rposition(|&c| c <= x).unwrap();
                (lo, lo + 1, (x - centers[lo]) / (centers[lo + 1] - centers[lo]))
            }
        })
        .collect()
}

/// Trilinear interpolation between box centers: periodic in longitude,
/// clamped at the ends of latitude and level.
pub fn upscale_interp(thumb: &GridField, target_shape: Shape, scale: [usize; 3]) -> Result<GridField> {
    if thumb.shape() != thumb_shape(target_shape, scale) {
        return Err(HihaError::invalid(format!(
            "thumbnail {:?} does not match target {target_shape:?} at scale {scale:?}",
            thumb.shape()
        )));
    }
    let w = [
        axis_weights(target_shape[0], scale[0], false),
        axis_weights(target_shape[1], scale[1], false),
        axis_weights(target_shape[2], scale[2], true),
    ];
    let t = thumb.values();
    let [np, nt, nf] = target_shape;
    let mut out = Vec::with_capacity(np * nt * nf);
    for &(k0, k1, wk) in &w[0] {
        for &(i0, i1, wi) in &w[1] {
            for &(j0, j1, wj) in &w[2] {
                let at = |k: usize, i: usize| {
                    let a = t[[k, i, j0]] as f64;
                    let b = t[[k, i, j1]] as f64;
                    a + wj * (b - a)
                };
                let lo = at(k0, i0) + wi * (at(k0, i1) - at(k0, i0));
                let hi = at(k1, i0) + wi * (at(k1, i1) - at(k1, i0));
                out.push((lo + wk * (hi - lo)) as f32);
            }
        }
    }
    GridField::from_vec(target_shape, out)
}

/// Network inputs at the thumbnail's box centers.
pub fn thumbnail_coords(shape: Shape, scale: [usize; 3]) -> CoordinateTensor {
    CoordinateTensor::at_positions(
        shape,
        &box_centers(shape[0], scale[0]),
        &box_centers(shape[1], scale[1]),
        &box_centers(shape[2], scale[2]),
    )
}

/// Floor splits of `n` into `parts` ranges (empty ranges when `n < parts`).
pub fn split_axis(n: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|p| (p * n / parts, (p + 1) * n / parts)).collect()
}

/// Cells of a block grid in id order `(bp * gt + bt) * gf + bf`.
pub fn block_bounds(shape: Shape, grid: [usize; 3]) -> Vec<Bounds> {
    let s = [0, 1, 2].map(|a| split_axis(shape[a], grid[a].max(1)));
    let mut out = Vec::new();
    for &level in &s[0] {
        for &lat in &s[1] {
            for &lon in &s[2] {
                out.push(Bounds { level, lat, lon });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MimArtifact {
    /// Absent when the whole input already met the tolerance.
    pub thumbnail: Option<SirenNetwork>,
    pub scale: [usize; 3],
    pub block_grid: [usize; 3],
    pub residual_blocks: BTreeMap<u32, SirenNetwork>,
    /// Blocks whose final RMSE still exceeds `target_rmse`.
    pub unmet_blocks: Vec<u32>,
    pub target_rmse: f64,
}

impl MimArtifact {
    pub fn nets(&self) -> impl Iterator<Item = &SirenNetwork> {
        self.thumbnail.iter().chain(self.residual_blocks.values())
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        let cells: usize = self.block_grid.iter().product();
        if cells == 0 || cells > 27 {
            return Err(HihaError::invalid(format!("block grid {:?} has {cells} cells", self.block_grid)));
        }
        if self.scale.contains(&0) || (0..3).any(|a| self.scale[a] > 1 && shape[a] < self.scale[a]) {
            return Err(HihaError::invalid(format!("scale {:?} does not fit shape {shape:?}", self.scale)));
        }
        if let Some((&id, _)) = self.residual_blocks.iter().find(|(&id, _)| id as usize >= cells) {
            return Err(HihaError::invalid(format!("residual block {id} outside a {cells}-cell grid")));
        }
        for net in self.nets() {
            if net.widths()[0] != 4 {
                return Err(HihaError::invalid("pyramid networks take 4 coordinate inputs"));
            }
        }
        Ok(())
    }
}

/// How one pyramid is built.
#[derive(Clone, Debug)]
pub struct PyramidOptions {
    pub thumb: NetSpec,
    pub residual: NetSpec,
    pub lr_init: f64,
    /// Thumbnail fit stops at this RMSE.
    pub thumb_target: f64,
    /// Block fits stop at `eps * fit_margin`.
    pub fit_margin: f64,
    pub scale: [usize; 3],
    pub block_grid: [usize; 3],
    pub seed: u64,
    pub quant16: bool,
    /// Skip the thumbnail when the input RMS is already within `eps`, and
    /// the blocks too when it is within `eps * fit_margin`.
    pub skip_if_within: bool,
}

impl PyramidOptions {
    pub fn for_shape(shape: Shape, thumb: NetSpec, residual: NetSpec) -> Self {
        Self {
            thumb,
            residual,
            lr_init: 1e-4,
            thumb_target: 0.0,
            fit_margin: 0.9,
            scale: default_scale(shape),
            block_grid: default_block_grid(shape),
            seed: 0,
            quant16: false,
            skip_if_within: false,
        }
    }

    fn train(&self, spec: &NetSpec, target: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            max_steps: spec.max_steps,
            lr_init: self.lr_init,
            target_rmse: target,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Relative error growth accepted from rounding weights to half precision
/// when a fit has already missed its limit.
pub const F16_SLACK: f64 = 1.02;

/// Keeps the half-precision copy when it stays within `limit` or within
/// [`F16_SLACK`] of the full-precision error; `eval` scores a candidate.
pub(crate) fn choose_precision(net: SirenNetwork, quant16: bool, limit: f64, eval: impl Fn(&SirenNetwork) -> f64) -> (SirenNetwork, f64) {
    let e = eval(&net);
    if !quant16 {
        return (net, e);
    }
    let q = net.quantized_f16();
    let eq = eval(&q);
    if eq <= limit.max(e * F16_SLACK) {
        (q, eq)
    } else {
        (net, e)
    }
}

pub(crate) fn view(f: &GridField) -> ArrayView1<'_, f32> {
    ArrayView1::from(f.as_slice())
}

/// One block's fit outcome.
struct BlockFit {
    id: u32,
    net: Option<SirenNetwork>,
    unmet: bool,
}

/// Fits the pyramid to `low` (already normalized) at tolerance `eps`.
pub fn compress_low(low: &GridField, coords: &CoordinateTensor, eps: f64, opts: &PyramidOptions) -> Result<MimArtifact> {
    let shape = low.shape();
    if coords.shape() != shape {
        return Err(HihaError::invalid("coordinate tensor does not match the field"));
    }
    let zero = vec![0.0f32; low.len()];
    let input_rms = rmse_slices(low.as_slice(), &zero);
    if opts.skip_if_within && input_rms <= eps * opts.fit_margin {
        return Ok(MimArtifact {
            thumbnail: None,
            scale: opts.scale,
            block_grid: opts.block_grid,
            residual_blocks: BTreeMap::new(),
            unmet_blocks: Vec::new(),
            target_rmse: eps,
        });
    }
    let mut thumbnail = None;
    let mut base = GridField::zeros(shape);
    if !(opts.skip_if_within && input_rms <= eps) {
        let thumb = downscale(low, opts.scale)?;
        let tcoords = thumbnail_coords(shape, opts.scale);
        let cfg = opts.train(&opts.thumb, opts.thumb_target, derive_seed(opts.seed, 1, &[]));
        let (net, _) = fit(tcoords.data().view(), view(&thumb), &opts.thumb.widths(), opts.thumb.omega, &cfg)?;
        let (net, _) = choose_precision(net, opts.quant16, opts.thumb_target, |n| {
            rmse_slices(n.forward(tcoords.data().view()).as_slice().unwrap(), thumb.as_slice())
        });
        base = upscale_interp(&net.predict_field(&tcoords, thumb.shape()), shape, opts.scale)?;
        thumbnail = Some(net);
    }
    let residual = low.sub(&base)?;
    let (residual_blocks, unmet_blocks) = fit_blocks(&residual, coords, eps, opts)?;
    Ok(MimArtifact {
        thumbnail,
        scale: opts.scale,
        block_grid: opts.block_grid,
        residual_blocks,
        unmet_blocks,
        target_rmse: eps,
    })
}

type BlockNets = (BTreeMap<u32, SirenNetwork>, Vec<u32>);

/// Sifts the residual's blocks and fits the ones above `eps`.
fn fit_blocks(residual: &GridField, coords: &CoordinateTensor, eps: f64, opts: &PyramidOptions) -> Result<BlockNets> {
    let cells = block_bounds(residual.shape(), opts.block_grid);
    let jobs: Vec<(u32, Bounds)> = cells.into_iter().enumerate().map(|(i, b)| (i as u32, b)).collect();
    let results = par::map(jobs, |(id, b)| -> Result<BlockFit> {
        if b.is_empty() {
            return Ok(BlockFit { id, net: None, unmet: false });
        }
        let r = residual.extract(&b);
        let zero = vec![0.0f32; r.len()];
        let before = rmse_slices(r.as_slice(), &zero);
        if before <= eps {
            return Ok(BlockFit { id, net: None, unmet: false });
        }
        let bc = coords.subset(&b);
        let cfg = opts.train(&opts.residual, eps * opts.fit_margin, derive_seed(opts.seed, 2, &[id as u64]));
        let (net, _) = fit(bc.data().view(), view(&r), &opts.residual.widths(), opts.residual.omega, &cfg)?;
        let (net, after) = choose_precision(net, opts.quant16, eps, |n| {
            rmse_slices(n.forward(bc.data().view()).as_slice().unwrap(), r.as_slice())
        });
        if after < before {
            Ok(BlockFit {
                id,
                net: Some(net),
                unmet: after > eps,
            })
        } else {
            Ok(BlockFit { id, net: None, unmet: true })
        }
    });
    let mut nets = BTreeMap::new();
    let mut unmet = Vec::new();
    for r in results {
        let r = r?;
        if r.unmet {
            unmet.push(r.id);
        }
        if let Some(n) = r.net {
            nets.insert(r.id, n);
        }
    }
    Ok((nets, unmet))
}

/// The upscaled thumbnail prediction alone.
pub fn thumbnail_part(artifact: &MimArtifact, shape: Shape) -> Result<GridField> {
    match &artifact.thumbnail {
        None => Ok(GridField::zeros(shape)),
        Some(net) => {
            let tcoords = thumbnail_coords(shape, artifact.scale);
            let ts = thumb_shape(shape, artifact.scale);
            upscale_interp(&net.predict_field(&tcoords, ts), shape, artifact.scale)
        }
    }
}

/// Upscaled thumbnail plus every residual block's prediction on its cell.
pub fn reconstruct_low(artifact: &MimArtifact, coords: &CoordinateTensor) -> Result<GridField> {
    let shape = coords.shape();
    artifact.validate(shape)?;
    let mut out = thumbnail_part(artifact, shape)?;
    let cells = block_bounds(shape, artifact.block_grid);
    for (&id, net) in &artifact.residual_blocks {
        let b = cells[id as usize];
        if b.is_empty() {
            continue;
        }
        out.add_patch(&b, &net.predict_field(&coords.subset(&b), b.shape()));
    }
    Ok(out)
}
