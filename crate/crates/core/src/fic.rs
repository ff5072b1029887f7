//! Single-frame pipeline: climatology removal, normalization, band split,
//! then sparse high band, low-band pyramid and mid-band octree.

use crate::timing::{Duration, Instant};

use crate::config::{derive_seed, CodecConfig, NetSpec};
use crate::error::{check_shape, Result};
use crate::field::{
    add_climatology, denormalize, normalize, subtract_climatology, Climatology, ClimatologyRemoval, CoordinateTensor,
    GridField, NormalizationParams,
};
use crate::idm::{compress_mid, reconstruct_mid, IdmArtifact, IdmOptions};
use crate::metrics::normalized_rmse;
use crate::mim::{compress_low, thumbnail_part, view, MimArtifact, PyramidOptions};
use crate::siren::{fit, SirenNetwork, TrainConfig};
use crate::spectral::{decompose, SpectralBands};
use crate::ssm::{densify, sparsify, SparseHighBand};

/// How the high band is stored.
#[derive(Clone, Debug, PartialEq)]
pub enum HighPath {
    Sparse(SparseHighBand),
    /// Ablation: one network over the whole high band.
    Global(SirenNetwork),
}

/// How the mid band (and whatever the context leaves) is stored.
#[derive(Clone, Debug, PartialEq)]
pub enum MidPath {
    Octree(IdmArtifact),
    /// Ablation: one network over the whole residual; absent when the
    /// context already met the tolerance.
    Global(Option<SirenNetwork>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameArtifact {
    pub norm: NormalizationParams,
    pub removal: ClimatologyRemoval,
    pub high: HighPath,
    /// With the pyramid disabled this holds a single full-resolution fit.
    pub low: MimArtifact,
    pub mid: MidPath,
}

impl FrameArtifact {
    pub fn nets(&self) -> Vec<&SirenNetwork> {
        let mut v: Vec<&SirenNetwork> = self.low.nets().collect();
        if let HighPath::Global(n) = &self.high {
            v.push(n);
        }
        match &self.mid {
            MidPath::Global(Some(n)) => v.push(n),
            MidPath::Global(None) => {}
            MidPath::Octree(a) => a.root.visit(&mut |node| match &node.state {
                crate::idm::NodeState::Fitted { net, .. } => v.push(net),
                crate::idm::NodeState::Redecomposed { net: Some(net), .. } => v.push(net),
                _ => {}
            }),
        }
        v
    }
}

/// A frame after climatology removal, normalization and band split.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub normalized: GridField,
    pub norm: NormalizationParams,
    pub removal: ClimatologyRemoval,
    pub bands: SpectralBands,
}

pub fn prepare(field: &GridField, clim: Option<&Climatology>, cfg: &CodecConfig) -> Result<PreparedFrame> {
    let (anomaly, removal) = subtract_climatology(field, clim)?;
    let (normalized, mut norm) = normalize(&anomaly)?;
    if let ClimatologyRemoval::Reference { epoch_label } = &removal {
        norm.climatology_id = Some(epoch_label.clone());
    }
    let bands = decompose(&normalized, &cfg.thresholds()?)?;
    Ok(PreparedFrame {
        normalized,
        norm,
        removal,
        bands,
    })
}

/// Wall time per stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub prepare: Duration,
    pub high: Duration,
    pub low: Duration,
    pub mid: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    /// Normalized RMSE of the decoded physical field.
    pub norm_rmse: f64,
    pub times: StageTimes,
    pub wall_time: Duration,
    pub unmet: bool,
}

/// The decoded frame split into the parts temporal coding reuses, all in the
/// frame's normalized space.
#[derive(Clone, Debug)]
pub struct FrameParts {
    pub recon: GridField,
    /// Upscaled thumbnail prediction only.
    pub low_part: GridField,
    pub high_part: GridField,
}

fn global_fit(target: &GridField, coords: &CoordinateTensor, spec: &NetSpec, steps: usize, eps: f64, cfg: &CodecConfig, tag: u64) -> Result<SirenNetwork> {
    let tc = TrainConfig {
        max_steps: steps,
        lr_init: cfg.lr_init,
        target_rmse: eps,
        seed: derive_seed(cfg.seed, tag, &[]),
        ..TrainConfig::default()
    };
    let (net, _) = fit(coords.data().view(), view(target), &spec.widths(), spec.omega, &tc)?;
    let (net, _) = crate::mim::choose_precision(net, cfg.quant16, eps, |n| {
        crate::metrics::rmse_slices(n.forward(coords.data().view()).as_slice().unwrap(), target.as_slice())
    });
    Ok(net)
}

pub(crate) fn pyramid_options(cfg: &CodecConfig, shape: crate::field::Shape, thumb: NetSpec, residual: NetSpec, seed: u64) -> PyramidOptions {
    let mut o = PyramidOptions::for_shape(shape, thumb, residual);
    o.lr_init = cfg.lr_init;
    o.thumb_target = cfg.eps * cfg.thumb_target_ratio;
    o.fit_margin = cfg.fit_margin;
    o.seed = seed;
    o.quant16 = cfg.quant16;
    o
}

pub(crate) fn high_part(high: &HighPath, coords: &CoordinateTensor) -> Result<GridField> {
    match high {
        HighPath::Sparse(s) => densify(s),
        HighPath::Global(n) => Ok(n.predict_field(coords, coords.shape())),
    }
}

/// Stage tags for seed derivation.
const TAG_LOW: u64 = 10;
const TAG_HIGH: u64 = 11;
const TAG_MID: u64 = 12;

/// Compresses one frame at the configured tolerance.
pub fn compress_frame(field: &GridField, clim: Option<&Climatology>, coords: &CoordinateTensor, cfg: &CodecConfig) -> Result<(FrameArtifact, FrameStats)> {
    cfg.validate()?;
    check_shape(field.shape(), coords.shape())?;
    let started = Instant::now();
    let shape = field.shape();
    let prep = prepare(field, clim, cfg)?;
    let mut times = StageTimes {
        prepare: started.elapsed(),
        ..StageTimes::default()
    };
    let frame_seed = derive_seed(cfg.seed, 1, &[field.frame_index as u64]);

    let t = Instant::now();
    let high = if cfg.ablation.no_ssm {
        HighPath::Global(global_fit(&prep.bands.high, coords, &cfg.idm_block, cfg.idm_block.max_steps, cfg.eps * cfg.fit_margin, cfg, derive_seed(frame_seed, TAG_HIGH, &[]))?)
    } else {
        HighPath::Sparse(sparsify(&prep.bands.high, cfg.sparse)?)
    };
    let high_field = high_part(&high, coords)?;
    times.high = t.elapsed();

    let t = Instant::now();
    let mut lo = pyramid_options(cfg, shape, cfg.thumb, cfg.mim_residual, derive_seed(frame_seed, TAG_LOW, &[]));
    let low_eps = if cfg.ablation.no_mim {
        lo.scale = [1, 1, 1];
        lo.block_grid = [1, 1, 1];
        f64::INFINITY
    } else {
        cfg.eps
    };
    let low = compress_low(&prep.bands.low, coords, low_eps, &lo)?;
    let low_field = crate::mim::reconstruct_low(&low, coords)?;
    times.low = t.elapsed();

    let t = Instant::now();
    let context = low_field.add(&high_field)?;
    let mid = if cfg.ablation.no_idm {
        let residual = prep.normalized.sub(&context)?;
        let zero = vec![0.0f32; residual.len()];
        if crate::metrics::rmse_slices(residual.as_slice(), &zero) <= cfg.eps {
            MidPath::Global(None)
        } else {
            MidPath::Global(Some(global_fit(&residual, coords, &cfg.idm_block, cfg.idm_block.max_steps, cfg.eps * cfg.fit_margin, cfg, derive_seed(frame_seed, TAG_MID, &[]))?))
        }
    } else {
        let mut o = IdmOptions::new(cfg.idm_block);
        o.max_depth = cfg.idm_max_depth;
        o.redecomp = cfg.redecomp_thresholds()?;
        o.sparse = cfg.sparse;
        o.lr_init = cfg.lr_init;
        o.fit_margin = cfg.fit_margin;
        o.seed = derive_seed(frame_seed, TAG_MID, &[]);
        o.quant16 = cfg.quant16;
        MidPath::Octree(compress_mid(&prep.bands.mid, &context, &prep.normalized, coords, cfg.eps, &o)?)
    };
    times.mid = t.elapsed();

    let unmet = match &mid {
        MidPath::Octree(a) => a.has_unmet(),
        MidPath::Global(_) => false,
    } || !low.unmet_blocks.is_empty();
    let artifact = FrameArtifact {
        norm: prep.norm.clone(),
        removal: prep.removal.clone(),
        high,
        low,
        mid,
    };
    let decoded = decode_frame(&artifact, coords, clim)?;
    let norm_rmse = normalized_rmse(field, &decoded, &artifact.norm)?.value;
    Ok((
        artifact,
        FrameStats {
            norm_rmse,
            times,
            wall_time: started.elapsed(),
            unmet,
        },
    ))
}

/// Normalized-space reconstruction and its reusable parts.
pub fn reconstruct_parts(artifact: &FrameArtifact, coords: &CoordinateTensor) -> Result<FrameParts> {
    let shape = coords.shape();
    let high_part = high_part(&artifact.high, coords)?;
    let low_part = thumbnail_part(&artifact.low, shape)?;
    let mut recon = crate::mim::reconstruct_low(&artifact.low, coords)?.add(&high_part)?;
    match &artifact.mid {
        MidPath::Octree(a) => recon = recon.add(&reconstruct_mid(a, coords)?)?,
        MidPath::Global(Some(n)) => recon = recon.add(&n.predict_field(coords, shape))?,
        MidPath::Global(None) => {}
    }
    Ok(FrameParts {
        recon,
        low_part,
        high_part,
    })
}

/// Maps a normalized reconstruction back to physical units.
pub fn to_physical(recon: &GridField, norm: &NormalizationParams, removal: &ClimatologyRemoval, clim: Option<&Climatology>) -> Result<GridField> {
    add_climatology(&denormalize(recon, norm), removal, clim)
}

pub fn decode_frame(artifact: &FrameArtifact, coords: &CoordinateTensor, clim: Option<&Climatology>) -> Result<GridField> {
    let parts = reconstruct_parts(artifact, coords)?;
    to_physical(&parts.recon, &artifact.norm, &artifact.removal, clim)
}
