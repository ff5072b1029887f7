//! Temporal residual coding. Frame 0 and every retrained frame are coded in
//! full; the frames between them reuse the previous frame's low network
//! (warm start) and previous mid-band reconstruction, storing only a residual
//! pyramid and the frame's own sparse high band.

use std::collections::BTreeSet;
use crate::timing::{Duration, Instant};

use crate::config::{derive_seed, CodecConfig};
use crate::error::{check_shape, HihaError, Result};
use crate::fic::{
    compress_frame, high_part, prepare, pyramid_options, reconstruct_parts, to_physical, FrameArtifact, HighPath,
};
use crate::field::{build_coordinates, Climatology, ClimatologyRemoval, CoordinateTensor, GridField, NormalizationParams, Shape};
use crate::metrics::normalized_rmse;
use crate::mim::{compress_low, downscale, reconstruct_low, thumb_shape, thumbnail_coords, upscale_interp, view, MimArtifact};
use crate::siren::{fit_from, SirenNetwork, TrainConfig};
use crate::ssm::sparsify;

#[derive(Clone, Debug, PartialEq)]
pub struct TrcFrameArtifact {
    pub norm: NormalizationParams,
    pub removal: ClimatologyRemoval,
    pub high: HighPath,
    /// The previous low network after warm-start training on this frame.
    pub low_net: SirenNetwork,
    /// Single-level pyramid over the residual.
    pub mid_residual: MimArtifact,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChainFrame {
    Full(FrameArtifact),
    Delta(TrcFrameArtifact),
}

impl ChainFrame {
    pub fn norm(&self) -> &NormalizationParams {
        match self {
            ChainFrame::Full(a) => &a.norm,
            ChainFrame::Delta(d) => &d.norm,
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, ChainFrame::Full(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalChain {
    pub shape: Shape,
    pub frames: Vec<ChainFrame>,
    /// Frames the judgment sent back to full coding.
    pub retrain_markers: BTreeSet<usize>,
    /// Normalized RMSE of each decoded frame at encode time.
    pub recorded_rmse: Vec<f64>,
}

impl TemporalChain {
    pub fn validate(&self) -> Result<()> {
        match self.frames.first() {
            None => return Err(HihaError::EmptySeries),
            Some(ChainFrame::Delta(_)) => {
                return Err(HihaError::BrokenChain {
                    frame: 0,
                    reason: "the first frame must be coded in full".into(),
                })
            }
            _ => {}
        }
        if self.recorded_rmse.len() != self.frames.len() {
            return Err(HihaError::invalid("one recorded RMSE per frame is required"));
        }
        for &m in &self.retrain_markers {
            match self.frames.get(m) {
                Some(ChainFrame::Full(_)) if m > 0 => {}
                _ => {
                    return Err(HihaError::BrokenChain {
                        frame: m,
                        reason: "retrain marker must point at a full frame after the first".into(),
                    })
                }
            }
        }
        Ok(())
    }
}

/// What a delta frame needs from its predecessor, in the predecessor's
/// normalized space.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub low_net: SirenNetwork,
    pub low_scale: [usize; 3],
    /// Reconstruction minus upscaled thumbnail minus high band.
    pub mid_part: GridField,
    pub norm: NormalizationParams,
}

impl DecodeState {
    fn from_full(artifact: &FrameArtifact, coords: &CoordinateTensor) -> Result<(GridField, Self)> {
        let parts = reconstruct_parts(artifact, coords)?;
        let low_net = artifact.low.thumbnail.clone().ok_or_else(|| HihaError::BrokenChain {
            frame: 0,
            reason: "full frame has no low network to continue".into(),
        })?;
        let mid_part = parts.recon.sub(&parts.low_part)?.sub(&parts.high_part)?;
        Ok((
            parts.recon,
            Self {
                low_net,
                low_scale: artifact.low.scale,
                mid_part,
                norm: artifact.norm.clone(),
            },
        ))
    }

    /// Predecessor mid part expressed in the space of `norm`.
    fn carried_mid(&self, norm: &NormalizationParams) -> GridField {
        if self.norm.is_degenerate() || norm.is_degenerate() {
            return self.mid_part.clone();
        }
        self.mid_part.scaled((self.norm.range() / norm.range()) as f32)
    }

    fn low_field(net: &SirenNetwork, shape: Shape, scale: [usize; 3]) -> Result<GridField> {
        let tc = thumbnail_coords(shape, scale);
        upscale_interp(&net.predict_field(&tc, thumb_shape(shape, scale)), shape, scale)
    }

    /// Applies a delta, returning the normalized reconstruction and the next state.
    fn advance(&self, d: &TrcFrameArtifact, coords: &CoordinateTensor) -> Result<(GridField, Self)> {
        let shape = coords.shape();
        let low = Self::low_field(&d.low_net, shape, self.low_scale)?;
        let high = high_part(&d.high, coords)?;
        let mid_part = self.carried_mid(&d.norm).add(&reconstruct_low(&d.mid_residual, coords)?)?;
        let recon = low.add(&high)?.add(&mid_part)?;
        Ok((
            recon,
            Self {
                low_net: d.low_net.clone(),
                low_scale: self.low_scale,
                mid_part,
                norm: d.norm.clone(),
            },
        ))
    }
}

/// The judgment rejected a delta frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrainSignal {
    /// Normalized RMSE the delta would have had (infinite if a fit diverged).
    pub candidate_rmse: f64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub enum NextFrame {
    Accepted {
        artifact: TrcFrameArtifact,
        state: DecodeState,
        norm_rmse: f64,
    },
    Retrain(RetrainSignal),
}

const TAG_WARM: u64 = 20;
const TAG_RESIDUAL: u64 = 21;

/// Codes `frame` against the predecessor `prev`.
pub fn compress_next_frame(
    prev: &DecodeState,
    frame: &GridField,
    clim: Option<&Climatology>,
    coords: &CoordinateTensor,
    cfg: &CodecConfig,
) -> Result<NextFrame> {
    check_shape(prev.mid_part.shape(), frame.shape())?;
    let shape = frame.shape();
    let prep = prepare(frame, clim, cfg)?;
    let frame_seed = derive_seed(cfg.seed, 2, &[frame.frame_index as u64]);
    let diverged = |step: usize| {
        NextFrame::Retrain(RetrainSignal {
            candidate_rmse: f64::INFINITY,
            reason: format!("fit diverged at step {step}"),
        })
    };

    let high = HighPath::Sparse(sparsify(&prep.bands.high, cfg.sparse)?);
    let high_field = high_part(&high, coords)?;

    let thumb = downscale(&prep.bands.low, prev.low_scale)?;
    let tcoords = thumbnail_coords(shape, prev.low_scale);
    let warm = TrainConfig {
        max_steps: cfg.warm_start_steps,
        lr_init: cfg.lr_init * cfg.warm_lr_ratio,
        target_rmse: cfg.eps * cfg.thumb_target_ratio,
        seed: derive_seed(frame_seed, TAG_WARM, &[]),
        ..TrainConfig::default()
    };
    let low_net = match fit_from(prev.low_net.clone(), tcoords.data().view(), view(&thumb), &warm) {
        Ok((n, _)) => n,
        Err(HihaError::Diverged { step }) => return Ok(diverged(step)),
        Err(e) => return Err(e),
    };
    let (low_net, _) = crate::mim::choose_precision(low_net, cfg.quant16, warm.target_rmse, |n| {
        crate::metrics::rmse_slices(n.forward(tcoords.data().view()).as_slice().unwrap(), thumb.as_slice())
    });
    let low_field = DecodeState::low_field(&low_net, shape, prev.low_scale)?;

    let carried = prev.carried_mid(&prep.norm);
    let residual = prep.normalized.sub(&low_field)?.sub(&high_field)?.sub(&carried)?;
    let mut po = pyramid_options(cfg, shape, cfg.trc_thumb, cfg.trc_residual, derive_seed(frame_seed, TAG_RESIDUAL, &[]));
    po.skip_if_within = true;
    let mid_residual = match compress_low(&residual, coords, cfg.eps, &po) {
        Ok(a) => a,
        Err(HihaError::Diverged { step }) => return Ok(diverged(step)),
        Err(e) => return Err(e),
    };

    let artifact = TrcFrameArtifact {
        norm: prep.norm.clone(),
        removal: prep.removal.clone(),
        high,
        low_net,
        mid_residual,
    };
    let (recon, state) = prev.advance(&artifact, coords)?;
    let decoded = to_physical(&recon, &artifact.norm, &artifact.removal, clim)?;
    let norm_rmse = normalized_rmse(frame, &decoded, &artifact.norm)?.value;
    if norm_rmse > cfg.eps_retrain() {
        return Ok(NextFrame::Retrain(RetrainSignal {
            candidate_rmse: norm_rmse,
            reason: format!("normalized RMSE {norm_rmse:.3e} exceeds {:.3e}", cfg.eps_retrain()),
        }));
    }
    Ok(NextFrame::Accepted {
        artifact,
        state,
        norm_rmse,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub norm_rmse: f64,
    pub full: bool,
    pub wall_time: Duration,
    /// Judgment value of a rejected delta attempt, if one was made.
    pub rejected_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesReport {
    pub frames: Vec<FrameReport>,
    pub wall_time: Duration,
}

/// Codes a series: frame 0 in full, later frames as deltas unless the
/// judgment (or the `no_trc` ablation) forces full coding.
pub fn compress_series(frames: &[GridField], clim: Option<&Climatology>, cfg: &CodecConfig) -> Result<(TemporalChain, SeriesReport)> {
    cfg.validate()?;
    let first = frames.first().ok_or(HihaError::EmptySeries)?;
    let shape = first.shape();
    for (t, f) in frames.iter().enumerate() {
        check_shape(shape, f.shape())?;
        if f.variable_name != first.variable_name {
            return Err(HihaError::invalid(format!("frame {t} holds a different variable")));
        }
    }
    let started = Instant::now();
    let coords = build_coordinates(shape)?;
    crate::par::with_threads(cfg.threads, || {
        let mut chain = TemporalChain {
            shape,
            frames: Vec::new(),
            retrain_markers: BTreeSet::new(),
            recorded_rmse: Vec::new(),
        };
        let mut reports = Vec::new();
        let mut state: Option<DecodeState> = None;
        for (t, frame) in frames.iter().enumerate() {
            let t0 = Instant::now();
            let mut rejected = None;
            if let (Some(prev), false) = (&state, cfg.ablation.no_trc) {
                match compress_next_frame(prev, frame, clim, &coords, cfg)? {
                    NextFrame::Accepted {
                        artifact,
                        state: next,
                        norm_rmse,
                    } => {
                        chain.frames.push(ChainFrame::Delta(artifact));
                        chain.recorded_rmse.push(norm_rmse);
                        reports.push(FrameReport {
                            norm_rmse,
                            full: false,
                            wall_time: t0.elapsed(),
                            rejected_rmse: None,
                        });
                        state = Some(next);
                        continue;
                    }
                    NextFrame::Retrain(signal) => {
                        rejected = Some(signal.candidate_rmse);
                        chain.retrain_markers.insert(t);
                    }
                }
            }
            let (artifact, stats) = compress_frame(frame, clim, &coords, cfg)?;
            let (_, next) = DecodeState::from_full(&artifact, &coords)?;
            chain.frames.push(ChainFrame::Full(artifact));
            chain.recorded_rmse.push(stats.norm_rmse);
            reports.push(FrameReport {
                norm_rmse: stats.norm_rmse,
                full: true,
                wall_time: t0.elapsed(),
                rejected_rmse: rejected,
            });
            state = Some(next);
        }
        Ok((
            chain,
            SeriesReport {
                frames: reports,
                wall_time: started.elapsed(),
            },
        ))
    })
}

/// Sequential decoder; frame `k` is only reachable after frames `0..k`.
pub struct ChainDecoder<'a> {
    chain: &'a TemporalChain,
    coords: CoordinateTensor,
    clim: Option<&'a Climatology>,
    next: usize,
    state: Option<DecodeState>,
}

impl<'a> ChainDecoder<'a> {
    pub fn new(chain: &'a TemporalChain, clim: Option<&'a Climatology>) -> Result<Self> {
        chain.validate()?;
        Ok(Self {
            chain,
            coords: build_coordinates(chain.shape)?,
            clim,
            next: 0,
            state: None,
        })
    }

    pub fn coords(&self) -> &CoordinateTensor {
        &self.coords
    }

    fn decode_next(&mut self) -> Result<GridField> {
        let t = self.next;
        let (recon, state, norm, removal) = match &self.chain.frames[t] {
            ChainFrame::Full(a) => {
                let (recon, s) = DecodeState::from_full(a, &self.coords)?;
                (recon, s, &a.norm, &a.removal)
            }
            ChainFrame::Delta(d) => {
                let prev = self.state.as_ref().ok_or_else(|| HihaError::BrokenChain {
                    frame: t,
                    reason: "delta frame without a decoded predecessor".into(),
                })?;
                let (recon, s) = prev.advance(d, &self.coords)?;
                (recon, s, &d.norm, &d.removal)
            }
        };
        let mut out = to_physical(&recon, norm, removal, self.clim)?;
        out.frame_index = t as u32;
        self.state = Some(state);
        self.next += 1;
        Ok(out)
    }
}

impl Iterator for ChainDecoder<'_> {
    type Item = Result<GridField>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.chain.frames.len() {
            return None;
        }
        let r = self.decode_next();
        if r.is_err() {
            // a failed link ends the stream
            self.next = self.chain.frames.len();
        }
        Some(r)
    }
}

/// Decodes the first `limit` frames (all when `None`).
pub fn reconstruct_series(chain: &TemporalChain, clim: Option<&Climatology>, limit: Option<usize>) -> Result<Vec<GridField>> {
    let n = limit.unwrap_or(chain.frames.len()).min(chain.frames.len());
    ChainDecoder::new(chain, clim)?.take(n).collect()
}
