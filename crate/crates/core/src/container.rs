//! Archive wire format.
//!
//! ```text
//! "HIHA" | u16 version | u32 header_len | header | u32 crc32(header)
//! section* where section = u8 kind | u32 frame | u64 len | payload | u32 crc32(kind..payload)
//! ```
//!
//! Everything is little-endian. Each frame contributes a meta section and then
//! one section per band path; a chain-map section closes the archive. Lengths
//! are checked against the remaining input before anything is allocated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::field::{ClimatologyRemoval, NormalizationParams, Shape};
use crate::fic::{FrameArtifact, HighPath, MidPath};
use crate::idm::{octree_split, IdmArtifact, NodeState, OctreeNode};
use crate::field::Bounds;
use crate::mim::MimArtifact;
use crate::siren::{Layer, SirenNetwork, WeightPrecision};
use crate::spectral::{BandThresholds, FreqUnit};
use crate::ssm::SparseHighBand;
use crate::trc::{ChainFrame, TemporalChain, TrcFrameArtifact};

pub const MAGIC: &[u8; 4] = b"HIHA";
pub const VERSION: u16 = 1;
/// Deepest octree a reader accepts.
pub const MAX_OCTREE_DEPTH: usize = 16;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("not a HIHA archive (bad magic)")]
    BadMagic,
    #[error("archive version {found} is not supported (this build reads version {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checksum mismatch in {section} section at byte {offset}")]
    Checksum { section: String, offset: usize },
    #[error("archive truncated inside {section} at byte {offset}")]
    Truncated { section: String, offset: usize },
    #[error("malformed {section} at byte {offset}: {reason}")]
    Malformed { section: String, offset: usize, reason: String },
    #[error("{count} unexpected bytes after the archive end at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("empty archive")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum SectionKind {
    FrameMeta = 1,
    Sparse = 2,
    Pyramid = 3,
    Octree = 4,
    Net = 5,
    ResidualPyramid = 6,
    ChainMap = 7,
}

impl SectionKind {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::FrameMeta,
            2 => Self::Sparse,
            3 => Self::Pyramid,
            4 => Self::Octree,
            5 => Self::Net,
            6 => Self::ResidualPyramid,
            7 => Self::ChainMap,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FrameMeta => "frame-meta",
            Self::Sparse => "sparse-high",
            Self::Pyramid => "pyramid",
            Self::Octree => "octree",
            Self::Net => "net-weights",
            Self::ResidualPyramid => "residual-pyramid",
            Self::ChainMap => "chain-map",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Role byte of a standalone net section.
const NET_HIGH: u8 = 0;
const NET_MID: u8 = 1;
const NET_TRC_LOW: u8 = 2;

/// Archive-level metadata outside the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveMeta {
    pub variable_name: String,
    pub units: String,
    pub thresholds: BandThresholds,
    pub redecomp: BandThresholds,
    /// Configuration the archive was written with, as JSON.
    pub config_echo: String,
}

impl ArchiveMeta {
    pub fn new(variable_name: &str, units: &str, thresholds: BandThresholds, redecomp: BandThresholds, config_echo: String) -> Self {
        Self {
            variable_name: variable_name.to_string(),
            units: units.to_string(),
            thresholds,
            redecomp,
            config_echo,
        }
    }
}

// ---------------------------------------------------------------- writing

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.u32(v.to_bits());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

fn put_thresholds(b: &mut Buf, t: &BandThresholds) {
    b.f64(t.omega);
    b.u32(t.n_c);
    b.u8(match t.freq_unit {
        FreqUnit::ModeIndex => 0,
        FreqUnit::Angular => 1,
    });
}

/// Widths, omega_0, precision, then every layer's weights (row-major) and bias.
pub fn encode_net(b: &mut Vec<u8>, net: &SirenNetwork) {
    let mut w = Buf(std::mem::take(b));
    w.u8(net.widths().len() as u8);
    for &x in net.widths() {
        w.u16(x as u16);
    }
    w.f32(net.omega_0());
    let half = net.precision() == WeightPrecision::F16;
    w.u8(half as u8);
    for layer in net.layers() {
        for &v in layer.weight.iter().chain(layer.bias.iter()) {
            if half {
                w.u16(half::f16::from_f32(v).to_bits());
            } else {
                w.f32(v);
            }
        }
    }
    *b = w.0;
}

/// Serialized size of one network.
pub fn net_encoded_len(net: &SirenNetwork) -> usize {
    let per = if net.precision() == WeightPrecision::F16 { 2 } else { 4 };
    1 + 2 * net.widths().len() + 4 + 1 + per * net.param_count()
}

fn put_sparse(b: &mut Buf, s: &SparseHighBand) {
    b.f64(s.threshold_used());
    b.bytes(&s.to_bytes());
}

fn put_mim(b: &mut Buf, m: &MimArtifact) {
    for s in m.scale {
        b.u8(s as u8);
    }
    for g in m.block_grid {
        b.u8(g as u8);
    }
    b.f64(m.target_rmse);
    match &m.thumbnail {
        Some(n) => {
            b.u8(1);
            encode_net(&mut b.0, n);
        }
        None => b.u8(0),
    }
    b.u16(m.residual_blocks.len() as u16);
    for (&id, n) in &m.residual_blocks {
        b.u8(id as u8);
        encode_net(&mut b.0, n);
    }
    b.u16(m.unmet_blocks.len() as u16);
    for &id in &m.unmet_blocks {
        b.u8(id as u8);
    }
}

fn put_node(b: &mut Buf, node: &OctreeNode) {
    match &node.state {
        NodeState::Passed { unmet } => {
            b.u8(0);
            b.u8(*unmet as u8);
        }
        NodeState::Fitted { net, unmet } => {
            b.u8(1);
            b.u8(*unmet as u8);
            encode_net(&mut b.0, net);
        }
        NodeState::Redecomposed {
            net,
            thresholds,
            sparse,
            children,
        } => {
            b.u8(2);
            match net {
                Some(n) => {
                    b.u8(1);
                    encode_net(&mut b.0, n);
                }
                None => b.u8(0),
            }
            put_thresholds(b, thresholds);
            if sparse.nnz() == 0 {
                b.u8(0);
            } else {
                b.u8(1);
                b.u64(sparse.encoded_len() as u64);
                put_sparse(b, sparse);
            }
            for c in children {
                put_node(b, c);
            }
        }
    }
}

fn put_octree(b: &mut Buf, a: &IdmArtifact) {
    b.u8(a.max_depth as u8);
    b.u32(a.step_budget as u32);
    b.f64(a.target_rmse);
    put_node(b, &a.root);
}

fn put_norm(b: &mut Buf, n: &NormalizationParams, r: &ClimatologyRemoval) {
    b.f64(n.v_min);
    b.f64(n.v_max);
    match &n.climatology_id {
        Some(id) => {
            b.u8(1);
            b.str(id);
        }
        None => b.u8(0),
    }
    match r {
        ClimatologyRemoval::ScalarMean(m) => {
            b.u8(0);
            b.f64(*m);
        }
        ClimatologyRemoval::Reference { epoch_label } => {
            b.u8(1);
            b.str(epoch_label);
        }
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn section(&mut self, kind: SectionKind, frame: usize, payload: &[u8]) {
        let start = self.out.len();
        self.out.push(kind as u8);
        self.out.extend_from_slice(&(frame as u32).to_le_bytes());
        self.out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.out.extend_from_slice(payload);
        let crc = crc32fast::hash(&self.out[start..]);
        self.out.extend_from_slice(&crc.to_le_bytes());
    }
}

/// Frame kinds in the meta section.
const FRAME_FULL: u8 = 0;
const FRAME_DELTA: u8 = 1;

/// Deterministic byte layout of a chain.
pub fn serialize(chain: &TemporalChain, meta: &ArchiveMeta) -> Vec<u8> {
    let mut header = Buf::default();
    for s in chain.shape {
        header.u32(s as u32);
    }
    header.u32(chain.frames.len() as u32);
    header.str(&meta.variable_name);
    header.str(&meta.units);
    put_thresholds(&mut header, &meta.thresholds);
    put_thresholds(&mut header, &meta.redecomp);
    header.str(&meta.config_echo);

    let mut w = Writer { out: Vec::new() };
    w.out.extend_from_slice(MAGIC);
    w.out.extend_from_slice(&VERSION.to_le_bytes());
    w.out.extend_from_slice(&(header.0.len() as u32).to_le_bytes());
    w.out.extend_from_slice(&header.0);
    w.out.extend_from_slice(&crc32fast::hash(&header.0).to_le_bytes());

    for (t, frame) in chain.frames.iter().enumerate() {
        let mut m = Buf::default();
        let (kind, norm, removal, high) = match frame {
            ChainFrame::Full(a) => (FRAME_FULL, &a.norm, &a.removal, &a.high),
            ChainFrame::Delta(d) => (FRAME_DELTA, &d.norm, &d.removal, &d.high),
        };
        m.u8(kind);
        m.f64(chain.recorded_rmse.get(t).copied().unwrap_or(f64::NAN));
        put_norm(&mut m, norm, removal);
        m.u8(matches!(high, HighPath::Global(_)) as u8);
        if let ChainFrame::Full(a) = frame {
            m.u8(match &a.mid {
                MidPath::Octree(_) => 0,
                MidPath::Global(None) => 1,
                MidPath::Global(Some(_)) => 2,
            });
        }
        w.section(SectionKind::FrameMeta, t, &m.0);

        match high {
            HighPath::Sparse(s) => {
                let mut b = Buf::default();
                put_sparse(&mut b, s);
                w.section(SectionKind::Sparse, t, &b.0);
            }
            HighPath::Global(n) => {
                let mut b = vec![NET_HIGH];
                encode_net(&mut b, n);
                w.section(SectionKind::Net, t, &b);
            }
        }
        match frame {
            ChainFrame::Full(a) => {
                let mut b = Buf::default();
                put_mim(&mut b, &a.low);
                w.section(SectionKind::Pyramid, t, &b.0);
                match &a.mid {
                    MidPath::Octree(o) => {
                        let mut b = Buf::default();
                        put_octree(&mut b, o);
                        w.section(SectionKind::Octree, t, &b.0);
                    }
                    MidPath::Global(Some(n)) => {
                        let mut b = vec![NET_MID];
                        encode_net(&mut b, n);
                        w.section(SectionKind::Net, t, &b);
                    }
                    MidPath::Global(None) => {}
                }
            }
            ChainFrame::Delta(d) => {
                let mut b = vec![NET_TRC_LOW];
                encode_net(&mut b, &d.low_net);
                w.section(SectionKind::Net, t, &b);
                let mut b = Buf::default();
                put_mim(&mut b, &d.mid_residual);
                w.section(SectionKind::ResidualPyramid, t, &b.0);
            }
        }
    }

    let mut c = Buf::default();
    c.u32(chain.frames.len() as u32);
    let mut bitmap = vec![0u8; chain.frames.len().div_ceil(8)];
    for &m in &chain.retrain_markers {
        bitmap[m / 8] |= 1 << (m % 8);
    }
    c.bytes(&bitmap);
    w.section(SectionKind::ChainMap, chain.frames.len(), &c.0);
    w.out
}

// ---------------------------------------------------------------- reading

/// Bounded reader; running past the end yields `Truncated` for the outer
/// stream and `Malformed` inside a checksummed payload.
struct Cur<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute offset of `buf[0]` in the archive.
    base: usize,
    section: String,
    inner: bool,
}

type R<T> = std::result::Result<T, ArchiveError>;

impl<'a> Cur<'a> {
    fn new(buf: &'a [u8], base: usize, section: impl Into<String>, inner: bool) -> Self {
        Self {
            buf,
            pos: 0,
            base,
            section: section.into(),
            inner,
        }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn short(&self) -> ArchiveError {
        if self.inner {
            self.bad("payload ends early")
        } else {
            ArchiveError::Truncated {
                section: self.section.clone(),
                offset: self.offset(),
            }
        }
    }

    fn bad(&self, reason: impl Into<String>) -> ArchiveError {
        ArchiveError::Malformed {
            section: self.section.clone(),
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> R<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.short());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> R<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> R<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> R<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> R<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
    fn f64(&mut self) -> R<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn flag(&mut self) -> R<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.bad(format!("flag byte {b}"))),
        }
    }
    fn str(&mut self) -> R<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.bad("string is not UTF-8"))
    }
    fn finite(&mut self) -> R<f64> {
        let v = self.f64()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.bad("non-finite real"))
        }
    }
    fn done(&self) -> R<()> {
        if self.remaining() != 0 {
            return Err(self.bad(format!("{} unread payload bytes", self.remaining())));
        }
        Ok(())
    }
}

fn get_thresholds(c: &mut Cur) -> R<BandThresholds> {
    let omega = c.f64()?;
    let n_c = c.u32()?;
    let unit = match c.u8()? {
        0 => FreqUnit::ModeIndex,
        1 => FreqUnit::Angular,
        u => return Err(c.bad(format!("frequency unit {u}"))),
    };
    BandThresholds::new(omega, n_c, unit).map_err(|e| c.bad(e.to_string()))
}

fn get_net(c: &mut Cur) -> R<SirenNetwork> {
    let n = c.u8()? as usize;
    if n < 2 {
        return Err(c.bad(format!("network with {n} widths")));
    }
    let mut widths = Vec::with_capacity(n);
    for _ in 0..n {
        widths.push(c.u16()? as usize);
    }
    let omega = c.f32()?;
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(c.bad("omega_0 must be positive"));
    }
    let half = c.flag()?;
    let per = if half { 2 } else { 4 };
    let params: usize = widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
    if params.saturating_mul(per) > c.remaining() {
        return Err(c.bad(format!("network declares {params} parameters but the payload is shorter")));
    }
    let read = |c: &mut Cur| -> R<f32> {
        let v = if half {
            half::f16::from_bits(c.u16()?).to_f32()
        } else {
            c.f32()?
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(c.bad("non-finite weight"))
        }
    };
    let mut layers = Vec::with_capacity(n - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut wt = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            wt.push(read(c)?);
        }
        let mut bias = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            bias.push(read(c)?);
        }
        layers.push(Layer {
            weight: ndarray::Array2::from_shape_vec((fan_out, fan_in), wt).expect("sized above"),
            bias: ndarray::Array1::from(bias),
        });
    }
    let precision = if half { WeightPrecision::F16 } else { WeightPrecision::F32 };
    SirenNetwork::from_parts(widths, omega, layers, precision).map_err(|e| c.bad(e.to_string()))
}

fn get_sparse(c: &mut Cur, shape: Shape, len: usize) -> R<SparseHighBand> {
    let thr = c.f64()?;
    let bytes = c.take(len)?;
    SparseHighBand::from_bytes(bytes, shape, thr).map_err(|e| c.bad(e.to_string()))
}

fn csr_len_for(shape: Shape, remaining: usize) -> usize {
    // threshold (8) precedes the CSR bytes
    let _ = shape;
    remaining.saturating_sub(8)
}

fn get_mim(c: &mut Cur, shape: Shape) -> R<MimArtifact> {
    let mut scale = [0usize; 3];
    for s in scale.iter_mut() {
        *s = c.u8()? as usize;
    }
    let mut grid = [0usize; 3];
    for g in grid.iter_mut() {
        *g = c.u8()? as usize;
    }
    let target_rmse = c.f64()?;
    let thumbnail = if c.flag()? { Some(get_net(c)?) } else { None };
    let n = c.u16()? as usize;
    let mut residual_blocks = BTreeMap::new();
    for _ in 0..n {
        let id = c.u8()? as u32;
        let net = get_net(c)?;
        if residual_blocks.insert(id, net).is_some() {
            return Err(c.bad(format!("block {id} stored twice")));
        }
    }
    let n = c.u16()? as usize;
    let mut unmet_blocks = Vec::with_capacity(n.min(c.remaining()));
    for _ in 0..n {
        unmet_blocks.push(c.u8()? as u32);
    }
    let m = MimArtifact {
        thumbnail,
        scale,
        block_grid: grid,
        residual_blocks,
        unmet_blocks,
        target_rmse,
    };
    m.validate(shape).map_err(|e| c.bad(e.to_string()))?;
    for net in m.nets() {
        if net.widths()[net.widths().len() - 1] != 1 {
            return Err(c.bad("pyramid network must have one output"));
        }
    }
    Ok(m)
}

fn get_node(c: &mut Cur, bounds: Bounds, depth: usize, max_depth: usize) -> R<OctreeNode> {
    let tag = c.u8()?;
    let state = match tag {
        0 => NodeState::Passed { unmet: c.flag()? },
        1 => {
            let unmet = c.flag()?;
            NodeState::Fitted {
                net: checked_block_net(c)?,
                unmet,
            }
        }
        2 => {
            if depth >= max_depth {
                return Err(c.bad(format!("node at depth {depth} cannot have children (max {max_depth})")));
            }
            let net = if c.flag()? { Some(checked_block_net(c)?) } else { None };
            let thresholds = get_thresholds(c)?;
            let sparse = if c.flag()? {
                let len = c.u64()?;
                if len > c.remaining() as u64 {
                    return Err(c.short());
                }
                get_sparse(c, bounds.shape(), len as usize)?
            } else {
                SparseHighBand::empty(bounds.shape())
            };
            let mut children = Vec::with_capacity(8);
            for child in octree_split(&bounds) {
                children.push(get_node(c, child, depth + 1, max_depth)?);
            }
            NodeState::Redecomposed {
                net,
                thresholds,
                sparse,
                children,
            }
        }
        t => return Err(c.bad(format!("octree state tag {t}"))),
    };
    Ok(OctreeNode { bounds, depth, state })
}

fn checked_block_net(c: &mut Cur) -> R<SirenNetwork> {
    let net = get_net(c)?;
    if net.widths()[0] != 4 || net.widths()[net.widths().len() - 1] != 1 {
        return Err(c.bad("block network must map 4 coordinates to 1 value"));
    }
    Ok(net)
}

fn get_octree(c: &mut Cur, shape: Shape) -> R<IdmArtifact> {
    let max_depth = c.u8()? as usize;
    if max_depth > MAX_OCTREE_DEPTH {
        return Err(c.bad(format!("octree depth {max_depth} exceeds {MAX_OCTREE_DEPTH}")));
    }
    let step_budget = c.u32()? as usize;
    let target_rmse = c.f64()?;
    // the root sits one level above the first blocks
    let root = get_node(c, Bounds::full(shape), 0, max_depth.max(1))?;
    if !matches!(root.state, NodeState::Redecomposed { .. }) {
        return Err(c.bad("octree root must be split"));
    }
    Ok(IdmArtifact {
        root,
        target_rmse,
        step_budget,
        max_depth,
    })
}

fn get_norm(c: &mut Cur) -> R<(NormalizationParams, ClimatologyRemoval)> {
    let v_min = c.finite()?;
    let v_max = c.finite()?;
    if v_max < v_min {
        return Err(c.bad("normalization range is inverted"));
    }
    let climatology_id = if c.flag()? { Some(c.str()?) } else { None };
    let removal = match c.u8()? {
        0 => ClimatologyRemoval::ScalarMean(c.finite()?),
        1 => ClimatologyRemoval::Reference { epoch_label: c.str()? },
        t => return Err(c.bad(format!("climatology tag {t}"))),
    };
    Ok((
        NormalizationParams {
            v_min,
            v_max,
            climatology_id,
        },
        removal,
    ))
}

/// One framed section as found in the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionInfo {
    pub kind: SectionKind,
    pub frame: u32,
    /// Offset of the kind byte.
    pub offset: usize,
    pub payload_len: usize,
    /// Role byte for net sections.
    pub role: Option<u8>,
}

impl SectionInfo {
    /// Bytes including framing and checksum.
    pub fn total_len(&self) -> usize {
        SECTION_OVERHEAD + self.payload_len
    }
}

/// kind + frame + len + crc
pub const SECTION_OVERHEAD: usize = 1 + 4 + 8 + 4;

struct Scan<'a> {
    bytes: &'a [u8],
    header: &'a [u8],
    header_offset: usize,
    sections: Vec<(SectionInfo, &'a [u8])>,
}

/// Verifies framing and every checksum, returning the sections in order.
fn scan(bytes: &[u8]) -> R<Scan<'_>> {
    if bytes.is_empty() {
        return Err(ArchiveError::Empty);
    }
    let mut c = Cur::new(bytes, 0, "preamble", false);
    let magic = c.take(4.min(bytes.len())).map_err(|_| ArchiveError::BadMagic)?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion { found: version });
    }
    c.section = "header".into();
    let hlen = c.u32()? as usize;
    let header_offset = c.offset();
    let header = c.take(hlen)?;
    let crc_offset = c.offset();
    let crc = c.u32()?;
    if crc != crc32fast::hash(header) {
        return Err(ArchiveError::Checksum {
            section: "header".into(),
            offset: crc_offset,
        });
    }
    let mut sections = Vec::new();
    while c.remaining() > 0 {
        let start = c.offset();
        c.section = format!("section #{}", sections.len());
        let kind_byte = c.u8()?;
        let kind = SectionKind::from_u8(kind_byte);
        if let Some(k) = kind {
            c.section = format!("{} section #{}", k.name(), sections.len());
        }
        let frame = c.u32()?;
        let len = c.u64()?;
        if len > c.remaining() as u64 {
            return Err(ArchiveError::Truncated {
                section: c.section.clone(),
                offset: c.offset(),
            });
        }
        let payload_offset = c.offset();
        let payload = c.take(len as usize)?;
        let crc_offset = c.offset();
        let crc = c.u32()?;
        if crc != crc32fast::hash(&bytes[start..crc_offset]) {
            return Err(ArchiveError::Checksum {
                section: c.section.clone(),
                offset: crc_offset,
            });
        }
        let kind = kind.ok_or_else(|| ArchiveError::Malformed {
            section: c.section.clone(),
            offset: start,
            reason: format!("unknown section kind {kind_byte}"),
        })?;
        let role = if kind == SectionKind::Net { payload.first().copied() } else { None };
        let _ = payload_offset;
        sections.push((
            SectionInfo {
                kind,
                frame,
                offset: start,
                payload_len: len as usize,
                role,
            },
            payload,
        ));
        if kind == SectionKind::ChainMap {
            break;
        }
    }
    if c.remaining() > 0 {
        return Err(ArchiveError::TrailingBytes {
            offset: c.offset(),
            count: c.remaining(),
        });
    }
    Ok(Scan {
        bytes,
        header,
        header_offset,
        sections,
    })
}

/// Bytes before the first section (magic, version, header and its checksum).
pub fn preamble_len(bytes: &[u8]) -> R<usize> {
    let s = scan(bytes)?;
    Ok(s.header_offset + s.header.len() + 4)
}

/// Section table of a verified archive.
pub fn inspect(bytes: &[u8]) -> R<Vec<SectionInfo>> {
    Ok(scan(bytes)?.sections.into_iter().map(|(i, _)| i).collect())
}

/// Parses and fully validates an archive.
pub fn deserialize(bytes: &[u8]) -> R<(TemporalChain, ArchiveMeta)> {
    let s = scan(bytes)?;
    let mut h = Cur::new(s.header, s.header_offset, "header", true);
    let mut shape = [0usize; 3];
    for v in shape.iter_mut() {
        *v = h.u32()? as usize;
    }
    if shape.contains(&0) {
        return Err(h.bad("zero extent"));
    }
    if shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).is_none_or(|n| n as u64 > (1u64 << 34)) {
        return Err(h.bad("grid is implausibly large"));
    }
    let n_frames = h.u32()? as usize;
    let variable_name = h.str()?;
    let units = h.str()?;
    let thresholds = get_thresholds(&mut h)?;
    let redecomp = get_thresholds(&mut h)?;
    let config_echo = h.str()?;
    h.done()?;
    if n_frames == 0 {
        return Err(h.bad("archive holds no frames"));
    }

    let mut it = s.sections.iter().peekable();
    let mut frames = Vec::new();
    let mut recorded = Vec::new();
    let missing = |what: &str, t: usize| ArchiveError::Malformed {
        section: what.to_string(),
        offset: s.bytes.len(),
        reason: format!("frame {t} is missing its {what} section"),
    };
    for t in 0..n_frames {
        let mut expect = |kind: SectionKind| -> R<Cur> {
            let (info, payload) = it.next().ok_or_else(|| missing(kind.name(), t))?;
            let c = Cur::new(payload, info.offset + SECTION_OVERHEAD - 4, format!("{} section of frame {t}", kind.name()), true);
            if info.kind != kind || info.frame as usize != t {
                return Err(c.bad(format!(
                    "expected {} of frame {t}, found {} of frame {}",
                    kind.name(),
                    info.kind.name(),
                    info.frame
                )));
            }
            Ok(c)
        };
        let mut m = expect(SectionKind::FrameMeta)?;
        let kind = m.u8()?;
        let rmse = m.f64()?;
        let (norm, removal) = get_norm(&mut m)?;
        let global_high = m.flag()?;
        let mid_tag = if kind == FRAME_FULL { Some(m.u8()?) } else { None };
        m.done()?;
        if t == 0 && kind != FRAME_FULL {
            return Err(m.bad("the first frame must be coded in full"));
        }

        let high = if global_high {
            let mut c = expect(SectionKind::Net)?;
            if c.u8()? != NET_HIGH {
                return Err(c.bad("expected the high-band network"));
            }
            let n = checked_block_net(&mut c)?;
            c.done()?;
            HighPath::Global(n)
        } else {
            let mut c = expect(SectionKind::Sparse)?;
            let len = csr_len_for(shape, c.remaining());
            let sp = get_sparse(&mut c, shape, len)?;
            c.done()?;
            HighPath::Sparse(sp)
        };

        let frame = match kind {
            FRAME_FULL => {
                let mut c = expect(SectionKind::Pyramid)?;
                let low = get_mim(&mut c, shape)?;
                c.done()?;
                if low.thumbnail.is_none() {
                    return Err(c.bad("a full frame needs a low-band thumbnail network"));
                }
                let mid = match mid_tag {
                    Some(0) => {
                        let mut c = expect(SectionKind::Octree)?;
                        let o = get_octree(&mut c, shape)?;
                        c.done()?;
                        MidPath::Octree(o)
                    }
                    Some(1) => MidPath::Global(None),
                    Some(2) => {
                        let mut c = expect(SectionKind::Net)?;
                        if c.u8()? != NET_MID {
                            return Err(c.bad("expected the mid-band network"));
                        }
                        let n = checked_block_net(&mut c)?;
                        c.done()?;
                        MidPath::Global(Some(n))
                    }
                    other => return Err(m.bad(format!("mid path tag {other:?}"))),
                };
                ChainFrame::Full(FrameArtifact {
                    norm,
                    removal,
                    high,
                    low,
                    mid,
                })
            }
            FRAME_DELTA => {
                let mut c = expect(SectionKind::Net)?;
                if c.u8()? != NET_TRC_LOW {
                    return Err(c.bad("expected the warm-started low network"));
                }
                let low_net = checked_block_net(&mut c)?;
                c.done()?;
                let mut c = expect(SectionKind::ResidualPyramid)?;
                let mid_residual = get_mim(&mut c, shape)?;
                c.done()?;
                ChainFrame::Delta(TrcFrameArtifact {
                    norm,
                    removal,
                    high,
                    low_net,
                    mid_residual,
                })
            }
            k => return Err(m.bad(format!("frame kind {k}"))),
        };
        frames.push(frame);
        recorded.push(rmse);
    }

    let (info, payload) = it.next().ok_or_else(|| missing("chain-map", n_frames))?;
    let mut c = Cur::new(payload, info.offset + SECTION_OVERHEAD - 4, "chain-map section", true);
    if info.kind != SectionKind::ChainMap {
        return Err(c.bad(format!("expected chain-map, found {}", info.kind.name())));
    }
    if c.u32()? as usize != n_frames {
        return Err(c.bad("frame count disagrees with the header"));
    }
    let bitmap = c.take(n_frames.div_ceil(8))?;
    c.done()?;
    let mut markers = BTreeSet::new();
    for t in 0..n_frames.div_ceil(8) * 8 {
        if bitmap[t / 8] & (1 << (t % 8)) != 0 {
            if t >= n_frames {
                return Err(c.bad("retrain marker past the last frame"));
            }
            markers.insert(t);
        }
    }
    let chain = TemporalChain {
        shape,
        frames,
        retrain_markers: markers,
        recorded_rmse: recorded,
    };
    chain.validate().map_err(|e| ArchiveError::Malformed {
        section: "chain-map section".into(),
        offset: info.offset,
        reason: e.to_string(),
    })?;
    Ok((
        chain,
        ArchiveMeta {
            variable_name,
            units,
            thresholds,
            redecomp,
            config_echo,
        },
    ))
}

/// `(frames * voxels * 4) / archive_len`.
pub fn compression_ratio(archive_len: usize, shape: Shape, n_frames: usize) -> Result<f64, ArchiveError> {
    if archive_len == 0 {
        return Err(ArchiveError::Empty);
    }
    let raw = n_frames as f64 * crate::field::voxel_count(shape) as f64 * 4.0;
    Ok(raw / archive_len as f64)
}

/// Which codec module a section's bytes are charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Module {
    Meta,
    Ssm,
    Mim,
    Idm,
    Trc,
}

impl Module {
    pub fn name(self) -> &'static str {
        match self {
            Module::Meta => "meta",
            Module::Ssm => "ssm",
            Module::Mim => "mim",
            Module::Idm => "idm",
            Module::Trc => "trc",
        }
    }
}

/// Bytes per module; the values sum to the archive length.
pub fn module_bytes(bytes: &[u8]) -> R<BTreeMap<Module, usize>> {
    let s = scan(bytes)?;
    let mut out = BTreeMap::new();
    *out.entry(Module::Meta).or_insert(0) += s.header_offset + s.header.len() + 4;
    for (info, _) in &s.sections {
        let m = match (info.kind, info.role) {
            (SectionKind::FrameMeta | SectionKind::ChainMap, _) => Module::Meta,
            (SectionKind::Sparse, _) => Module::Ssm,
            (SectionKind::Pyramid, _) => Module::Mim,
            (SectionKind::Octree, _) => Module::Idm,
            (SectionKind::ResidualPyramid, _) => Module::Trc,
            (SectionKind::Net, Some(NET_HIGH)) => Module::Ssm,
            (SectionKind::Net, Some(NET_MID)) => Module::Idm,
            (SectionKind::Net, _) => Module::Trc,
        };
        *out.entry(m).or_insert(0) += info.total_len();
    }
    Ok(out)
}
