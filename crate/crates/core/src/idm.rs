//! Octree refinement of what the low band and the sparse outliers leave
//! unexplained. Blocks already within tolerance are passed; the rest get a
//! network, and blocks the network cannot settle are re-decomposed into a
//! sparse outlier set plus eight children one level deeper.

use crate::config::{derive_seed, NetSpec};
use crate::error::{check_shape, HihaError, Result};
use crate::field::{Bounds, CoordinateTensor, GridField, Shape};
use crate::metrics::rmse_slices;
use crate::mim::{choose_precision, view};
use crate::par;
use crate::siren::{fit, SirenNetwork, TrainConfig};
use crate::spectral::{decompose, BandThresholds};
use crate::ssm::{densify, sparsify, SparseHighBand, SparsePolicy};

#[derive(Clone, Debug, PartialEq)]
pub enum NodeState {
    /// Nothing stored. `unmet` marks a block that failed with no useful fit.
    Passed { unmet: bool },
    Fitted { net: SirenNetwork, unmet: bool },
    Redecomposed {
        /// The block's own fit, kept when it reduced the error.
        net: Option<SirenNetwork>,
        thresholds: BandThresholds,
        sparse: SparseHighBand,
        children: Vec<OctreeNode>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OctreeNode {
    pub bounds: Bounds,
    pub depth: usize,
    pub state: NodeState,
}

impl OctreeNode {
    pub fn is_passed(&self) -> bool {
        matches!(self.state, NodeState::Passed { .. })
    }

    pub fn is_unmet(&self) -> bool {
        match &self.state {
            NodeState::Passed { unmet } | NodeState::Fitted { unmet, .. } => *unmet,
            NodeState::Redecomposed { children, .. } => children.iter().any(|c| c.is_unmet()),
        }
    }

    /// Preorder walk.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a OctreeNode)) {
        f(self);
        if let NodeState::Redecomposed { children, .. } = &self.state {
            for c in children {
                c.visit(f);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdmArtifact {
    /// Always redecomposed with an empty sparse set; its children are the
    /// first eight blocks.
    pub root: OctreeNode,
    pub target_rmse: f64,
    pub step_budget: usize,
    pub max_depth: usize,
}

impl IdmArtifact {
    pub fn net_count(&self) -> usize {
        let mut n = 0;
        self.root.visit(&mut |node| match &node.state {
            NodeState::Fitted { .. } | NodeState::Redecomposed { net: Some(_), .. } => n += 1,
            _ => {}
        });
        n
    }

    pub fn first_level(&self) -> &[OctreeNode] {
        match &self.root.state {
            NodeState::Redecomposed { children, .. } => children,
            _ => &[],
        }
    }

    pub fn has_unmet(&self) -> bool {
        self.root.is_unmet()
    }
}

/// Halves every axis at its midpoint, larger half first. Children are ordered
/// level-major: (level half, lat half, lon half). Extent-1 axes yield an
/// empty second half.
pub fn octree_split(b: &Bounds) -> Vec<Bounds> {
    let halves = |(lo, hi): (usize, usize)| {
        let mid = lo + (hi - lo).div_ceil(2);
        [(lo, mid), (mid, hi)]
    };
    let (l, t, f) = (halves(b.level), halves(b.lat), halves(b.lon));
    let mut out = Vec::with_capacity(8);
    for level in l {
        for lat in t {
            for lon in f {
                out.push(Bounds { level, lat, lon });
            }
        }
    }
    out
}

/// `inner` expressed relative to the corner of `outer`.
fn relative(inner: &Bounds, outer: &Bounds) -> Bounds {
    Bounds {
        level: (inner.level.0 - outer.level.0, inner.level.1 - outer.level.0),
        lat: (inner.lat.0 - outer.lat.0, inner.lat.1 - outer.lat.0),
        lon: (inner.lon.0 - outer.lon.0, inner.lon.1 - outer.lon.0),
    }
}

#[derive(Clone, Debug)]
pub struct IdmOptions {
    pub block: NetSpec,
    /// Adam steps per block fit.
    pub budget: usize,
    pub max_depth: usize,
    pub redecomp: BandThresholds,
    pub sparse: SparsePolicy,
    pub lr_init: f64,
    pub fit_margin: f64,
    pub seed: u64,
    pub quant16: bool,
}

impl IdmOptions {
    pub fn new(block: NetSpec) -> Self {
        Self {
            block,
            budget: block.max_steps,
            max_depth: 3,
            redecomp: BandThresholds::redecomposition(),
            sparse: SparsePolicy::default(),
            lr_init: 1e-4,
            fit_margin: 0.9,
            seed: 0,
            quant16: false,
        }
    }
}

struct Ctx<'a> {
    coords: &'a CoordinateTensor,
    eps: f64,
    opts: &'a IdmOptions,
}

fn block_rms(f: &GridField) -> f64 {
    let zero = vec![0.0f32; f.len()];
    rmse_slices(f.as_slice(), &zero)
}

impl Ctx<'_> {
    fn node(&self, bounds: Bounds, depth: usize, residual: GridField, path: Vec<u64>) -> Result<OctreeNode> {
        let leaf = |state| Ok(OctreeNode { bounds, depth, state });
        if bounds.is_empty() {
            return leaf(NodeState::Passed { unmet: false });
        }
        let before = block_rms(&residual);
        if before <= self.eps {
            return leaf(NodeState::Passed { unmet: false });
        }

        let bc = self.coords.subset(&bounds);
        let mut net = None;
        let mut after = before;
        if self.opts.budget > 0 {
            let cfg = TrainConfig {
                max_steps: self.opts.budget,
                lr_init: self.opts.lr_init,
                target_rmse: self.eps * self.opts.fit_margin,
                seed: derive_seed(self.opts.seed, 3, &path),
                ..TrainConfig::default()
            };
            let (fitted, _) = fit(bc.data().view(), view(&residual), &self.opts.block.widths(), self.opts.block.omega, &cfg)?;
            let (fitted, e) = choose_precision(fitted, self.opts.quant16, self.eps, |n| {
                rmse_slices(n.forward(bc.data().view()).as_slice().unwrap(), residual.as_slice())
            });
            if e < before {
                net = Some(fitted);
                after = e;
            }
        }
        if after <= self.eps {
            let net = net.expect("a block only drops below its starting error through a fit");
            return leaf(NodeState::Fitted { net, unmet: false });
        }
        if depth >= self.opts.max_depth {
            return leaf(match net {
                Some(net) => NodeState::Fitted { net, unmet: true },
                None => NodeState::Passed { unmet: true },
            });
        }

        let mut rem = residual;
        if let Some(n) = &net {
            rem = rem.sub(&n.predict_field(&bc, bounds.shape()))?;
        }
        let bands = decompose(&rem, &self.opts.redecomp)?;
        let sparse = sparsify(&bands.high, self.opts.sparse)?;
        let rem = rem.sub(&densify(&sparse)?)?;
        let jobs: Vec<(usize, Bounds)> = octree_split(&bounds).into_iter().enumerate().collect();
        let children = par::map(jobs, |(i, child)| {
            let mut p = path.clone();
            p.push(i as u64);
            self.node(child, depth + 1, rem.extract(&relative(&child, &bounds)), p)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        leaf(NodeState::Redecomposed {
            net,
            thresholds: self.opts.redecomp,
            sparse,
            children,
        })
    }
}

/// Builds the octree over `full_target - context_recon`, the part of the
/// frame the low-band pyramid and the sparse outliers leave unexplained. When
/// the context is exact this is the mid band itself.
pub fn compress_mid(
    mid: &GridField,
    context_recon: &GridField,
    full_target: &GridField,
    coords: &CoordinateTensor,
    eps: f64,
    opts: &IdmOptions,
) -> Result<IdmArtifact> {
    let shape = full_target.shape();
    check_shape(shape, mid.shape())?;
    check_shape(shape, context_recon.shape())?;
    check_shape(shape, coords.shape())?;
    if !(eps > 0.0) {
        return Err(HihaError::invalid("IDM tolerance must be positive"));
    }
    let residual = full_target.sub(context_recon)?;
    let ctx = Ctx { coords, eps, opts };
    let full = Bounds::full(shape);
    let jobs: Vec<(usize, Bounds)> = octree_split(&full).into_iter().enumerate().collect();
    let children = par::map(jobs, |(i, b)| ctx.node(b, 1, residual.extract(&b), vec![i as u64]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(IdmArtifact {
        root: OctreeNode {
            bounds: full,
            depth: 0,
            state: NodeState::Redecomposed {
                net: None,
                thresholds: opts.redecomp,
                sparse: SparseHighBand::empty(shape),
                children,
            },
        },
        target_rmse: eps,
        step_budget: opts.budget,
        max_depth: opts.max_depth,
    })
}

/// Every stored contribution with the block it covers.
pub fn contributions(artifact: &IdmArtifact, coords: &CoordinateTensor) -> Result<Vec<(Bounds, GridField)>> {
    let mut out = Vec::new();
    let mut err = None;
    artifact.root.visit(&mut |node| {
        let b = node.bounds;
        let net = match &node.state {
            NodeState::Fitted { net, .. } => Some(net),
            NodeState::Redecomposed { net, sparse, .. } => {
                if sparse.nnz() > 0 {
                    match densify(sparse) {
                        Ok(d) if d.shape() == b.shape() => out.push((b, d)),
                        Ok(_) => err = Some(HihaError::invalid("inner sparse shape does not match its block")),
                        Err(e) => err = Some(e),
                    }
                }
                net.as_ref()
            }
            NodeState::Passed { .. } => None,
        };
        if let Some(net) = net {
            out.push((b, net.predict_field(&coords.subset(&b), b.shape())));
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Sum of all fitted predictions and inner sparse sets on their blocks.
pub fn reconstruct_mid(artifact: &IdmArtifact, coords: &CoordinateTensor) -> Result<GridField> {
    let shape: Shape = coords.shape();
    if artifact.root.bounds != Bounds::full(shape) {
        return Err(HihaError::invalid("octree root does not cover the coordinate grid"));
    }
    let mut out = GridField::zeros(shape);
    for (b, patch) in contributions(artifact, coords)? {
        out.add_patch(&b, &patch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_coordinates;

    #[test]
    fn split_partitions_with_larger_half_first() {
        let b = Bounds {
            level: (0, 5),
            lat: (2, 4),
            lon: (0, 1),
        };
        let kids = octree_split(&b);
        assert_eq!(kids.len(), 8);
        assert_eq!(kids[0].level, (0, 3));
        assert_eq!(kids[0].lat, (2, 3));
        assert_eq!(kids[1].lon, (1, 1));
        let total: usize = kids.iter().map(|k| k.voxel_count()).sum();
        assert_eq!(total, b.voxel_count());
    }

    fn opts(budget: usize) -> IdmOptions {
        let mut o = IdmOptions::new(NetSpec::new(1, 8, 22.0, budget));
        o.budget = budget;
        o.max_depth = 2;
        o
    }

    #[test]
    fn all_passed_when_context_is_exact() {
        let shape = [2, 8, 8];
        let coords = build_coordinates(shape).unwrap();
        let target = GridField::constant(shape, 0.25);
        let a = compress_mid(&GridField::zeros(shape), &target, &target, &coords, 1e-3, &opts(50)).unwrap();
        assert!(a.first_level().iter().all(|c| c.is_passed()));
        assert_eq!(a.net_count(), 0);
        assert_eq!(reconstruct_mid(&a, &coords).unwrap(), GridField::zeros(shape));
    }

    #[test]
    fn zero_budget_redecomposes_to_max_depth() {
        let shape = [2, 8, 8];
        let coords = build_coordinates(shape).unwrap();
        let v: Vec<f32> = (0..128).map(|i| ((i * 37) % 11) as f32 * 0.01).collect();
        let target = GridField::from_vec(shape, v).unwrap();
        let a = compress_mid(&target, &GridField::zeros(shape), &target, &coords, 1e-6, &opts(0)).unwrap();
        assert_eq!(a.net_count(), 0);
        assert!(a.has_unmet());
        let mut deepest = 0;
        a.root.visit(&mut |n| {
            if !n.bounds.is_empty() && n.is_unmet() && matches!(n.state, NodeState::Passed { .. }) {
                deepest = deepest.max(n.depth);
            }
        });
        assert_eq!(deepest, 2);
    }
}
