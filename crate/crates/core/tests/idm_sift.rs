//! The octree only spends effort where the per-block error says it must.

use hiha_core::config::NetSpec;
use hiha_core::field::{build_coordinates, GridField};
use hiha_core::idm::{compress_mid, octree_split, reconstruct_mid, IdmOptions, NodeState};
use hiha_core::metrics::rmse;

const SHAPE: [usize; 3] = [4, 16, 32];
const EPS: f64 = 1e-3;

/// Smooth, tiny everywhere; a rough oscillation confined to one octant.
fn rough_in_octant(octant: usize) -> GridField {
    let full = hiha_core::field::Bounds::full(SHAPE);
    let target = octree_split(&full)[octant];
    let mut data = Vec::with_capacity(SHAPE.iter().product());
    for l in 0..SHAPE[0] {
        for i in 0..SHAPE[1] {
            for j in 0..SHAPE[2] {
                let smooth = 1e-4 * ((i as f32) * 0.2).sin();
                let rough = if target.contains([l, i, j]) {
                    0.05 * ((i * 7 + j * 5 + l * 3) as f32).sin()
                } else {
                    0.0
                };
                data.push(smooth + rough);
            }
        }
    }
    GridField::from_vec(SHAPE, data).unwrap()
}

/// Blocks whose residual RMS exceeds the tolerance, computed directly.
fn oracle_needs_work(residual: &GridField) -> Vec<bool> {
    octree_split(&hiha_core::field::Bounds::full(SHAPE))
        .iter()
        .map(|b| {
            let block = residual.extract(b);
            let zero = GridField::zeros(block.shape());
            rmse(&block, &zero).unwrap() > EPS
        })
        .collect()
}

#[test]
fn exactly_one_block_of_eight_is_worked_on() {
    let coords = build_coordinates(SHAPE).unwrap();
    let mut opts = IdmOptions::new(NetSpec::new(1, 16, 22.0, 200));
    opts.max_depth = 2;
    opts.lr_init = 1e-3;
    for octant in [0, 5, 7] {
        let residual = rough_in_octant(octant);
        let oracle = oracle_needs_work(&residual);
        assert_eq!(oracle.iter().filter(|&&b| b).count(), 1);
        assert!(oracle[octant]);

        let zeros = GridField::zeros(SHAPE);
        let art = compress_mid(&residual, &zeros, &residual, &coords, EPS, &opts).unwrap();
        let first = art.first_level();
        assert_eq!(first.len(), 8);
        let worked: Vec<bool> = first
            .iter()
            .map(|n| matches!(n.state, NodeState::Fitted { .. } | NodeState::Redecomposed { .. }))
            .collect();
        assert_eq!(worked, oracle, "octant {octant}");
        assert_eq!(first.iter().filter(|n| n.is_passed()).count(), 7);

        // passed blocks contribute nothing to the reconstruction
        let recon = reconstruct_mid(&art, &coords).unwrap();
        for (b, node) in octree_split(&hiha_core::field::Bounds::full(SHAPE)).iter().zip(first) {
            if node.is_passed() {
                assert_eq!(recon.extract(b).max_abs(), 0.0);
            }
        }
    }
}

#[test]
fn field_within_tolerance_passes_everything() {
    let coords = build_coordinates(SHAPE).unwrap();
    let f = GridField::constant(SHAPE, 5e-4);
    let zeros = GridField::zeros(SHAPE);
    let art = compress_mid(&f, &zeros, &f, &coords, EPS, &IdmOptions::new(NetSpec::new(1, 8, 22.0, 10))).unwrap();
    assert!(art.first_level().iter().all(|n| n.is_passed()));
    assert_eq!(art.net_count(), 0);
    assert!(!art.has_unmet());
}
