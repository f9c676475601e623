use quadmask_core::quadtree::PointQuadtree;
use quadmask_core::synth::{generate_sample, SynthConfig};
use quadmask_core::{BinaryMask, IncoherencePyramid, ProbMap};

fn mask(size: usize, on: &[(usize, usize)]) -> BinaryMask {
    let mut m = BinaryMask::zeros(size, size);
    for &(r, c) in on {
        m.set(r, c, true);
    }
    m
}

/// Three-level tree over a 2x2 coarse map:
/// root A at L1 (0,0); its child B at L2 (0,1) is incoherent; B's child
/// C at L3 (1,2) is incoherent. B's other children and A's other children
/// are coherent leaves.
fn hand_tree() -> PointQuadtree {
    let det = IncoherencePyramid::new(vec![mask(2, &[(0, 0)]), mask(4, &[(0, 1)]), mask(8, &[(1, 2)])]).unwrap();
    PointQuadtree::build(&det).unwrap()
}

#[test]
fn hand_propagation_matches_leaf_inheritance() {
    let mut t = hand_tree();
    assert_eq!(t.len(), 1 + 4 + 4);
    let (va, vb, vc) = (0.7f32, 0.05f32, 0.95f32);
    t.set_value(t.find(1, 0, 0).unwrap(), va);
    t.set_value(t.find(2, 0, 1).unwrap(), vb);
    t.set_value(t.find(3, 1, 2).unwrap(), vc);
    let coarse = ProbMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let out = t.propagate_prob(&coarse, 8).unwrap();

    #[rustfmt::skip]
    let expect: [[f32; 8]; 8] = [
        [va, va, vb, vb, 0.2, 0.2, 0.2, 0.2],
        [va, va, vc, vb, 0.2, 0.2, 0.2, 0.2],
        [va, va, va, va, 0.2, 0.2, 0.2, 0.2],
        [va, va, va, va, 0.2, 0.2, 0.2, 0.2],
        [0.3, 0.3, 0.3, 0.3, 0.4, 0.4, 0.4, 0.4],
        [0.3, 0.3, 0.3, 0.3, 0.4, 0.4, 0.4, 0.4],
        [0.3, 0.3, 0.3, 0.3, 0.4, 0.4, 0.4, 0.4],
        [0.3, 0.3, 0.3, 0.3, 0.4, 0.4, 0.4, 0.4],
    ];
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(out.get(r, c), expect[r][c], "({r}, {c})");
        }
    }

    // Finest-only keeps the coarse value under A and B and writes only C.
    let fin = t.finest_only_propagate_prob(&coarse, 8).unwrap();
    assert_eq!(fin.get(1, 2), vc);
    assert_eq!(fin.get(0, 2), 0.1);
    assert_eq!(fin.get(2, 0), 0.1);
}

#[test]
fn no_nodes_gives_upsampled_coarse() {
    let det = IncoherencePyramid::new(vec![BinaryMask::zeros(2, 2), BinaryMask::zeros(4, 4), BinaryMask::zeros(8, 8)])
        .unwrap();
    let t = PointQuadtree::build(&det).unwrap();
    let coarse = ProbMap::new(2, 2, vec![0.9, 0.2, 0.6, 0.4]).unwrap();
    let expect = coarse.upsample_by(4).threshold(0.5);
    assert_eq!(t.propagate(&coarse, 8).unwrap(), expect);
    assert_eq!(t.finest_only_propagate(&coarse, 8).unwrap(), expect);
}

#[test]
fn l1_only_tree_ignores_refinements_in_finest_only_mode() {
    let det = IncoherencePyramid::new(vec![mask(2, &[(1, 1)]), BinaryMask::zeros(4, 4), BinaryMask::zeros(8, 8)])
        .unwrap();
    let mut t = PointQuadtree::build(&det).unwrap();
    t.set_value(0, 1.0);
    let coarse = ProbMap::filled(2, 2, 0.0);
    assert_eq!(t.finest_only_propagate(&coarse, 8).unwrap(), BinaryMask::zeros(8, 8));
    assert_eq!(t.propagate(&coarse, 8).unwrap().count_ones(), 16);
}

#[test]
fn oracle_fill_reproduces_gt_on_synthetic_samples() {
    let cfg = SynthConfig {
        count: 8,
        ..SynthConfig::default()
    };
    for i in 0..cfg.count {
        let s = generate_sample(i, &cfg, 77).unwrap();
        let det = IncoherencePyramid::from_ground_truth(&s.gt, 3).unwrap().close_upward();
        let mut t = PointQuadtree::build(&det).unwrap();
        t.fill_from_gt(&s.gt, true).unwrap();
        let coarse = s.gt.to_prob().avg_pool(8).unwrap();
        let out = t.propagate(&coarse, 112).unwrap();
        assert_eq!(out, s.gt.downsample_nn(), "sample {i}");

        // Full propagation touches a superset of the finest-only footprint.
        let full = t.footprint(112, &[1, 2, 3]);
        let fin = t.footprint(112, &[3]);
        assert!(fin.is_subset_of(&full));
        assert!(t.sparsity_ratio() < 0.1);
    }
}
