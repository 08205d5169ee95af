use mvtrack::groups::*;
use mvtrack::rng;
use mvtrack::scene::SceneOracle;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng as _;

fn random_overlap(m: usize, seed: u64) -> OverlapMatrix {
    let mut r = rng::seeded(seed);
    let mut v = DMatrix::from_fn(m, m, |_, _| if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..1.0) });
    for i in 0..m {
        v[(i, i)] = 1.0;
    }
    OverlapMatrix::new(v, OverlapMode::Visibility).unwrap()
}

/// Exhaustive greedy: at every step score every remaining image and take
/// the first maximum.
fn oracle_group(source: usize, o: &OverlapMatrix, counts: &DMatrix<usize>, p: &SelectionParams) -> Vec<usize> {
    let m = o.len();
    let mut targets: Vec<usize> = Vec::new();
    while targets.len() < p.k {
        let scores: Vec<(usize, f64)> = (0..m)
            .filter(|j| *j != source && !targets.contains(j))
            .map(|j| {
                let coh: f64 = targets.iter().map(|&k| o.get(k, j)).sum();
                (
                    j,
                    (p.alpha_src * o.get(source, j) + p.alpha_tgt * coh)
                        / (1.0 + p.lambda * counts[(source, j)] as f64),
                )
            })
            .collect();
        let best = scores.iter().map(|s| s.1).fold(0.0, f64::max);
        if best <= 0.0 {
            break;
        }
        targets.push(scores.iter().find(|s| s.1 == best).unwrap().0);
    }
    targets
}

#[test]
fn greedy_matches_exhaustive_enumeration() {
    for seed in 0..20 {
        let o = random_overlap(5, seed);
        let mut usage = PairUsage::new(5);
        let mut counts = DMatrix::zeros(5, 5);
        let p = SelectionParams { k: 3, alpha_tgt: 0.8, ..Default::default() };
        for step in 0..6 {
            let source = step % 5;
            let want = oracle_group(source, &o, &counts, &p);
            let got = build_group(source, &o, &mut usage, &p).unwrap();
            assert_eq!(got.group.targets(), &want[..], "seed {seed} step {step}");
            for &j in &want {
                counts[(source, j)] += 1;
            }
        }
    }
}

#[test]
fn coherence_term_flips_the_pick() {
    // image 1 overlaps the source slightly more, image 2 overlaps the
    // already chosen target 3 strongly
    let mut v = DMatrix::zeros(5, 5);
    v[(0, 3)] = 0.9;
    v[(0, 1)] = 0.5;
    v[(0, 2)] = 0.45;
    v[(3, 2)] = 0.9;
    let o = OverlapMatrix::new(v, OverlapMode::Visibility).unwrap();
    let pick = |alpha_tgt| {
        let p = SelectionParams { k: 2, alpha_tgt, lambda: 0.0, ..Default::default() };
        build_group(0, &o, &mut PairUsage::new(5), &p).unwrap().group.targets().to_vec()
    };
    assert_eq!(pick(0.0), vec![3, 1]);
    assert_eq!(pick(0.25), vec![3, 2]);
}

#[test]
fn ten_scenes_satisfy_the_contract() {
    for seed in 0..10u64 {
        let m = 8 + (seed as usize * 24) / 9;
        let o = random_overlap(m, 50 + seed);
        for budget in [Budget::Full, Budget::Half] {
            let cfg = GroupSamplerConfig { budget, ..Default::default() };
            let plan = sample_groups(&o, &cfg).unwrap();
            let adj = plan.usage.adjacency();
            assert_eq!(adj, adj.transpose(), "seed {seed}");
            assert_eq!(plan.quotas.iter().sum::<usize>(), budget.groups(m));
            assert!(plan.quotas.iter().all(|&q| q >= 1));
            assert_eq!(plan.stage1.len(), budget.groups(m));
            for i in 0..m {
                assert!(plan.groups().any(|g| g.source() == i));
            }
        }
    }
}

#[test]
fn stage_two_adds_no_unlinked_pair() {
    for seed in 0..10 {
        let o = random_overlap(12, 300 + seed);
        let cfg = GroupSamplerConfig::default();
        let plan = sample_groups(&o, &cfg).unwrap();
        let mut after1 = PairUsage::new(12);
        for g in &plan.stage1 {
            for &t in g.targets() {
                after1.record(g.source(), t);
            }
        }
        for g in &plan.stage2 {
            for &t in g.targets() {
                assert!(after1.linked(g.source(), t), "seed {seed}: new pair {}->{t}", g.source());
            }
        }
    }
}

#[test]
fn shuffled_order_keeps_the_contract() {
    let o = random_overlap(10, 9);
    let cfg = GroupSamplerConfig { order: SourceOrder::Shuffled(4), ..Default::default() };
    let plan = sample_groups(&o, &cfg).unwrap();
    assert_eq!(plan, sample_groups(&o, &cfg).unwrap());
    let adj = plan.usage.adjacency();
    assert_eq!(adj, adj.transpose());
}

#[test]
fn planar_scene_overlap_is_consistent() {
    let scene = SceneOracle::random_planar(4, 32, 32, 3).unwrap();
    let mut warps = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                warps.push(scene.gt_warp(a, b).unwrap());
            }
        }
    }
    let o = overlap_from_matches(4, &warps, 0.3).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            assert!((0.0..=1.0).contains(&o.get(a, b)));
        }
    }
}

proptest! {
    #[test]
    fn quotas_sum_floor_and_monotone(counts in prop::collection::vec(0usize..40, 1..30), extra in 0usize..60, beta in 0.05f64..0.95) {
        let budget = counts.len() + extra;
        let q = quotas_from_counts(&counts, beta, budget).unwrap();
        prop_assert_eq!(q.iter().sum::<usize>(), budget);
        prop_assert!(q.iter().all(|&g| g >= 1));
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(q[i] <= q[j], "{:?} -> {:?}", counts, q);
                }
            }
        }
    }

    #[test]
    fn plans_are_deterministic_and_symmetric(m in 2usize..16, seed in 0u64..1000) {
        let o = random_overlap(m, seed);
        let cfg = GroupSamplerConfig::default();
        let plan = sample_groups(&o, &cfg).unwrap();
        prop_assert_eq!(&plan, &sample_groups(&o, &cfg).unwrap());
        let adj = plan.usage.adjacency();
        prop_assert_eq!(adj.clone(), adj.transpose());
        prop_assert!(plan.stage1.len() <= cfg.budget.groups(m));
    }
}
