mod common;

use common::*;
use mvtrack::grid::DenseWarpField;
use mvtrack::postprocess::*;
use mvtrack::rng;
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn selection_matches_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng::seeded(seed);
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let mut bank = PairMatchBank::new();
        let mut groups: Vec<usize> = (0..3).map(|_| r.random_range(0..10)).collect();
        groups.dedup();
        for &g in &groups {
            bank.push(g, random_warp(&mut r, h, w, 0, 1, 3.0)).unwrap();
        }
        let sel = select_matches(&bank).unwrap();
        let (t, c, g) = oracle_select(bank.candidates());
        assert_eq!(sel.warp.targets(), &t[..]);
        assert_eq!(sel.warp.confidence(), &c[..]);
        assert_eq!(sel.group, g);
    }
}

#[test]
fn reciprocity_matches_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng::seeded(100 + seed);
        let (h, w) = (r.random_range(2..=16), r.random_range(2..=16));
        let fwd = random_warp(&mut r, h, w, 0, 1, 4.0);
        let bwd = random_warp(&mut r, h, w, 1, 0, 4.0);
        for eps in [0.5, 1.0, 3.0, 6.0] {
            assert_eq!(reciprocity_filter(&fwd, &bwd, eps).unwrap(), oracle_reciprocity(&fwd, &bwd, eps));
        }
    }
}

#[test]
fn nms_matches_brute_force() {
    for seed in 0..30 {
        let mut r = rng::seeded(200 + seed);
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        // quantised scores produce ties, zeros exercise the positivity rule
        let scores: Vec<f64> = (0..h * w).map(|_| r.random_range(0..12) as f64 / 4.0).collect();
        let map = ScoreMap::from_scores(h, w, &scores).unwrap();
        for radius in 1..=3 {
            for cap in [None, Some(3)] {
                assert_eq!(nms_select(&map, radius, cap).unwrap(), oracle_nms(&scores, h, w, radius, cap));
            }
        }
    }
}

proptest! {
    #[test]
    fn selection_is_the_pointwise_max(seed in 0u64..10_000) {
        let mut r = rng::seeded(seed);
        let mut bank = PairMatchBank::new();
        for g in 0..r.random_range(1..5usize) {
            bank.push(g, random_warp(&mut r, 6, 7, 2, 3, 2.0)).unwrap();
        }
        let sel = select_matches(&bank).unwrap();
        for (_, w) in bank.candidates() {
            for (a, b) in sel.warp.confidence().iter().zip(w.confidence()) {
                prop_assert!(a >= b);
            }
        }
    }

    #[test]
    fn keep_set_shrinks_with_eps(seed in 0u64..10_000, e1 in 0.0f64..8.0, e2 in 0.0f64..8.0) {
        let mut r = rng::seeded(seed);
        let fwd = random_warp(&mut r, 8, 8, 0, 1, 4.0);
        let bwd = random_warp(&mut r, 8, 8, 1, 0, 4.0);
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let a = reciprocity_filter(&fwd, &bwd, lo).unwrap();
        let b = reciprocity_filter(&fwd, &bwd, hi).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| !x || *y));
    }

    #[test]
    fn nms_picks_are_separated_and_maximal(seed in 0u64..10_000, radius in 1usize..4) {
        let mut r = rng::seeded(seed);
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let scores: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..3.0)).collect();
        let map = ScoreMap::from_scores(h, w, &scores).unwrap();
        let picks = nms_select(&map, radius, None).unwrap();
        let near = |a: (usize, usize), b: (usize, usize)| a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= radius;
        for (i, &a) in picks.iter().enumerate() {
            for &b in &picks[i + 1..] {
                prop_assert!(!near(a, b));
            }
        }
        // every unpicked positive pixel is blocked by a pick scoring at least as high
        for i in 0..h * w {
            let p = (i / w, i % w);
            if scores[i] > 0.0 && !picks.contains(&p) {
                prop_assert!(picks.iter().any(|&q| near(p, q) && scores[q.0 * w + q.1] >= scores[i]));
            }
        }
    }

    #[test]
    fn score_is_bounded_and_zero_iff_empty(seed in 0u64..10_000, tau in 0.0f64..1.0) {
        let mut r = rng::seeded(seed);
        let nv = r.random_range(1..5usize);
        let conf: Vec<Vec<f64>> = (0..nv).map(|_| (0..20).map(|_| r.random_range(0.0..=1.0)).collect()).collect();
        let keep: Vec<Vec<bool>> = (0..nv).map(|_| (0..20).map(|_| r.random_bool(0.7)).collect()).collect();
        let ev: Vec<TargetEvidence> = conf.iter().zip(&keep).map(|(c, k)| TargetEvidence { confidence: c, keep: k }).collect();
        let map = build_score_map(4, 5, &ev, tau).unwrap();
        for i in 0..20 {
            let s = map.score(i);
            prop_assert!((0.0..=(nv + 1) as f64).contains(&s));
            prop_assert!(map.length()[i] <= nv);
            prop_assert_eq!(s == 0.0, map.length()[i] == 0);
        }
    }
}

#[test]
fn empty_bank_is_an_error() {
    assert!(select_matches(&PairMatchBank::new()).is_err());
    let w = DenseWarpField::identity(2, 2, 0, 1);
    let keep = [false; 4];
    assert!(assemble_tracks(&[(0, 0)], &[TargetMatches { warp: &w, keep: &keep }], 0.3).unwrap().is_empty());
}
