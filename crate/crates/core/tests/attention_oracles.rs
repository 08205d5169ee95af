mod common;

use common::*;
use mvtrack::attention::{attentional_sampling, attentional_splatting, track_transformer, TrackFeatures};
use mvtrack::grid::{FeatureGrid, GridCoord};
use mvtrack::matcher::mvfuse;
use mvtrack::rng;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng as _;

const TOL: f64 = 1e-6;

#[test]
fn sampling_matches_loop_oracle() {
    for seed in 0..30 {
        let c = attention_case(seed);
        let got = attentional_sampling(&c.grid, &c.coords, &c.params).unwrap();
        let want = oracle_sampling(&c.grid, &c.coords, &c.params);
        assert!(max_abs_diff(&flatten(&got), &want.concat()) < TOL, "seed {seed}");
    }
}

#[test]
fn transformer_matches_loop_oracle() {
    for seed in 0..30 {
        let c = attention_case(seed);
        let feats = TrackFeatures::new(c.views.clone(), c.vis.clone()).unwrap();
        let got = track_transformer(&feats, &c.params).unwrap();
        let want = oracle_transformer(&c.views.iter().map(rows).collect::<Vec<_>>(), &c.vis, &c.params);
        for v in 0..c.views.len() {
            assert!(max_abs_diff(&flatten(got.view(v)), &want[v].concat()) < TOL, "seed {seed} view {v}");
        }
    }
}

#[test]
fn splatting_matches_loop_oracle() {
    for seed in 0..30 {
        let c = attention_case(seed);
        let mask: Vec<bool> = c.vis.iter().map(|m| m[0]).collect();
        let got = attentional_splatting(&c.grid, &c.views[0], &c.coords, &mask, &c.params).unwrap();
        let want = oracle_splatting(&c.grid, &rows(&c.views[0]), &c.coords, &mask, &c.params);
        assert!(max_abs_diff(got.data(), &want) < TOL, "seed {seed}");
    }
}

#[test]
fn mvfuse_matches_loop_oracle() {
    for seed in 0..25 {
        let mut r = rng::seeded(1000 + seed);
        let (h, w, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=5));
        let nv = r.random_range(1..=5);
        let hidden: Vec<FeatureGrid> = (0..nv).map(|_| random_grid(&mut r, h, w, d, 1)).collect();
        let blocks = r.random_range(1..=2);
        let params = random_fuse_params(&mut r, d, blocks);
        let got = mvfuse(&hidden, &params).unwrap();
        let want = oracle_mvfuse(&hidden, &params);
        for v in 0..nv {
            assert!(max_abs_diff(got[v].data(), &want[v]) < TOL, "seed {seed} view {v}");
        }
    }
}

#[test]
fn mvfuse_three_views_on_a_tiny_grid() {
    let mut r = rng::seeded(77);
    let hidden: Vec<FeatureGrid> = (0..3).map(|_| random_grid(&mut r, 2, 2, 3, 1)).collect();
    let params = random_fuse_params(&mut r, 3, 1);
    let got = mvfuse(&hidden, &params).unwrap();
    let want = oracle_mvfuse(&hidden, &params);
    for v in 0..3 {
        assert!(max_abs_diff(got[v].data(), &want[v]) < TOL);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    // a constant channel with identity value projections reads out the
    // attention row sum
    for seed in 0..20 {
        let c = attention_case(seed);
        let d = c.params.dim();
        let mut p = c.params.clone();
        p.w_value = DMatrix::identity(d, d);
        p.w_out = DMatrix::identity(d, d);
        p.t_value = DMatrix::identity(d, d);
        p.t_out = DMatrix::identity(d, d);
        let grid = FeatureGrid::from_fn(c.grid.height(), c.grid.width(), d, c.grid.stride(), |y, x, out| {
            out.copy_from_slice(c.grid.pixel(y, x));
            out[0] = 1.0;
        })
        .unwrap();
        let sampled = attentional_sampling(&grid, &c.coords, &p).unwrap();
        for i in 0..sampled.nrows() {
            assert!((sampled[(i, 0)] - 1.0).abs() < TOL);
        }
        let mut views = c.views.clone();
        views.iter_mut().for_each(|m| m.column_mut(0).fill(1.0));
        let out = track_transformer(&TrackFeatures::new(views.clone(), c.vis.clone()).unwrap(), &p).unwrap();
        for (t, m) in c.vis.iter().enumerate() {
            for (v, &vis) in m.iter().enumerate() {
                if vis {
                    assert!((out.view(v)[(t, 0)] - 2.0).abs() < TOL);
                }
            }
        }
        let mask = vec![true; views[0].nrows()];
        let zero = FeatureGrid::zeros(grid.height(), grid.width(), d, grid.stride());
        let splat = attentional_splatting(&zero, &views[0], &c.coords, &mask, &p).unwrap();
        for px in splat.data().chunks(d) {
            assert!((px[0] - 1.0).abs() < TOL);
        }
    }
}

#[test]
fn zero_output_projection_makes_splatting_the_identity() {
    for seed in 0..20 {
        let c = attention_case(seed);
        let mut p = c.params.clone();
        p.w_out = DMatrix::zeros(p.dim(), p.dim());
        let mask = vec![true; c.coords.len()];
        let out = attentional_splatting(&c.grid, &c.views[0], &c.coords, &mask, &p).unwrap();
        assert_eq!(out, c.grid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn transformer_is_view_permutation_equivariant(seed in 0u64..10_000, perm_seed in 0u64..1000) {
        let c = attention_case(seed);
        let nv = c.views.len();
        let mut perm: Vec<usize> = (0..nv).collect();
        let mut r = rng::seeded(perm_seed);
        for i in (1..nv).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let base = track_transformer(&TrackFeatures::new(c.views.clone(), c.vis.clone()).unwrap(), &c.params).unwrap();
        let views: Vec<_> = perm.iter().map(|&v| c.views[v].clone()).collect();
        let vis: Vec<Vec<bool>> = c.vis.iter().map(|m| perm.iter().map(|&v| m[v]).collect()).collect();
        let permuted = track_transformer(&TrackFeatures::new(views, vis).unwrap(), &c.params).unwrap();
        for (k, &v) in perm.iter().enumerate() {
            prop_assert!(max_abs_diff(&flatten(permuted.view(k)), &flatten(base.view(v))) < TOL);
        }
    }

    #[test]
    fn invisible_entries_do_not_matter(seed in 0u64..10_000, noise in 1.0f64..1e3) {
        let c = attention_case(seed);
        let base = track_transformer(&TrackFeatures::new(c.views.clone(), c.vis.clone()).unwrap(), &c.params).unwrap();
        let mut views = c.views.clone();
        for (t, m) in c.vis.iter().enumerate() {
            for (v, &vis) in m.iter().enumerate() {
                if !vis {
                    views[v].row_mut(t).fill(noise);
                }
            }
        }
        let out = track_transformer(&TrackFeatures::new(views.clone(), c.vis.clone()).unwrap(), &c.params).unwrap();
        prop_assert_eq!(&out, &base);

        let mask: Vec<bool> = c.vis.iter().map(|m| m[0]).collect();
        let splat = attentional_splatting(&c.grid, &c.views[0], &c.coords, &mask, &c.params).unwrap();
        let mut coords = c.coords.clone();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                coords[i] = GridCoord::new(-noise, noise);
            }
        }
        let noisy = attentional_splatting(&c.grid, &views[0], &coords, &mask, &c.params).unwrap();
        prop_assert_eq!(noisy, splat);
    }

    #[test]
    fn mvfuse_is_view_permutation_equivariant(seed in 0u64..10_000) {
        let mut r = rng::seeded(seed);
        let (h, w, d, nv) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=4), r.random_range(2..=4));
        let hidden: Vec<FeatureGrid> = (0..nv).map(|_| random_grid(&mut r, h, w, d, 1)).collect();
        let params = random_fuse_params(&mut r, d, 1);
        let base = mvfuse(&hidden, &params).unwrap();
        let rev: Vec<FeatureGrid> = hidden.iter().rev().cloned().collect();
        let out = mvfuse(&rev, &params).unwrap();
        for v in 0..nv {
            prop_assert!(max_abs_diff(out[v].data(), base[nv - 1 - v].data()) < TOL);
        }
    }
}
