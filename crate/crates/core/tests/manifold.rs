mod common;

use common::*;
use modl_storm::forward::NavigatorLines;
use modl_storm::inner;
use modl_storm::manifold::*;
use modl_storm::phantom::{generate_phantom, simulate_navigators, PhantomConfig};

#[test]
fn laplacian_energy_equals_pairwise_form() {
    let mut r = rng(1);
    for n in [2, 5, 12] {
        let g = random_graph(&mut r, n, 0.5);
        let x = random_series(&mut r, n, 4, 4);
        let lhs = storm_energy(&x, &g).unwrap();
        let rhs = laplacian_energy_by_pairs(&x, &g);
        assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }
}

#[test]
fn laplacian_rows_sum_to_zero_and_spectrum_is_nonnegative() {
    let mut r = rng(2);
    for trial in 0..50 {
        let n = 2 + trial % 15;
        let g = random_graph(&mut r, n, 0.4);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            let s: f64 = (0..n).map(|j| g.laplacian(i, j)).sum();
            assert!(s.abs() <= 1e-12);
            for j in 0..n {
                l[i * n + j] = g.laplacian(i, j);
            }
        }
        let eig = symmetric_eigenvalues(l, n);
        let top = eig.iter().copied().fold(0.0, f64::max);
        let low = eig.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(low >= -1e-10 * top.max(1.0), "trial {trial}: smallest eigenvalue {low}");
    }
}

#[test]
fn splitting_identity_with_equal_arguments() {
    let mut r = rng(3);
    let g = random_graph(&mut r, 8, 0.5);
    let x = random_series(&mut r, 8, 6, 6);
    let split = split_energy(&x, &x, &g).unwrap();
    let direct = 2.0 * laplacian_energy_by_pairs(&x, &g);
    assert!((split - direct).abs() <= 1e-10 * direct.max(1.0));

    // the split form is the graph energy of the stacked pair (X, Z)
    let z = random_series(&mut r, 8, 6, 6);
    let mut expected = 0.0;
    for i in 0..8 {
        expected += g.degrees()[i]
            * (x.frame(i).iter().map(|v| v.norm_sqr()).sum::<f64>()
                + z.frame(i).iter().map(|v| v.norm_sqr()).sum::<f64>());
    }
    let wz = compute_q(&z, &g).unwrap();
    expected -= 2.0 * inner(&x, &wz).unwrap().re;
    let split = split_energy(&x, &z, &g).unwrap();
    assert!((split - expected).abs() <= 1e-10 * expected.abs().max(1.0));
}

#[test]
fn q_is_weighted_frame_sum() {
    let mut r = rng(4);
    let g = random_graph(&mut r, 5, 0.7);
    let x = random_series(&mut r, 5, 4, 4);
    let q = compute_q(&x, &g).unwrap();
    for i in 0..5 {
        for p in 0..16 {
            let want: C = (0..5).map(|j| x.frame(j)[p] * g.weight(i, j)).sum();
            assert!((q.frame(i)[p] - want).norm() < 1e-12);
        }
    }
}

#[test]
fn strongest_neighbors_share_motion_phase() {
    let cfg = PhantomConfig::default();
    let (x, phases) = generate_phantom::<f64>(&cfg).unwrap();
    let nav = simulate_navigators(&x, &NavigatorLines::centered(cfg.height, cfg.width, 2).unwrap()).unwrap();
    let g = estimate_weights(&nav, Bandwidth::Auto, 10).unwrap();
    let n = cfg.nframes;
    let mut all: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| phases.distance(i, j))
        .collect();
    all.sort_by(f64::total_cmp);
    let median = all[all.len() / 2];
    for i in 0..n {
        let j = g.strongest_neighbor(i).unwrap();
        // brute-force phase matching: best achievable partner for frame i
        let best = (0..n).filter(|&k| k != i).map(|k| phases.distance(i, k)).fold(f64::INFINITY, f64::min);
        assert!(phases.distance(i, j) < median, "frame {i}: neighbor {j}");
        assert!(phases.distance(i, j) <= median / 2.0 + best, "frame {i}: neighbor {j} far from best {best}");
    }
}
