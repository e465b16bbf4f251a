//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use modl_storm::denoiser::{DenoiserConfig, DenoiserParams};
use modl_storm::forward::{apply_a, golden_angle_pattern, KSpaceData, SamplingPattern};
use modl_storm::manifold::{compute_q, ManifoldGraph};
use modl_storm::unrolled::{reconstruct_with_fixed_q, restricted_mse, unrolled_gradient, QSchedule};
use modl_storm::DynamicSeries;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C = Complex<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_series(r: &mut ChaCha8Rng, f: usize, h: usize, w: usize) -> DynamicSeries<f64> {
    DynamicSeries::from_fn(f, h, w, |_, _, _| C::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).unwrap()
}

/// Symmetric graph with zero diagonal; each edge present with probability `p`.
pub fn random_graph(r: &mut ChaCha8Rng, n: usize, p: f64) -> ManifoldGraph<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if r.gen_bool(p) {
                let v = r.gen_range(0.0..=1.0);
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
    }
    ManifoldGraph::from_weights(n, w).unwrap()
}

/// Dense centered unitary 2D DFT: `out[k] = sum_x M[k][x] in[x]`, with
/// frequencies and positions measured from the center index.
pub fn dft_matrix(h: usize, w: usize) -> Vec<Vec<C>> {
    let n = h * w;
    let scale = 1.0 / (n as f64).sqrt();
    let mut m = vec![vec![C::new(0.0, 0.0); n]; n];
    for (k, row) in m.iter_mut().enumerate() {
        let (kr, kc) = ((k / w) as f64 - (h / 2) as f64, (k % w) as f64 - (w / 2) as f64);
        for (x, v) in row.iter_mut().enumerate() {
            let (xr, xc) = ((x / w) as f64 - (h / 2) as f64, (x % w) as f64 - (w / 2) as f64);
            let phase = -2.0 * PI * (kr * xr / h as f64 + kc * xc / w as f64);
            *v = C::from_polar(scale, phase);
        }
    }
    m
}

pub fn matvec(m: &[Vec<C>], x: &[C]) -> Vec<C> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<C>>, mut b: Vec<C>) -> Vec<C> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d.norm() > 1e-14, "singular dense system");
        for row in col + 1..n {
            let f = a[row][col] / d;
            if f == C::new(0.0, 0.0) {
                continue;
            }
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = vec![C::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let s: C = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn random_kspace(r: &mut ChaCha8Rng, p: &SamplingPattern) -> KSpaceData<f64> {
    let mut v = random_series(r, p.nframes(), p.height(), p.width());
    for (z, &m) in v.data_mut().iter_mut().zip(p.masks()) {
        if !m {
            *z = C::new(0.0, 0.0);
        }
    }
    KSpaceData::new(p.clone(), v).unwrap()
}

/// Frame-by-frame dense solve of
/// `(S^H S F-domain + l1 + l2 d) x = F^H S^H b + l1 y + l2 q` in image space.
pub fn dense_dc_solve(
    b: &KSpaceData<f64>,
    y: &DynamicSeries<f64>,
    q: &DynamicSeries<f64>,
    l1: f64,
    l2: f64,
    degrees: &[f64],
) -> DynamicSeries<f64> {
    let (f, h, w) = y.shape();
    let n = h * w;
    let fm = dft_matrix(h, w);
    let mut out = Vec::with_capacity(f * n);
    for t in 0..f {
        let mask = b.pattern().mask(t);
        // A = S F; A^H A = F^H S F
        let mut a = vec![vec![C::new(0.0, 0.0); n]; n];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..n).filter(|&k| mask[k]).map(|k| fm[k][i].conj() * fm[k][j]).sum();
            }
            row[i] += C::new(l1 + l2 * degrees[t], 0.0);
        }
        let bt = b.values().frame(t);
        let rhs: Vec<C> = (0..n)
            .map(|i| {
                let atb: C = (0..n).filter(|&k| mask[k]).map(|k| fm[k][i].conj() * bt[k]).sum();
                atb + y.frame(t)[i] * l1 + q.frame(t)[i] * l2
            })
            .collect();
        out.extend(solve(a, rhs));
    }
    DynamicSeries::new(f, h, w, out).unwrap()
}

pub fn laplacian_energy_by_pairs(x: &DynamicSeries<f64>, g: &ManifoldGraph<f64>) -> f64 {
    let n = g.nframes();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d: f64 = x.frame(i).iter().zip(x.frame(j)).map(|(a, b)| (a - b).norm_sqr()).sum();
            e += 0.5 * g.weight(i, j) * d;
        }
    }
    e
}

pub const MARGIN: usize = 1;
pub const STEP: f64 = 1e-5;

pub struct Instance {
    pub b: KSpaceData<f64>,
    pub qs: QSchedule<f64>,
    pub degrees: Vec<f64>,
    pub target: DynamicSeries<f64>,
    pub params: DenoiserParams<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub iterations: usize,
}

impl Instance {
    pub fn loss(&self, p: &DenoiserParams<f64>, l1: f64, l2: f64) -> f64 {
        let pass = reconstruct_with_fixed_q(&self.b, &self.qs, &self.degrees, p, l1, l2, self.iterations).unwrap();
        restricted_mse(pass.trajectory.final_iterate(), &self.target, MARGIN).unwrap()
    }

    pub fn relu_margin(&self, p: &DenoiserParams<f64>) -> f64 {
        let pass =
            reconstruct_with_fixed_q(&self.b, &self.qs, &self.degrees, p, self.lambda1, self.lambda2, self.iterations)
                .unwrap();
        pass.caches.iter().map(|c| c.relu_margin()).fold(f64::INFINITY, f64::min)
    }
}

/// 6x6 frames, 5 per batch, every layer randomized. Networks with a ReLU
/// input within `2e-4` of the kink are skipped: a central difference that
/// straddles a kink does not estimate a derivative.
pub fn instance(seed: u64, iterations: usize, normalization: bool) -> Instance {
    let mut r = rng(seed);
    let x = random_series(&mut r, 5, 6, 6);
    let target = random_series(&mut r, 5, 6, 6);
    let b = apply_a(&x, &golden_angle_pattern(5, 6, 6, 2, seed as usize).unwrap()).unwrap();
    let g = random_graph(&mut r, 5, 0.7);
    let qs = QSchedule::new((0..iterations).map(|_| compute_q(&random_series(&mut r, 5, 6, 6), &g).unwrap()).collect())
        .unwrap();
    let cfg = DenoiserConfig { layers: 3, width: 3, normalization, ..Default::default() };
    let mut inst = Instance {
        b,
        qs,
        degrees: g.degrees().to_vec(),
        target,
        params: DenoiserParams::zeros(&cfg).unwrap(),
        lambda1: r.gen_range(0.2..1.0),
        lambda2: r.gen_range(0.1..0.5),
        iterations,
    };
    for _ in 0..1000 {
        let mut p = DenoiserParams::<f64>::zeros(&cfg).unwrap();
        let flat: Vec<f64> = (0..p.param_count()).map(|_| r.gen_range(-0.3..0.3)).collect();
        p.set_flat(&flat).unwrap();
        if inst.relu_margin(&p) > 2e-4 {
            inst.params = p;
            return inst;
        }
    }
    panic!("no kink-free network found for seed {seed}");
}

/// Worst relative error over every network parameter and both lambdas.
pub fn check(inst: &Instance) -> f64 {
    let g = unrolled_gradient(
        &inst.b,
        &inst.qs,
        &inst.degrees,
        &inst.target,
        &inst.params,
        inst.lambda1,
        inst.lambda2,
        inst.iterations,
        MARGIN,
    )
    .unwrap();
    let base = inst.loss(&inst.params, inst.lambda1, inst.lambda2);
    assert!((g.loss - base).abs() <= 1e-14 * base);

    let mut analytic = g.params.to_flat();
    analytic.extend([g.lambda1, g.lambda2]);
    let flat = inst.params.to_flat();
    let n = flat.len();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..n + 2 {
        let eval = |delta: f64| {
            if i < n {
                let mut f = flat.clone();
                f[i] += delta;
                let mut p = inst.params.clone();
                p.set_flat(&f).unwrap();
                inst.loss(&p, inst.lambda1, inst.lambda2)
            } else if i == n {
                inst.loss(&inst.params, inst.lambda1 + delta, inst.lambda2)
            } else {
                inst.loss(&inst.params, inst.lambda1, inst.lambda2 + delta)
            }
        };
        let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        // entries below 1e-4 of the largest gradient are compared on that scale
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4 * scale);
        worst = worst.max(err);
    }
    worst
}
