//! Weight-shared unrolled reconstruction, its reverse-mode gradient and the
//! lagged-Q training loop.
//!
//! One unrolled iteration maps `X_n` to
//!
//! ```text
//! Y_n     = D(X_n)
//! Q_n     = W X_n                       (or read from a frozen schedule)
//! X_{n+1} = [A^H A + l1 I + l2 D]^{-1} (A^H b + l1 Y_n + l2 Q_n)
//! ```
//!
//! starting from the zero-filled adjoint `X_0 = A^H b`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::denoiser::{denoise_backward, denoise_forward, DenoiseCache, DenoiserParams};
use crate::error::{Error, Result};
use crate::forward::{check_regularization, FourierOp, KSpaceData};
use crate::manifold::{compute_q, ManifoldGraph};
use crate::real::Real;
use crate::series::{inner_slices, Direction, DynamicSeries};

/// Smallest value a trained lambda may take, so the data-consistency solve
/// stays nonsingular.
pub const LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnrollConfig {
    /// Unrolled iterations N.
    pub iterations: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub train_lambda1: bool,
    pub train_lambda2: bool,
    pub outer_loops: usize,
    pub epochs_per_outer: usize,
    pub batch_frames: usize,
    /// Frames dropped from each end of a batch in the loss.
    pub loss_margin: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            lambda1: 0.05,
            lambda2: 0.05,
            train_lambda1: true,
            train_lambda2: true,
            outer_loops: 2,
            epochs_per_outer: 50,
            batch_frames: 15,
            loss_margin: 2,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl UnrollConfig {
    /// Eight iterations, four outer loops of 200 epochs on 17-frame batches.
    pub fn full_scale() -> Self {
        Self { iterations: 8, outer_loops: 4, epochs_per_outer: 200, batch_frames: 17, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("need at least one unrolled iteration"));
        }
        if self.batch_frames <= 2 * self.loss_margin {
            return Err(Error::invalid(format!(
                "batch of {} frames leaves nothing after a margin of {}",
                self.batch_frames, self.loss_margin
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("lambdas must be nonnegative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Contiguous, non-overlapping frame windows covering `nframes`. A short
    /// trailing window is kept only if it still has frames inside the margin.
    pub fn batches(&self, nframes: usize) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < nframes {
            let end = (start + self.batch_frames).min(nframes);
            if end - start > 2 * self.loss_margin {
                out.push(start..end);
            }
            start = end;
        }
        out
    }
}

/// Iterates `X_0 ..= X_N` of one unrolled pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub iterates: Vec<DynamicSeries<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn final_iterate(&self) -> &DynamicSeries<T> {
        self.iterates.last().expect("trajectory is never empty")
    }

    pub fn into_final(mut self) -> DynamicSeries<T> {
        self.iterates.pop().expect("trajectory is never empty")
    }
}

/// Frozen manifold terms `Q_0 .. Q_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct QSchedule<T> {
    qs: Vec<DynamicSeries<T>>,
}

impl<T: Real> QSchedule<T> {
    pub fn new(qs: Vec<DynamicSeries<T>>) -> Result<Self> {
        if let Some(first) = qs.first() {
            if qs.iter().any(|q| !q.same_shape(first)) {
                return Err(Error::shape("Q schedule entries differ in shape"));
            }
        }
        Ok(Self { qs })
    }

    /// `Q_n = W X_n` for the first `iterations` iterates of a trajectory.
    pub fn from_trajectory(traj: &Trajectory<T>, g: &ManifoldGraph<T>, iterations: usize) -> Result<Self> {
        let qs = traj.iterates.iter().take(iterations).map(|x| compute_q(x, g)).collect::<Result<Vec<_>>>()?;
        Self::new(qs)
    }

    pub fn len(&self) -> usize {
        self.qs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qs.is_empty()
    }

    pub fn get(&self, n: usize) -> Result<&DynamicSeries<T>> {
        self.qs.get(n).ok_or_else(|| Error::invalid(format!("Q schedule has no entry for iteration {n}")))
    }

    pub fn slice_frames(&self, range: Range<usize>) -> Result<Self> {
        let qs = self.qs.iter().map(|q| q.slice_frames(range.clone())).collect::<Result<Vec<_>>>()?;
        Ok(Self { qs })
    }
}

fn lambdas<T: Real>(cfg: &UnrollConfig) -> (T, T) {
    (T::of(cfg.lambda1), T::of(cfg.lambda2))
}

/// Full-dataset unrolled reconstruction with `Q_n = W X_n` at every step.
pub fn reconstruct<T: Real>(
    b: &KSpaceData<T>,
    g: &ManifoldGraph<T>,
    p: &DenoiserParams<T>,
    cfg: &UnrollConfig,
) -> Result<Trajectory<T>> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("need at least one unrolled iteration"));
    }
    if g.nframes() != b.nframes() {
        return Err(Error::shape(format!("graph has {} frames, k-space {}", g.nframes(), b.nframes())));
    }
    let (l1, l2) = lambdas::<T>(cfg);
    let op = FourierOp::new(b.pattern().height(), b.pattern().width());
    let mut iterates = vec![op.apply_a_star(b)?];
    for _ in 0..cfg.iterations {
        let x = iterates.last().expect("nonempty");
        let (y, _) = denoise_forward(x, p)?;
        let q = if l2 == T::zero() { x.zeros_like() } else { compute_q(x, g)? };
        let next = op.dc_solve(b, &y, &q, l1, l2, g.degrees())?;
        iterates.push(next);
    }
    Ok(Trajectory { iterates })
}

/// Forward pass over a batch with frozen `Q_n`.
pub struct FixedQPass<T> {
    pub trajectory: Trajectory<T>,
    /// Denoised series `Y_n` per iteration.
    pub denoised: Vec<DynamicSeries<T>>,
    pub caches: Vec<DenoiseCache<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn reconstruct_with_fixed_q<T: Real>(
    b: &KSpaceData<T>,
    qs: &QSchedule<T>,
    degrees: &[T],
    p: &DenoiserParams<T>,
    lambda1: T,
    lambda2: T,
    iterations: usize,
) -> Result<FixedQPass<T>> {
    if iterations == 0 {
        return Err(Error::invalid("need at least one unrolled iteration"));
    }
    let op = FourierOp::new(b.pattern().height(), b.pattern().width());
    let mut iterates = vec![op.apply_a_star(b)?];
    let mut denoised = Vec::with_capacity(iterations);
    let mut caches = Vec::with_capacity(iterations);
    for n in 0..iterations {
        let q = qs.get(n)?;
        let x = iterates.last().expect("nonempty");
        let (y, cache) = denoise_forward(x, p)?;
        let next = op.dc_solve(b, &y, q, lambda1, lambda2, degrees)?;
        iterates.push(next);
        denoised.push(y);
        caches.push(cache);
    }
    Ok(FixedQPass { trajectory: Trajectory { iterates }, denoised, caches })
}

/// Loss and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient<T> {
    pub loss: T,
    pub params: DenoiserParams<T>,
    pub lambda1: T,
    pub lambda2: T,
}

/// Mean squared error over frames `[margin, nframes - margin)`.
pub fn restricted_mse<T: Real>(x: &DynamicSeries<T>, target: &DynamicSeries<T>, margin: usize) -> Result<T> {
    x.ensure_same_shape(target, "loss target")?;
    let f = x.nframes();
    if f <= 2 * margin {
        return Err(Error::invalid(format!("{f} frames leave nothing after margin {margin}")));
    }
    let mut acc = T::zero();
    for t in margin..f - margin {
        acc = acc + x.frame(t).iter().zip(target.frame(t)).map(|(a, b)| (a - b).norm_sqr()).sum::<T>();
    }
    Ok(acc / T::of(((f - 2 * margin) * x.frame_len()) as f64))
}

/// Reverse-mode gradient of the restricted MSE through every unrolled
/// iteration, with `Q_n` held constant.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_gradient<T: Real>(
    b: &KSpaceData<T>,
    qs: &QSchedule<T>,
    degrees: &[T],
    target: &DynamicSeries<T>,
    p: &DenoiserParams<T>,
    lambda1: T,
    lambda2: T,
    iterations: usize,
    loss_margin: usize,
) -> Result<BatchGradient<T>> {
    check_regularization(lambda1, lambda2, degrees, b.nframes())?;
    let pass = reconstruct_with_fixed_q(b, qs, degrees, p, lambda1, lambda2, iterations)?;
    let xn = pass.trajectory.final_iterate();
    let loss = restricted_mse(xn, target, loss_margin)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", index: 0 });
    }

    let f = xn.nframes();
    let count = T::of(((f - 2 * loss_margin) * xn.frame_len()) as f64);
    let two = T::of(2.0);
    let mut grad = xn.zeros_like();
    for t in loss_margin..f - loss_margin {
        let (xf, tf) = (xn.frame(t), target.frame(t));
        for (i, gz) in grad.frame_mut(t).iter_mut().enumerate() {
            *gz = (xf[i] - tf[i]) * (two / count);
        }
    }

    let op = FourierOp::new(b.pattern().height(), b.pattern().width());
    let mut gp = p.zeros_like();
    let (mut gl1, mut gl2) = (T::zero(), T::zero());
    for n in (0..iterations).rev() {
        // h = F^H (F g / M): gradient w.r.t. l1 Y_n + l2 Q_n.
        let mut h = op.fft().apply(&grad, Direction::Forward);
        for t in 0..f {
            let shift = lambda1 + lambda2 * degrees[t];
            let mask = b.pattern().mask(t);
            for (i, z) in h.frame_mut(t).iter_mut().enumerate() {
                let m = if mask[i] { T::one() + shift } else { shift };
                *z = *z / m;
            }
        }
        op.fft().apply_inplace(&mut h, Direction::Inverse);

        let xnext = &pass.trajectory.iterates[n + 1];
        let (y, q) = (&pass.denoised[n], qs.get(n)?);
        for t in 0..f {
            let hf = h.frame(t);
            let hx = inner_slices(hf, xnext.frame(t)).re;
            gl1 = gl1 + inner_slices(hf, y.frame(t)).re - hx;
            gl2 = gl2 + inner_slices(hf, q.frame(t)).re - degrees[t] * hx;
        }

        let gy = h.scaled(lambda1);
        let (gpn, gx) = denoise_backward(p, &pass.caches[n], &gy)?;
        gp.accumulate(&gpn);
        grad = gx;
    }
    Ok(BatchGradient { loss, params: gp, lambda1: gl1, lambda2: gl2 })
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub outer: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: DenoiserParams<T>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub history: Vec<EpochRecord>,
}

pub fn train<T: Real>(
    b: &KSpaceData<T>,
    target: &DynamicSeries<T>,
    g: &ManifoldGraph<T>,
    cfg: &UnrollConfig,
    init: DenoiserParams<T>,
) -> Result<TrainOutcome<T>> {
    train_with_progress(b, target, g, cfg, init, |_| {})
}

/// Lagged training: each outer loop freezes `Q_n = W X_n` from a
/// full-dataset pass, then runs ADAM epochs over contiguous batches.
pub fn train_with_progress<T: Real>(
    b: &KSpaceData<T>,
    target: &DynamicSeries<T>,
    g: &ManifoldGraph<T>,
    cfg: &UnrollConfig,
    init: DenoiserParams<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let nframes = b.nframes();
    if nframes < cfg.batch_frames {
        return Err(Error::invalid(format!(
            "dataset of {nframes} frames is smaller than a batch of {}",
            cfg.batch_frames
        )));
    }
    if target.shape() != b.values().shape() {
        return Err(Error::shape("training target does not match k-space"));
    }
    if g.nframes() != nframes {
        return Err(Error::shape("graph frame count does not match k-space"));
    }

    let mut params = init;
    let (mut l1, mut l2) = (cfg.lambda1, cfg.lambda2);
    let nparams = params.param_count();
    let mut adam = AdamState::<T>::new(nparams + 2);
    let mut history = Vec::new();
    let batches = cfg.batches(nframes);
    let lr = T::of(cfg.lr);

    for outer in 0..cfg.outer_loops {
        if cfg.epochs_per_outer == 0 {
            break;
        }
        let step_cfg = UnrollConfig { lambda1: l1, lambda2: l2, ..cfg.clone() };
        let traj = reconstruct(b, g, &params, &step_cfg)?;
        let schedule = QSchedule::from_trajectory(&traj, g, cfg.iterations)?;
        drop(traj);

        let pieces = batches
            .iter()
            .map(|r| {
                Ok((
                    b.slice_frames(r.clone())?,
                    schedule.slice_frames(r.clone())?,
                    target.slice_frames(r.clone())?,
                    g.degrees()[r.clone()].to_vec(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        for epoch in 0..cfg.epochs_per_outer {
            let mut total = 0.0;
            for (bb, qq, tt, dd) in &pieces {
                let grad =
                    unrolled_gradient(bb, qq, dd, tt, &params, T::of(l1), T::of(l2), cfg.iterations, cfg.loss_margin)
                        .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { outer, epoch },
                        other => other,
                    })?;
                total += grad.loss.as_f64();

                let mut flat = params.to_flat();
                flat.push(T::of(l1));
                flat.push(T::of(l2));
                let mut gflat = grad.params.to_flat();
                gflat.push(if cfg.train_lambda1 { grad.lambda1 } else { T::zero() });
                gflat.push(if cfg.train_lambda2 { grad.lambda2 } else { T::zero() });
                adam.step(&mut flat, &gflat, lr).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { outer, epoch },
                    other => other,
                })?;
                params.set_flat(&flat[..nparams])?;
                if cfg.train_lambda1 {
                    l1 = flat[nparams].as_f64().max(LAMBDA_FLOOR);
                }
                if cfg.train_lambda2 {
                    l2 = flat[nparams + 1].as_f64().max(LAMBDA_FLOOR);
                }
            }
            let loss = total / pieces.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { outer, epoch });
            }
            let record = EpochRecord { outer, epoch, loss, lambda1: l1, lambda2: l2 };
            on_epoch(&record);
            history.push(record);
        }
    }
    Ok(TrainOutcome { params, lambda1: l1, lambda2: l2, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::forward::{apply_a, apply_a_star, golden_angle_pattern, SamplingPattern};
    use crate::testutil::{random_graph, random_kspace, random_series};

    fn small_cfg(n: usize) -> UnrollConfig {
        UnrollConfig {
            iterations: n,
            lambda1: 0.3,
            lambda2: 0.2,
            batch_frames: 5,
            loss_margin: 1,
            ..Default::default()
        }
    }

    #[test]
    fn unregularized_full_sampling_is_fixed_point() {
        let p = SamplingPattern::full(3, 8, 8);
        let x = random_series::<f64>(3, 8, 8, 1);
        let b = apply_a(&x, &p).unwrap();
        let g = random_graph(3, 2);
        let net = DenoiserParams::init(&DenoiserConfig::default()).unwrap();
        let cfg = UnrollConfig { lambda1: 0.0, lambda2: 0.0, ..small_cfg(3) };
        let traj = reconstruct(&b, &g, &net, &cfg).unwrap();
        let x0 = apply_a_star(&b).unwrap();
        for xi in &traj.iterates {
            assert!(xi.sub(&x0).norm() < 1e-12 * x0.norm());
        }
    }

    #[test]
    fn identity_denoiser_full_sampling_is_fixed_point() {
        let p = SamplingPattern::full(3, 8, 8);
        let b = apply_a(&random_series::<f64>(3, 8, 8, 4), &p).unwrap();
        let net = DenoiserParams::zeros(&DenoiserConfig::default()).unwrap();
        let cfg = UnrollConfig { lambda2: 0.0, ..small_cfg(2) };
        let traj = reconstruct(&b, &ManifoldGraph::empty(3), &net, &cfg).unwrap();
        let x0 = &traj.iterates[0];
        assert!(traj.iterates[1].sub(x0).norm() < 1e-12 * x0.norm());
    }

    #[test]
    fn fixed_schedule_reproduces_reconstruct() {
        let pat = golden_angle_pattern(5, 8, 8, 3, 0).unwrap();
        let b = random_kspace::<f64>(&pat, 3);
        let g = random_graph(5, 4);
        let mut net =
            DenoiserParams::<f64>::init(&DenoiserConfig { layers: 2, width: 3, ..Default::default() }).unwrap();
        net.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0));
        let cfg = small_cfg(3);
        let traj = reconstruct(&b, &g, &net, &cfg).unwrap();
        let qs = QSchedule::from_trajectory(&traj, &g, 3).unwrap();
        let pass = reconstruct_with_fixed_q(&b, &qs, g.degrees(), &net, 0.3, 0.2, 3).unwrap();
        for (a, c) in traj.iterates.iter().zip(&pass.trajectory.iterates) {
            assert!(a.sub(c).norm() <= 1e-12 * a.norm());
        }
        assert!(reconstruct_with_fixed_q(&b, &qs, g.degrees(), &net, 0.3, 0.2, 4).is_err());
    }

    #[test]
    fn zero_schedule_equals_empty_graph_with_degrees() {
        let pat = golden_angle_pattern(4, 8, 8, 2, 1).unwrap();
        let b = random_kspace::<f64>(&pat, 5);
        let net = DenoiserParams::<f64>::zeros(&DenoiserConfig::default()).unwrap();
        let d = [0.5, 1.0, 1.5, 2.0];
        let zero = b.values().zeros_like();
        let qs = QSchedule::new(vec![zero.clone(), zero]).unwrap();
        let pass = reconstruct_with_fixed_q(&b, &qs, &d, &net, 0.1, 0.4, 2).unwrap();

        // manual recursion with W = 0 but the given degrees
        let op = FourierOp::new(8, 8);
        let mut x = apply_a_star(&b).unwrap();
        for _ in 0..2 {
            x = op.dc_solve(&b, &x, &x.zeros_like(), 0.1, 0.4, &d).unwrap();
        }
        assert!(pass.trajectory.final_iterate().sub(&x).norm() < 1e-12 * x.norm());
    }

    #[test]
    fn output_is_affine_in_schedule() {
        // with an identity denoiser X_N = c + L(qs); check L(q1 + q2) = L(q1) + L(q2)
        let pat = golden_angle_pattern(4, 8, 8, 2, 2).unwrap();
        let b = random_kspace::<f64>(&pat, 6);
        let zero_b = KSpaceData::new(pat.clone(), b.values().zeros_like()).unwrap();
        let net = DenoiserParams::<f64>::zeros(&DenoiserConfig::default()).unwrap();
        let d = [1.0, 2.0, 0.5, 1.0];
        let mk = |s: u64| QSchedule::new(vec![random_series(4, 8, 8, s), random_series(4, 8, 8, s + 1)]).unwrap();
        let (q1, q2) = (mk(10), mk(20));
        let sum = QSchedule::new(vec![
            {
                let mut a = q1.get(0).unwrap().clone();
                a.axpy(1.0, q2.get(0).unwrap());
                a
            },
            {
                let mut a = q1.get(1).unwrap().clone();
                a.axpy(1.0, q2.get(1).unwrap());
                a
            },
        ])
        .unwrap();
        let run = |q: &QSchedule<f64>| {
            reconstruct_with_fixed_q(&zero_b, q, &d, &net, 0.2, 0.3, 2).unwrap().trajectory.into_final()
        };
        let mut lin = run(&q1);
        lin.axpy(1.0, &run(&q2));
        let direct = run(&sum);
        assert!(lin.sub(&direct).norm() < 1e-12 * direct.norm());
        let _ = b;
    }

    #[test]
    fn margin_restricts_loss() {
        let x = random_series::<f64>(5, 4, 4, 1);
        let t = random_series::<f64>(5, 4, 4, 2);
        let per_frame: Vec<f64> =
            (0..5).map(|f| x.frame(f).iter().zip(t.frame(f)).map(|(a, b)| (a - b).norm_sqr()).sum()).collect();
        let full = restricted_mse(&x, &t, 0).unwrap();
        let inner = restricted_mse(&x, &t, 1).unwrap();
        assert!((full * 80.0 - per_frame.iter().sum::<f64>()).abs() < 1e-12);
        assert!((full * 80.0 - inner * 48.0 - per_frame[0] - per_frame[4]).abs() < 1e-12);
    }

    #[test]
    fn lambda_two_zero_ignores_graph() {
        let pat = golden_angle_pattern(4, 8, 8, 2, 0).unwrap();
        let b = random_kspace::<f64>(&pat, 9);
        let net = DenoiserParams::<f64>::init(&DenoiserConfig { layers: 2, width: 3, ..Default::default() }).unwrap();
        let cfg = UnrollConfig { lambda2: 0.0, ..small_cfg(2) };
        let a = reconstruct(&b, &random_graph(4, 1), &net, &cfg).unwrap();
        let c = reconstruct(&b, &ManifoldGraph::empty(4), &net, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn batches_cover_frames() {
        let cfg = UnrollConfig { batch_frames: 15, loss_margin: 2, ..Default::default() };
        assert_eq!(cfg.batches(60), vec![0..15, 15..30, 30..45, 45..60]);
        assert_eq!(cfg.batches(15), vec![0..15]);
        assert_eq!(cfg.batches(34), vec![0..15, 15..30]);
        assert_eq!(cfg.batches(36), vec![0..15, 15..30, 30..36]);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let pat = golden_angle_pattern(5, 8, 8, 2, 0).unwrap();
        let b = random_kspace::<f64>(&pat, 1);
        let t = random_series::<f64>(5, 8, 8, 2);
        let init = DenoiserParams::<f64>::init(&DenoiserConfig::default()).unwrap();
        let cfg = UnrollConfig { outer_loops: 1, epochs_per_outer: 0, ..small_cfg(2) };
        let out = train(&b, &t, &random_graph(5, 3), &cfg, init.clone()).unwrap();
        assert_eq!(out.params, init);
        assert!(out.history.is_empty());
        assert_eq!((out.lambda1, out.lambda2), (0.3, 0.2));
    }
}
