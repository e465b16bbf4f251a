//! Reconstruction metrics and the gridding / CNN-only / MoDL-STORM comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::config::RunConfig;
use crate::container::{write_atomic, Container};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::forward::{apply_a, apply_a_star, golden_angle_pattern, KSpaceData, NavigatorLines, SamplingPattern};
use crate::manifold::{estimate_weights, ManifoldGraph, NavigatorSignals};
use crate::phantom::{generate_phantom, simulate_navigators, PhantomConfig, PhaseRecord};
use crate::real::Real;
use crate::series::DynamicSeries;
use crate::unrolled::{reconstruct, train_with_progress, EpochRecord, UnrollConfig};

/// `20 log10(|ref| / |x - ref|)` over all frames; `+inf` when `x == ref`.
pub fn snr_db<T: Real>(x: &DynamicSeries<T>, reference: &DynamicSeries<T>) -> Result<f64> {
    x.ensure_same_shape(reference, "snr reference")?;
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (a, r) in x.data().iter().zip(reference.data()) {
        let (ar, ai) = (a.re.as_f64(), a.im.as_f64());
        let (rr, ri) = (r.re.as_f64(), r.im.as_f64());
        sig += rr * rr + ri * ri;
        err += (ar - rr).powi(2) + (ai - ri).powi(2);
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (sig / err).log10())
}

/// Reconstruction masks and navigator lines for a run.
pub fn sampling(cfg: &RunConfig) -> Result<(SamplingPattern, NavigatorLines)> {
    let p = &cfg.phantom;
    let s = &cfg.sampling;
    let nav = NavigatorLines::centered(p.height, p.width, s.navigators)?;
    let mut pattern = golden_angle_pattern(p.nframes, p.height, p.width, s.lines_per_frame, s.start_index)?;
    if s.strict_isolation {
        pattern = pattern.excluding(&nav)?;
    }
    Ok((pattern, nav))
}

/// A simulated acquisition with its ground truth.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub truth: DynamicSeries<T>,
    pub phases: PhaseRecord,
    pub kspace: KSpaceData<T>,
    pub navigators: NavigatorSignals<T>,
    pub graph: ManifoldGraph<T>,
}

/// Phantom, k-space, navigators and graph for the phantom seeded `seed`.
pub fn build_dataset<T: Real>(cfg: &RunConfig, seed: u64) -> Result<Dataset<T>> {
    let pcfg = PhantomConfig { seed, ..cfg.phantom.clone() };
    let (truth, phases) = generate_phantom::<T>(&pcfg)?;
    let (pattern, nav) = sampling(cfg)?;
    let kspace = apply_a(&truth, &pattern)?;
    let navigators = simulate_navigators(&truth, &nav)?;
    let graph = estimate_weights(&navigators, cfg.graph.bandwidth(), cfg.graph.k)?;
    Ok(Dataset { truth, phases, kspace, navigators, graph })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gridding,
    CnnOnly,
    ModlStorm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gridding, Method::CnnOnly, Method::ModlStorm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gridding => "gridding",
            Method::CnnOnly => "cnn-only",
            Method::ModlStorm => "modl-storm",
        }
    }
}

fn snr_json<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "+inf" } else { "-inf" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodScore {
    pub method: Method,
    #[serde(serialize_with = "snr_json")]
    pub snr_db: f64,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// Mean batch loss of the last training epoch.
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub nframes: usize,
    pub height: usize,
    pub width: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub lines_per_frame: usize,
    pub navigators: usize,
    pub iterations: usize,
    pub methods: Vec<MethodScore>,
}

impl CompareReport {
    pub fn score(&self, m: Method) -> Option<&MethodScore> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "held-out phantom seed {} ({}x{}x{}), trained on seed {}, {} lines + {} navigators per frame, N = {}",
            self.test_seed,
            self.nframes,
            self.height,
            self.width,
            self.train_seed,
            self.lines_per_frame,
            self.navigators,
            self.iterations
        );
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>10} {:>10} {:>12}",
            "method", "SNR (dB)", "lambda1", "lambda2", "train loss"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
        for s in &self.methods {
            let _ = writeln!(
                out,
                "{:<12} {:>9.2} {:>10} {:>10} {:>12}",
                s.method.name(),
                s.snr_db,
                opt(s.lambda1),
                opt(s.lambda2),
                opt(s.final_train_loss)
            );
        }
        out
    }
}

/// Trained network plus its regularization weights.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub params: DenoiserParams<T>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Empty when the model was loaded rather than trained.
    pub history: Vec<EpochRecord>,
}

impl<T: Real> TrainedModel<T> {
    fn load(path: &Path) -> Result<Self> {
        let (params, lambda1, lambda2) = Container::read_file(path)?.to_params()?;
        Ok(Self { params, lambda1, lambda2, history: Vec::new() })
    }

    fn unroll_config(&self, base: &UnrollConfig) -> UnrollConfig {
        UnrollConfig { lambda1: self.lambda1, lambda2: self.lambda2, ..base.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct Comparison<T> {
    pub report: CompareReport,
    pub truth: DynamicSeries<T>,
    pub gridding: DynamicSeries<T>,
    pub cnn_only: DynamicSeries<T>,
    pub modl_storm: DynamicSeries<T>,
    pub cnn_model: TrainedModel<T>,
    pub storm_model: TrainedModel<T>,
    pub profile_row: usize,
}

/// Unrolled settings of the CNN-only baseline: no graph term at all.
pub fn cnn_only_config(base: &UnrollConfig) -> UnrollConfig {
    UnrollConfig { lambda2: 0.0, train_lambda2: false, ..base.clone() }
}

/// Trains both networks on the training seed (unless pretrained parameters
/// are configured) and scores all methods on the held-out seed.
pub fn compare_baselines<T: Real>(
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(Method, &EpochRecord),
) -> Result<Comparison<T>> {
    cfg.validate()?;
    let cnn_cfg = cnn_only_config(&cfg.unroll);
    let need_training = cfg.paths.storm_params.is_none() || cfg.paths.cnn_params.is_none();
    let train = if need_training { Some(build_dataset::<T>(cfg, cfg.compare.train_seed)?) } else { None };
    let init = || DenoiserParams::<T>::init(&cfg.denoiser);

    let storm_model = match &cfg.paths.storm_params {
        Some(p) => TrainedModel::load(p)?,
        None => {
            let d = train.as_ref().expect("training data built");
            let out = train_with_progress(&d.kspace, &d.truth, &d.graph, &cfg.unroll, init()?, |r| {
                on_epoch(Method::ModlStorm, r)
            })?;
            TrainedModel { params: out.params, lambda1: out.lambda1, lambda2: out.lambda2, history: out.history }
        }
    };
    let cnn_model = match &cfg.paths.cnn_params {
        Some(p) => TrainedModel::load(p)?,
        None => {
            let d = train.as_ref().expect("training data built");
            let empty = ManifoldGraph::empty(d.truth.nframes());
            let out =
                train_with_progress(&d.kspace, &d.truth, &empty, &cnn_cfg, init()?, |r| on_epoch(Method::CnnOnly, r))?;
            TrainedModel { params: out.params, lambda1: out.lambda1, lambda2: out.lambda2, history: out.history }
        }
    };
    drop(train);

    let test = build_dataset::<T>(cfg, cfg.compare.test_seed)?;
    let gridding = apply_a_star(&test.kspace)?;
    let empty = ManifoldGraph::empty(test.truth.nframes());
    let cnn_only =
        reconstruct(&test.kspace, &empty, &cnn_model.params, &cnn_model.unroll_config(&cnn_cfg))?.into_final();
    let modl_storm =
        reconstruct(&test.kspace, &test.graph, &storm_model.params, &storm_model.unroll_config(&cfg.unroll))?
            .into_final();

    let final_loss = |m: &TrainedModel<T>| m.history.last().map(|r| r.loss);
    let methods = vec![
        MethodScore {
            method: Method::Gridding,
            snr_db: snr_db(&gridding, &test.truth)?,
            lambda1: None,
            lambda2: None,
            final_train_loss: None,
        },
        MethodScore {
            method: Method::CnnOnly,
            snr_db: snr_db(&cnn_only, &test.truth)?,
            lambda1: Some(cnn_model.lambda1),
            lambda2: Some(cnn_model.lambda2),
            final_train_loss: final_loss(&cnn_model),
        },
        MethodScore {
            method: Method::ModlStorm,
            snr_db: snr_db(&modl_storm, &test.truth)?,
            lambda1: Some(storm_model.lambda1),
            lambda2: Some(storm_model.lambda2),
            final_train_loss: final_loss(&storm_model),
        },
    ];
    let p = &cfg.phantom;
    let report = CompareReport {
        nframes: p.nframes,
        height: p.height,
        width: p.width,
        train_seed: cfg.compare.train_seed,
        test_seed: cfg.compare.test_seed,
        lines_per_frame: cfg.sampling.lines_per_frame,
        navigators: cfg.sampling.navigators,
        iterations: cfg.unroll.iterations,
        methods,
    };
    Ok(Comparison {
        report,
        truth: test.truth,
        gridding,
        cnn_only,
        modl_storm,
        cnn_model,
        storm_model,
        profile_row: cfg.compare.profile_row.unwrap_or_else(|| p.heart_row()),
    })
}

impl<T: Real> Comparison<T> {
    pub fn reconstruction(&self, m: Method) -> &DynamicSeries<T> {
        match m {
            Method::Gridding => &self.gridding,
            Method::CnnOnly => &self.cnn_only,
            Method::ModlStorm => &self.modl_storm,
        }
    }

    /// Report, reconstructions, trained models and temporal profiles.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("report.json"), self.report.to_json().as_bytes())?;
        write_atomic(&dir.join("report.txt"), self.report.to_text().as_bytes())?;
        Container::from_series(&self.truth).write_file(dir.join("truth.mdst"))?;
        let scale = temporal_profile(&self.truth, self.profile_row)?.into_iter().fold(0.0, f64::max);
        let truth_profile = profile_pgm(&self.truth, self.profile_row, scale)?;
        write_atomic(&dir.join("profile_truth.pgm"), &truth_profile)?;
        for m in Method::ALL {
            let x = self.reconstruction(m);
            Container::from_series(x).write_file(dir.join(format!("recon_{}.mdst", m.name())))?;
            write_atomic(&dir.join(format!("profile_{}.pgm", m.name())), &profile_pgm(x, self.profile_row, scale)?)?;
        }
        for (name, model) in [("cnn-only", &self.cnn_model), ("modl-storm", &self.storm_model)] {
            Container::from_params(&model.params, model.lambda1, model.lambda2)
                .write_file(dir.join(format!("params_{name}.mdst")))?;
            if !model.history.is_empty() {
                Container::from_history(&model.history).write_file(dir.join(format!("history_{name}.mdst")))?;
            }
        }
        Ok(())
    }
}

/// Magnitudes along image row `row` for every frame, laid out with one
/// image column per output row and one frame per output column.
pub fn temporal_profile<T: Real>(x: &DynamicSeries<T>, row: usize) -> Result<Vec<f64>> {
    let (f, h, w) = x.shape();
    if row >= h {
        return Err(Error::invalid(format!("profile row {row} outside {h} rows")));
    }
    let mut out = vec![0.0; w * f];
    for t in 0..f {
        for c in 0..w {
            out[c * f + t] = x.get(t, row, c).norm().as_f64();
        }
    }
    Ok(out)
}

/// Binary 8-bit PGM of a temporal profile; magnitudes at or above `scale`
/// saturate to white.
pub fn profile_pgm<T: Real>(x: &DynamicSeries<T>, row: usize, scale: f64) -> Result<Vec<u8>> {
    let values = temporal_profile(x, row)?;
    Ok(encode_pgm(x.nframes(), x.width(), &values, scale))
}

pub fn encode_pgm(width: usize, height: usize, values: &[f64], scale: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let s = if scale > 0.0 { 255.0 / scale } else { 0.0 };
    out.extend(values.iter().map(|v| (v * s).round().clamp(0.0, 255.0) as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_series;

    #[test]
    fn snr_of_tenth_error_is_twenty_db() {
        let r = random_series::<f64>(3, 4, 4, 1);
        let e = random_series::<f64>(3, 4, 4, 2);
        let e = e.scaled(r.norm() / (10.0 * e.norm()));
        let mut x = r.clone();
        x.axpy(1.0, &e);
        assert!((snr_db(&x, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn snr_of_zero_is_zero_db_and_exact_match_is_infinite() {
        let r = random_series::<f64>(2, 4, 4, 3);
        assert!(snr_db(&r.zeros_like(), &r).unwrap().abs() < 1e-12);
        assert_eq!(snr_db(&r, &r).unwrap(), f64::INFINITY);
    }

    #[test]
    fn infinite_snr_serializes_as_sentinel() {
        let s = MethodScore {
            method: Method::Gridding,
            snr_db: f64::INFINITY,
            lambda1: None,
            lambda2: None,
            final_train_loss: None,
        };
        assert!(serde_json::to_string(&s).unwrap().contains("\"+inf\""));
    }

    #[test]
    fn profile_layout_and_pgm_header() {
        let x = random_series::<f64>(5, 4, 6, 4);
        let p = temporal_profile(&x, 2).unwrap();
        assert_eq!(p[3 * 5 + 1], x.get(1, 2, 3).norm());
        let img = profile_pgm(&x, 2, 1.0).unwrap();
        let header = b"P5\n5 6\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 30);
        assert!(temporal_profile(&x, 4).is_err());
    }

    #[test]
    fn strict_isolation_leaves_only_dc_on_navigators() {
        let mut cfg = RunConfig::default();
        cfg.sampling.lines_per_frame = 1;
        cfg.sampling.strict_isolation = true;
        let (p, nav) = sampling(&cfg).unwrap();
        let navmask = nav.mask();
        for t in 0..p.nframes() {
            let shared: Vec<usize> = (0..navmask.len()).filter(|&i| navmask[i] && p.mask(t)[i]).collect();
            assert_eq!(shared, vec![p.dc_index()]);
        }
    }
}
