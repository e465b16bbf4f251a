//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A `Demo` holds one simulated acquisition. The page resamples it, runs the
//! unrolled reconstruction with an untrained (identity) denoiser so only the
//! data-consistency and graph terms act, and draws the frame-similarity graph.

use modl_storm::config::RunConfig;
use modl_storm::denoiser::{DenoiserConfig, DenoiserParams};
use modl_storm::eval::{build_dataset, sampling, snr_db, Dataset};
use modl_storm::forward::{apply_a, apply_a_star};
use modl_storm::manifold::{estimate_weights, ManifoldGraph};
use modl_storm::unrolled::{reconstruct, UnrollConfig, LAMBDA_FLOOR};
use modl_storm::DynamicSeries;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    cfg: RunConfig,
    data: Dataset<f64>,
    gridding: DynamicSeries<f64>,
    recon: Option<DynamicSeries<f64>>,
    scale: f64,
}

fn js(e: modl_storm::Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Demo {
    pub fn create(seed: u64, lines: usize, k: usize) -> modl_storm::Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.phantom.seed = seed;
        cfg.sampling.lines_per_frame = lines;
        cfg.graph.k = k;
        cfg.validate()?;
        let data = build_dataset::<f64>(&cfg, seed)?;
        let gridding = apply_a_star(&data.kspace)?;
        let scale = data.truth.data().iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-12);
        Ok(Self { cfg, data, gridding, recon: None, scale })
    }

    pub fn set_lines(&mut self, lines: usize) -> modl_storm::Result<f64> {
        let mut cfg = self.cfg.clone();
        cfg.sampling.lines_per_frame = lines;
        cfg.validate()?;
        let (pattern, _) = sampling(&cfg)?;
        self.data.kspace = apply_a(&self.data.truth, &pattern)?;
        self.gridding = apply_a_star(&self.data.kspace)?;
        self.recon = None;
        self.cfg = cfg;
        snr_db(&self.gridding, &self.data.truth)
    }

    pub fn set_neighbors(&mut self, k: usize) -> modl_storm::Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.graph.k = k;
        cfg.validate()?;
        self.data.graph = estimate_weights(&self.data.navigators, cfg.graph.bandwidth(), k)?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn run(&mut self, lambda1: f64, lambda2: f64, iterations: usize) -> modl_storm::Result<f64> {
        let net = DenoiserParams::<f64>::init(&DenoiserConfig::default())?;
        let cfg = UnrollConfig { iterations, lambda1: lambda1.max(LAMBDA_FLOOR), lambda2, ..Default::default() };
        let x = reconstruct(&self.data.kspace, &self.data.graph, &net, &cfg)?.into_final();
        let snr = snr_db(&x, &self.data.truth)?;
        self.recon = Some(x);
        Ok(snr)
    }

    pub fn graph(&self) -> &ManifoldGraph<f64> {
        &self.data.graph
    }

    fn series(&self, view: &str) -> Option<&DynamicSeries<f64>> {
        match view {
            "truth" => Some(&self.data.truth),
            "gridding" => Some(&self.gridding),
            "recon" => self.recon.as_ref(),
            _ => None,
        }
    }
}

fn gray(v: f64) -> [u8; 4] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g, 255]
}

/// Dark blue through yellow.
fn heat(v: f64) -> [u8; 4] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v.sqrt()) as u8, (220.0 * v) as u8, (90.0 * (1.0 - v) + 30.0) as u8, 255]
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lines: usize, k: usize) -> Result<Demo, JsError> {
        Self::create(seed as u64, lines, k).map_err(js)
    }

    pub fn nframes(&self) -> usize {
        self.data.truth.nframes()
    }

    pub fn height(&self) -> usize {
        self.data.truth.height()
    }

    pub fn width(&self) -> usize {
        self.data.truth.width()
    }

    /// Resamples with `lines` golden-angle lines per frame; returns the
    /// gridding SNR in dB.
    pub fn resample(&mut self, lines: usize) -> Result<f64, JsError> {
        self.set_lines(lines).map_err(js)
    }

    /// Rebuilds the graph with `k` neighbors per frame.
    pub fn regraph(&mut self, k: usize) -> Result<(), JsError> {
        self.set_neighbors(k).map_err(js)
    }

    /// Unrolled reconstruction; returns its SNR in dB.
    pub fn reconstruct(&mut self, lambda1: f64, lambda2: f64, iterations: usize) -> Result<f64, JsError> {
        self.run(lambda1, lambda2, iterations).map_err(js)
    }

    /// RGBA magnitude image of frame `t` for "truth", "gridding", "recon" or
    /// "mask".
    pub fn frame_pixels(&self, view: &str, t: usize) -> Vec<u8> {
        let t = t.min(self.nframes() - 1);
        if view == "mask" {
            return self.data.kspace.pattern().mask(t).iter().flat_map(|&m| gray(m as u8 as f64)).collect();
        }
        match self.series(view) {
            Some(x) => x.frame(t).iter().flat_map(|z| gray(z.norm() / self.scale)).collect(),
            None => vec![0; 4 * self.height() * self.width()],
        }
    }

    /// RGBA heatmap of the frame-similarity weights, `nframes` square.
    pub fn graph_pixels(&self) -> Vec<u8> {
        self.data.graph.weights().iter().flat_map(|&w| heat(w)).collect()
    }

    pub fn mean_degree(&self) -> f64 {
        let d = self.data.graph.degrees();
        d.iter().sum::<f64>() / d.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_prior_beats_gridding() {
        let mut d = Demo::create(3, 6, 10).unwrap();
        let grid = d.set_lines(6).unwrap();
        let storm = d.run(0.0, 0.05, 4).unwrap();
        assert!(storm > grid + 3.0, "gridding {grid}, storm {storm}");
        assert_eq!(d.frame_pixels("recon", 0).len(), 4 * 32 * 32);
    }

    #[test]
    fn views_have_frame_size() {
        let mut d = Demo::create(5, 6, 10).unwrap();
        for view in ["truth", "gridding", "mask", "recon"] {
            assert_eq!(d.frame_pixels(view, 99).len(), 4 * 32 * 32);
        }
        d.set_neighbors(4).unwrap();
        assert_eq!(d.graph_pixels().len(), 4 * 60 * 60);
        assert!(d.set_lines(0).is_err());
    }
}
