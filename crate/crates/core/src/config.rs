//! JSON run configuration covering every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::manifold::Bandwidth;
use crate::phantom::PhantomConfig;
use crate::real::Precision;
use crate::unrolled::UnrollConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Golden-angle lines per frame used for reconstruction.
    pub lines_per_frame: usize,
    /// Fixed navigator lines per frame used for the graph.
    pub navigators: usize,
    pub start_index: usize,
    /// Also drop golden-angle samples that land on navigator locations.
    pub strict_isolation: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { lines_per_frame: 6, navigators: 2, start_index: 0, strict_isolation: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Nearest neighbors kept per frame.
    pub k: usize,
    /// Kernel bandwidth; `null` picks the median neighbor distance.
    pub sigma: Option<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 10, sigma: None }
    }
}

impl GraphConfig {
    pub fn bandwidth(&self) -> Bandwidth {
        self.sigma.map_or(Bandwidth::Auto, Bandwidth::Fixed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Phantom seed used for training.
    pub train_seed: u64,
    /// Held-out phantom seed used for evaluation.
    pub test_seed: u64,
    /// Image row traced over time in the profile images; `null` picks the
    /// row through the heart.
    pub profile_row: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { train_seed: 11, test_seed: 23, profile_row: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Pretrained MoDL-STORM parameters; trained in-run when absent.
    pub storm_params: Option<PathBuf>,
    /// Pretrained CNN-only parameters; trained in-run when absent.
    pub cnn_params: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub phantom: PhantomConfig,
    pub sampling: SamplingConfig,
    pub graph: GraphConfig,
    pub denoiser: DenoiserConfig,
    pub unroll: UnrollConfig,
    pub compare: CompareConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            threads: 0,
            phantom: PhantomConfig::default(),
            sampling: SamplingConfig::default(),
            graph: GraphConfig::default(),
            denoiser: DenoiserConfig::default(),
            unroll: UnrollConfig::default(),
            compare: CompareConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved configuration with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.phantom.validate().map_err(wrap)?;
        self.denoiser.validate().map_err(wrap)?;
        self.unroll.validate().map_err(wrap)?;
        let s = &self.sampling;
        if s.lines_per_frame == 0 || s.lines_per_frame > self.phantom.height.max(self.phantom.width) {
            return Err(Error::Config(format!("lines_per_frame {} out of range", s.lines_per_frame)));
        }
        if s.navigators == 0 {
            return Err(Error::Config("at least one navigator line is needed for the graph".into()));
        }
        if self.graph.k == 0 || self.graph.k >= self.phantom.nframes {
            return Err(Error::Config(format!("graph k = {} must lie in 1..{}", self.graph.k, self.phantom.nframes)));
        }
        if let Some(s) = self.graph.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma {s} must be positive")));
            }
        }
        if self.compare.train_seed == self.compare.test_seed {
            return Err(Error::Config("train and test seeds must differ".into()));
        }
        if let Some(r) = self.compare.profile_row {
            if r >= self.phantom.height {
                return Err(Error::Config(format!("profile row {r} outside the frame")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"unroll": {"iterations": 2}, "graph": {"sigma": 0.5}}"#).unwrap();
        assert_eq!(cfg.unroll.iterations, 2);
        assert_eq!(cfg.unroll.lambda1, UnrollConfig::default().lambda1);
        assert_eq!(cfg.graph.bandwidth(), Bandwidth::Fixed(0.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"bogus": 1}"#, r#"{"phantom": {"heigth": 32}}"#, r#"{"unroll": {"lamda1": 0.1}}"#] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(err.category(), "usage", "{doc}");
        }
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"graph": {"k": 60}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampling": {"lines_per_frame": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"compare": {"train_seed": 3, "test_seed": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"precision": "f16"}"#).is_err());
    }
}
