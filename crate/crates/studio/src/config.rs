//! Project configuration, stored as `config.toml` in every project directory.
//!
//! Every tunable of the pipeline is a named key with the library default, so
//! an empty file is a valid configuration:
//!
//! ```toml
//! version = 1
//!
//! [detect]
//! patch = 7
//! global_term = true
//! [detect.threshold]
//! beta = 1.5
//! histogram_bins = 256
//!
//! [segment]
//! classes = 2
//! [segment.train]
//! iterations = 10000
//!
//! [diffusion]
//! steps = 18
//! solver = "heun"
//!
//! [denoiser]
//! kind = "exemplar"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use texsynth::diffusion::{ExemplarConfig, ScheduleConfig, Solver, DEFAULT_GUIDANCE};
use texsynth::edit::{
    Background, DEFAULT_ALPHA, DEFAULT_FP_ITERS, INTERACTIVE_STEPS, TRANSFER_STEPS,
};
use texsynth::infinite::{PlanConfig, UniformizeConfig, DEFAULT_COARSE, DEFAULT_CUTOFF};
use texsynth::pipeline::{DetectConfig, SegmentConfig};

use crate::StudioError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudioConfig {
    pub version: u32,
    pub detect: DetectConfig,
    pub segment: SegmentConfig,
    pub diffusion: DiffusionSettings,
    pub edit: EditSettings,
    pub synthesis: SynthesisSettings,
    pub denoiser: DenoiserBinding,
}

impl Default for StudioConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            detect: DetectConfig::default(),
            segment: SegmentConfig::default(),
            diffusion: DiffusionSettings::default(),
            edit: EditSettings::default(),
            synthesis: SynthesisSettings::default(),
            denoiser: DenoiserBinding::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSettings {
    pub steps: usize,
    pub solver: Solver,
    pub guidance: f64,
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            steps: 18,
            solver: Solver::Heun,
            guidance: DEFAULT_GUIDANCE,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSettings {
    /// Inversion and interactive edit step count.
    pub steps: usize,
    pub transfer_steps: usize,
    pub alpha: f64,
    pub fp_iters: usize,
    pub guidance: f64,
    pub background: Background,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self {
            steps: INTERACTIVE_STEPS,
            transfer_steps: TRANSFER_STEPS,
            alpha: DEFAULT_ALPHA,
            fp_iters: DEFAULT_FP_ITERS,
            guidance: DEFAULT_GUIDANCE,
            background: Background::Replay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSettings {
    pub window: usize,
    pub overlap_min: usize,
    pub jitter: bool,
    /// Low-pass cutoff used by uniformization, in cycles per pixel.
    pub cutoff: f64,
    pub coarse: usize,
    /// Windows evaluated at once; 0 uses one per worker thread.
    pub concurrency: usize,
    pub channels: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        let plan = PlanConfig::default();
        Self {
            window: plan.window,
            overlap_min: plan.overlap_min,
            jitter: plan.jitter,
            cutoff: DEFAULT_CUTOFF,
            coarse: DEFAULT_COARSE,
            concurrency: 0,
            channels: 3,
        }
    }
}

impl SynthesisSettings {
    pub fn plan(&self) -> PlanConfig {
        PlanConfig {
            window: self.window,
            overlap_min: self.overlap_min,
            wrap: false,
            jitter: self.jitter,
        }
    }

    pub fn uniformize(&self) -> UniformizeConfig {
        UniformizeConfig {
            cutoff: self.cutoff,
            coarse: self.coarse,
            ..UniformizeConfig::default()
        }
    }
}

/// Which denoiser the project's diffusion stages use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserBinding {
    /// Closed-form Gaussian; `mean` holds one value per channel.
    Analytic { mean: Vec<f64>, std: f64 },
    /// Patch bank built from the project's images and label maps.
    Exemplar {
        #[serde(flatten)]
        config: ExemplarConfig,
    },
    /// External denoiser speaking the bridge protocol over TCP.
    Bridge {
        endpoint: String,
        #[serde(default = "default_connections")]
        connections: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_connections() -> usize {
    1
}

fn default_timeout() -> u64 {
    30
}

impl Default for DenoiserBinding {
    fn default() -> Self {
        DenoiserBinding::Analytic {
            mean: vec![0.5; 3],
            std: 0.2,
        }
    }
}

impl StudioConfig {
    pub fn from_toml(text: &str) -> Result<Self, StudioError> {
        let cfg: StudioConfig =
            toml::from_str(text).map_err(|e| StudioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self, StudioError> {
        let text = std::fs::read_to_string(path).map_err(|e| StudioError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), StudioError> {
        let bad = |m: String| Err(StudioError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.segment.classes == 0 || self.segment.classes > 255 {
            return bad(format!(
                "segment.classes must be in 1..=255, got {}",
                self.segment.classes
            ));
        }
        if self.diffusion.steps == 0 || self.edit.steps == 0 || self.edit.transfer_steps == 0 {
            return bad("step counts must be positive".into());
        }
        if self.synthesis.channels == 0 {
            return bad("synthesis.channels must be positive".into());
        }
        self.detect
            .threshold
            .validate()
            .map_err(|e| StudioError::Config(e.to_string()))?;
        self.diffusion
            .schedule
            .build(self.diffusion.steps)
            .map_err(|e| StudioError::Config(e.to_string()))?;
        if let DenoiserBinding::Analytic { mean, std } = &self.denoiser {
            if mean.is_empty() || !(*std > 0.0) {
                return bad("analytic denoiser needs a non-empty mean and std > 0".into());
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides with dotted keys, e.g. `diffusion.steps=30`.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, StudioError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                StudioError::Config(format!("override {item:?} is not key=value"))
            })?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .map(|mut t| t.remove("v").expect("key present"))
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts
                .pop()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| StudioError::Config(format!("empty key in {item:?}")))?;
            let mut table = &mut doc;
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| StudioError::Config(format!("{p} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        Self::from_toml(&toml::to_string(&doc).expect("table serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(
            StudioConfig::from_toml("").unwrap(),
            StudioConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = StudioConfig::default();
        cfg.diffusion.steps = 30;
        cfg.denoiser = DenoiserBinding::Bridge {
            endpoint: "127.0.0.1:9000".into(),
            connections: 2,
            timeout_secs: 5,
        };
        assert_eq!(StudioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn every_default_is_a_named_key() {
        let text = StudioConfig::default().to_toml();
        for key in [
            "beta",
            "histogram_bins",
            "patch",
            "global_term",
            "classes",
            "positives",
            "discard_fraction",
            "iterations",
            "lr",
            "tau",
            "steps",
            "guidance",
            "sigma_min",
            "sigma_max",
            "rho",
            "alpha",
            "fp_iters",
            "transfer_steps",
            "window",
            "overlap_min",
            "cutoff",
            "coarse",
        ] {
            assert!(
                text.lines().any(|l| l.starts_with(&format!("{key} ="))),
                "{key} missing from\n{text}"
            );
        }
    }

    #[test]
    fn overrides_use_dotted_keys() {
        let cfg = StudioConfig::default()
            .with_overrides(&[
                "diffusion.steps=7".into(),
                "diffusion.solver=euler".into(),
                "detect.threshold.beta=2.0".into(),
            ])
            .unwrap();
        assert_eq!(cfg.diffusion.steps, 7);
        assert_eq!(cfg.diffusion.solver, Solver::Euler);
        assert_eq!(cfg.detect.threshold.beta, 2.0);
        assert!(StudioConfig::default()
            .with_overrides(&["nope".into()])
            .is_err());
        assert!(StudioConfig::default()
            .with_overrides(&["edit.bogus=1".into()])
            .is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(StudioConfig::from_toml("version = 9").is_err());
        assert!(StudioConfig::from_toml("[segment]\nclasses = 0").is_err());
        assert!(StudioConfig::from_toml("[diffusion]\nsigma_min = 100.0").is_err());
        assert!(
            StudioConfig::from_toml("[denoiser]\nkind = \"analytic\"\nmean = []\nstd = 1.0")
                .is_err()
        );
    }
}
