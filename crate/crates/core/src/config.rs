//! Run configuration: one structure holding every knob of an experiment.
//!
//! A config file names a preset and overrides any subset of keys. Files may
//! be TOML or JSON; both encode the same keys. Unknown keys are rejected
//! with their full path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotation::PipelineConfig;
use crate::corpus::CorpusParams;
use crate::crosslingual::{DistillHyper, TextEncoderConfig};
use crate::diffusion::{DenoiserConfig, DiffusionHyper, GuidanceMode};
use crate::oracle::TheoremSuiteConfig;
use crate::reward::{RewardHyper, RewardModelConfig, RewardTraining};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small networks that train in minutes on one CPU core.
    #[default]
    Desk,
    /// Full-size networks (256-wide, 9 layers) and the published optimizer settings.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub mu: f64,
    pub eta: f64,
    pub clip_gradients: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per evaluated configuration, one sampling seed each.
    pub num_samples: usize,
    /// Sample `i` uses seed `sample_seed + i`.
    pub sample_seed: u64,
    pub pool_size: usize,
    pub diversity_pairs: usize,
    pub metric_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Values assigned to both μ and η, one sweep point each.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds model initialization. Training and sampling seeds live in their sections.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub corpus: CorpusParams,
    /// Share of each class held out for evaluation.
    pub test_fraction: f64,
    pub distill: DistillHyper,
    pub reward: RewardHyper,
    pub reward_training: RewardTraining,
    pub diffusion: DiffusionHyper,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub theorems: TheoremSuiteConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let distill = match preset {
            Preset::Desk => DistillHyper::desk(),
            Preset::Paper => DistillHyper::default(),
        };
        Self {
            preset,
            seed: 0,
            schedule: ScheduleConfig {
                steps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            corpus: CorpusParams::default(),
            test_fraction: 0.1,
            distill,
            reward: RewardHyper::default(),
            reward_training: RewardTraining::default(),
            diffusion: DiffusionHyper::default(),
            guidance: GuidanceConfig {
                mode: GuidanceMode::Eq15Unweighted,
                mu: 2.0,
                eta: 2.0,
                clip_gradients: true,
            },
            eval: EvalConfig {
                num_samples: 200,
                sample_seed: 10_000,
                pool_size: 32,
                diversity_pairs: 300,
                metric_seed: 0,
            },
            sweep: SweepConfig {
                values: vec![-1.0, -0.5, 0.0, 0.25, 0.5, 1.0, 2.0],
            },
            theorems: TheoremSuiteConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// Reads a TOML or JSON file (by extension; anything but `.json` is TOML)
    /// and layers it over the preset it names.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_with(&text, json)
    }

    pub fn from_str_with(text: &str, json: bool) -> Result<Self> {
        let overlay: Value = if json {
            serde_json::from_str(text).map_err(|e| Error::Config {
                key: "<document>".into(),
                message: e.to_string(),
            })?
        } else {
            let t: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
                key: "<document>".into(),
                message: e.to_string(),
            })?;
            serde_json::to_value(t)?
        };
        Self::from_overlay(overlay)
    }

    /// Merges `overlay` onto the preset it names, then deserializes.
    pub fn from_overlay(overlay: Value) -> Result<Self> {
        if !overlay.is_object() {
            return Err(Error::Config {
                key: "<document>".into(),
                message: "top level must be a table".into(),
            });
        }
        let preset = match overlay.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config {
                key: "preset".into(),
                message: e.to_string(),
            })?,
        };
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, overlay);
        Self::from_value(base)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. The value is parsed as JSON when
    /// it can be, otherwise taken as a string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config {
                key: s.clone(),
                message: "override must look like key.path=value".into(),
            })?;
            let val: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut v;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| Error::Config {
                    key: key.to_string(),
                    message: format!("`{}` is not a table", parts[..i].join(".")),
                })?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), val.clone());
                    break;
                }
                node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        self.schedule.build().map_err(|e| Error::Config {
            key: "schedule".into(),
            message: e.to_string(),
        })?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", "must lie in (0, 1)");
        }
        if self.schedule.steps > self.reward_model_config().max_timestep {
            return bad("schedule.steps", "exceeds the reward model's timestep range");
        }
        if !self.guidance.mu.is_finite() || !self.guidance.eta.is_finite() {
            return bad("guidance", "mu and eta must be finite");
        }
        if self.eval.num_samples < self.eval.pool_size {
            return bad("eval.num_samples", "must be at least eval.pool_size");
        }
        if self.eval.pool_size < 2 {
            return bad("eval.pool_size", "must be >= 2");
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            return bad("sweep.values", "must be finite");
        }
        for (key, e, b) in [
            ("distill", self.distill.epochs, self.distill.batch_size),
            ("reward_training", self.reward_training.epochs, self.reward_training.batch_size),
            ("diffusion", self.diffusion.epochs, self.diffusion.batch_size),
        ] {
            if e == 0 || b == 0 {
                return bad(key, "epochs and batch_size must be >= 1");
            }
        }
        self.reward.validate().map_err(|e| Error::Config {
            key: "reward".into(),
            message: e.to_string(),
        })?;
        self.pipeline.validate().map_err(|e| Error::Config {
            key: "pipeline".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Teacher: encodes lang-a captions only.
    pub fn teacher_config(&self) -> TextEncoderConfig {
        self.text_config(self.corpus.vocab_per_language)
    }

    /// Student: encodes both languages.
    pub fn student_config(&self) -> TextEncoderConfig {
        self.text_config(self.corpus.joint_vocab())
    }

    fn text_config(&self, vocab: usize) -> TextEncoderConfig {
        let mut c = TextEncoderConfig::desk(vocab);
        c.max_len = c.max_len.max(self.corpus.max_caption_len);
        if self.preset == Preset::Paper {
            c.model_dim = 256;
            c.embed_dim = 256;
            c.num_layers = 9;
        }
        c
    }

    pub fn reward_model_config(&self) -> RewardModelConfig {
        let mut c = RewardModelConfig::desk(
            self.corpus.feature_dim,
            self.corpus.num_frames,
            self.corpus.joint_vocab(),
            self.schedule.steps,
        );
        c.max_caption_len = c.max_caption_len.max(self.corpus.max_caption_len);
        if self.preset == Preset::Paper {
            c.model_dim = 256;
            c.latent_dim = 256;
            c.motion_layers = 9;
            c.text_layers = 9;
            c.decoder_layers = 9;
        }
        c
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let cond = self.student_config().embed_dim;
        match self.preset {
            Preset::Desk => DenoiserConfig::desk(self.corpus.feature_dim, cond, self.corpus.num_frames),
            Preset::Paper => DenoiserConfig::paper(self.corpus.feature_dim, cond, self.corpus.num_frames),
        }
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> [u8; 32] {
        crate::checkpoint::sha256(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_both_encodings() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_str_with(&json, true).unwrap(), c);
        let toml_text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_str_with(&toml_text, false).unwrap(), c);
    }

    #[test]
    fn partial_file_overrides_only_named_keys() {
        let c = RunConfig::from_str_with("[guidance]\nmu = 2.0\n\n[distill]\nepochs = 7\n", false).unwrap();
        assert_eq!(c.guidance.mu, 2.0);
        assert_eq!(c.guidance.eta, RunConfig::default().guidance.eta);
        assert_eq!(c.distill.epochs, 7);
        assert_eq!(c.distill.lr, DistillHyper::desk().lr);
    }

    #[test]
    fn paper_preset_keeps_published_optimizer_values() {
        let c = RunConfig::from_str_with("preset = \"paper\"\n", false).unwrap();
        assert_eq!(c.distill, DistillHyper::default());
        assert_eq!(c.denoiser_config().model_dim, 256);
        assert_eq!(c.denoiser_config().num_layers, 9);
    }

    #[test]
    fn unknown_key_error_names_its_path() {
        let e = RunConfig::from_str_with("[guidance]\nmu = 1.0\nzeta = 3\n", false).unwrap_err();
        match e {
            Error::Config { key, message } => {
                assert_eq!(key, "guidance.zeta");
                assert!(message.contains("zeta"), "{message}");
            }
            other => panic!("{other}"),
        }
        let e = RunConfig::from_str_with(r#"{"reward": {"tau": "x"}}"#, true).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "reward.tau"), "{e}");
        let e = RunConfig::from_str_with(r#"{"bogus": 1}"#, true).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = RunConfig::default()
            .with_overrides(&["guidance.mu=-1".into(), "guidance.mode=eq14_weighted".into()])
            .unwrap();
        assert_eq!(c.guidance.mu, -1.0);
        assert_eq!(c.guidance.mode, GuidanceMode::Eq14Weighted);
        assert!(RunConfig::default().with_overrides(&["test_fraction=2".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["nokey".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.guidance.mu = 0.25;
        assert_ne!(a.hash(), b.hash());
    }
}
