//! The run configuration file (TOML) and its mapping onto module configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distill::DistillConfig;
use crate::harness::EvalSpec;
use crate::knowledge::{ExtractionConfig, KnowledgeFormat};
use crate::policy::pretrain::PretrainConfig;
use crate::policy::ToyConfig;
use crate::textgames::Game;
use crate::trajectory::EpisodeConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// The current student extracts its own knowledge.
    #[default]
    #[serde(rename = "self")]
    SelfModel,
    /// Deterministic rule statements read off environment feedback.
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub format: KnowledgeFormat,
    pub n: usize,
    pub l_max: usize,
    pub k: usize,
    pub include_previous: bool,
    pub extractor: ExtractorKind,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        let e = ExtractionConfig::default();
        ExtractionSection {
            format: e.format,
            n: e.n,
            l_max: e.l_max,
            k: e.k,
            include_previous: e.include_previous,
            extractor: ExtractorKind::default(),
            temperature: e.temperature,
            max_tokens: e.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub steps: usize,
    pub games_per_step: usize,
    pub learning_rate: f64,
    pub topk: usize,
    pub temperature: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            steps: d.steps,
            games_per_step: d.games_per_step,
            learning_rate: d.learning_rate,
            topk: d.topk,
            temperature: d.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub max_turns: usize,
    pub max_response_tokens: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection { max_turns: 5, max_response_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub num_maps: usize,
    pub num_seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { num_maps: 128, num_seeds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub max_logprobs: usize,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Toy,
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            max_logprobs: 20,
            timeout_secs: 120,
        }
    }
}

/// Shape of the toy model and how its base checkpoint is pretrained when no
/// `init_checkpoint` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_seed: u64,
    /// Where pretrained bases are cached, keyed by their settings.
    pub cache_dir: PathBuf,
}

impl Default for ToySection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        ToySection {
            d: p.toy.d,
            h: p.toy.h,
            w: p.toy.w,
            pretrain_steps: p.steps,
            pretrain_learning_rate: p.learning_rate,
            pretrain_seed: p.seed,
            cache_dir: PathBuf::from("target/oel-base"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OelConfig {
    pub game: Game,
    pub rounds: usize,
    pub seed: u64,
    /// Exchange directory holding every round's artifacts.
    pub run_dir: PathBuf,
    /// Starting student; a pretrained toy base when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub extraction: ExtractionSection,
    pub distill: DistillSection,
    pub episode: EpisodeSection,
    pub eval: EvalSection,
    pub backend: BackendSection,
    pub toy: ToySection,
}

impl Default for OelConfig {
    fn default() -> Self {
        OelConfig {
            game: Game::FrozenLake,
            rounds: 3,
            seed: 0,
            run_dir: PathBuf::from("run"),
            init_checkpoint: None,
            extraction: ExtractionSection::default(),
            distill: DistillSection::default(),
            episode: EpisodeSection::default(),
            eval: EvalSection::default(),
            backend: BackendSection::default(),
            toy: ToySection::default(),
        }
    }
}

impl OelConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: OelConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            field: e.path().to_string(),
            message: e.inner().message().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(invalid(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let positive_f = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, "must be a positive number"))
            }
        };
        positive("rounds", self.rounds)?;
        if i64::try_from(self.seed).is_err() {
            return Err(invalid("seed", "must be at most 2^63 - 1"));
        }
        positive("extraction.n", self.extraction.n)?;
        positive("extraction.l_max", self.extraction.l_max)?;
        positive("extraction.k", self.extraction.k)?;
        positive("extraction.max_tokens", self.extraction.max_tokens)?;
        positive_f("extraction.temperature", self.extraction.temperature)?;
        positive("distill.games_per_step", self.distill.games_per_step)?;
        positive("distill.topk", self.distill.topk)?;
        positive_f("distill.learning_rate", self.distill.learning_rate)?;
        positive_f("distill.temperature", self.distill.temperature)?;
        positive("episode.max_turns", self.episode.max_turns)?;
        positive("episode.max_response_tokens", self.episode.max_response_tokens)?;
        positive("eval.num_maps", self.eval.num_maps)?;
        positive("eval.num_seeds", self.eval.num_seeds)?;
        positive("toy.d", self.toy.d)?;
        positive("toy.h", self.toy.h)?;
        positive("toy.w", self.toy.w)?;
        positive_f("toy.pretrain_learning_rate", self.toy.pretrain_learning_rate)?;
        if self.backend.kind == BackendKind::Remote {
            positive("backend.max_logprobs", self.backend.max_logprobs)?;
            if self.backend.endpoint.is_empty() {
                return Err(invalid("backend.endpoint", "must not be empty for a remote backend"));
            }
        }
        Ok(())
    }

    /// sha256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn extraction_config(&self) -> ExtractionConfig {
        let e = &self.extraction;
        ExtractionConfig {
            format: e.format,
            n: e.n,
            l_max: e.l_max,
            k: e.k,
            include_previous: e.include_previous,
            temperature: e.temperature,
            max_tokens: e.max_tokens,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            steps: d.steps,
            games_per_step: d.games_per_step,
            learning_rate: d.learning_rate,
            topk: d.topk,
            temperature: d.temperature,
            max_turns: self.episode.max_turns,
            max_response_tokens: self.episode.max_response_tokens,
        }
    }

    /// Sampling settings for collection and evaluation episodes.
    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_turns: self.episode.max_turns,
            max_response_tokens: self.episode.max_response_tokens,
            temperature: self.distill.temperature,
        }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            game: self.game,
            num_maps: self.eval.num_maps,
            num_seeds: self.eval.num_seeds,
            episode: self.episode_config(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            game: self.game,
            toy: ToyConfig { d: self.toy.d, h: self.toy.h, w: self.toy.w },
            steps: self.toy.pretrain_steps,
            learning_rate: self.toy.pretrain_learning_rate,
            seed: self.toy.pretrain_seed,
            ..PretrainConfig::default()
        }
    }

    #[cfg(feature = "remote")]
    pub fn remote_config(&self) -> crate::policy::remote::RemoteConfig {
        let b = &self.backend;
        crate::policy::remote::RemoteConfig {
            endpoint: b.endpoint.clone(),
            model: b.model.clone(),
            api_key_env: b.api_key_env.clone(),
            max_logprobs: b.max_logprobs,
            timeout_secs: b.timeout_secs,
        }
    }
}
