//! Run configuration, read from a single TOML document.
//!
//! ```toml
//! rng_seed = 7
//! output_dir = "out"
//! alpha = 0.05
//!
//! [[endpoints]]
//! kind = "http"
//! name = "small"
//! base_url = "http://localhost:8000/v1"
//! model_id = "org/small-model"
//!
//! [[endpoints]]
//! kind = "scripted"
//! name = "scripted"
//! [endpoints.policy]
//! default_shift_probability = 0.3
//! initial_rule = { kind = "hashed" }
//!
//! [[corpus.sources]]
//! benchmark = "BBQ"
//! path = "data/bbq/Age.jsonl"
//!
//! [sampling.BBQ]
//! default_count = 200
//! rng_seed = 1
//!
//! [instability]
//! runs = 5
//!
//! [conversations]
//! demographics = ["Black", "White"]
//! rounds = 3
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{AgentProfile, Instantiation, RevealCondition, DEFAULT_PERSONAS};
use crate::corpus::{AdapterOptions, Benchmark, SamplePlan};
use crate::gateway::{ModelEndpoint, ScriptedPolicy};
use crate::metrics::Pooling;
use crate::prompt::{enumerate_variants, PromptVariant, DEFAULT_RETRY_CAP};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointConfig {
    Http(ModelEndpoint),
    Scripted { name: String, policy: ScriptedPolicy },
}

impl EndpointConfig {
    pub fn name(&self) -> &str {
        match self {
            EndpointConfig::Http(e) => &e.name,
            EndpointConfig::Scripted { name, .. } => name,
        }
    }

    pub fn is_scripted(&self) -> bool {
        matches!(self, EndpointConfig::Scripted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub benchmark: Benchmark,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sources: Vec<SourceConfig>,
    pub adapter: AdapterOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstabilityConfig {
    pub benchmarks: Vec<Benchmark>,
    pub runs: u32,
    /// Variant names (`upper_dot/answer_first`); empty means all 22.
    pub variants: Vec<PromptVariant>,
    pub system_prompt: String,
}

impl Default for InstabilityConfig {
    fn default() -> Self {
        Self {
            benchmarks: vec![Benchmark::Bbq, Benchmark::DiffAware],
            runs: 5,
            variants: Vec::new(),
            system_prompt: "You are an AI assistant.".into(),
        }
    }
}

impl InstabilityConfig {
    pub fn selected_variants(&self) -> Vec<PromptVariant> {
        if self.variants.is_empty() {
            enumerate_variants()
        } else {
            self.variants.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversationConfig {
    pub benchmarks: Vec<Benchmark>,
    pub demographics: Vec<String>,
    pub include_null_demographics: bool,
    pub personas: Vec<String>,
    pub include_null_persona: bool,
    pub instantiations: Vec<Instantiation>,
    pub reveals: Vec<RevealCondition>,
    pub rounds: u32,
    pub runs: u32,
    pub variant: PromptVariant,
    /// Takes the first N sampled questions of each subcategory; `None` uses all.
    pub questions_per_subcategory: Option<usize>,
    pub failure_threshold: f64,
    pub retry_cap: u32,
    /// Conversations in flight per endpoint.
    pub concurrency: usize,
}

impl Default for ConversationConfig {
    fn default() -> Self {
        Self {
            benchmarks: Benchmark::ALL.to_vec(),
            demographics: ["Black", "White", "Older", "Young", "Female", "Male"].map(String::from).to_vec(),
            include_null_demographics: true,
            personas: DEFAULT_PERSONAS.map(String::from).to_vec(),
            include_null_persona: false,
            instantiations: vec![Instantiation::Human, Instantiation::Ai],
            reveals: vec![RevealCondition::Revealed, RevealCondition::Anonymous],
            rounds: 3,
            runs: 1,
            variant: PromptVariant::CONVERSATION_DEFAULT,
            questions_per_subcategory: None,
            failure_threshold: 0.05,
            retry_cap: DEFAULT_RETRY_CAP,
            concurrency: 16,
        }
    }
}

impl ConversationConfig {
    /// Identity profiles in grid order: demographics, then persona, then
    /// instantiation.
    pub fn identity_profiles(&self) -> Vec<AgentProfile> {
        let demos: Vec<Option<String>> = self
            .include_null_demographics
            .then_some(None)
            .into_iter()
            .chain(self.demographics.iter().cloned().map(Some))
            .collect();
        let personas: Vec<Option<String>> =
            self.include_null_persona.then_some(None).into_iter().chain(self.personas.iter().cloned().map(Some)).collect();
        let mut out = Vec::new();
        for d in &demos {
            for p in &personas {
                for &instantiation in &self.instantiations {
                    out.push(AgentProfile { demographics: d.clone(), persona: p.clone(), instantiation });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub benchmarks: Vec<Benchmark>,
    /// (disadvantaged, advantaged) pairs for the paired contrasts.
    pub axis_pairs: Vec<(String, String)>,
    pub pooling: Pooling,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            benchmarks: Benchmark::ALL.to_vec(),
            axis_pairs: vec![("Black".into(), "White".into()), ("Older".into(), "Young".into()), ("Female".into(), "Male".into())],
            pooling: Pooling::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Keyed by benchmark name; missing benchmarks draw 200 per subcategory.
    #[serde(default)]
    pub sampling: BTreeMap<Benchmark, SamplePlan>,
    #[serde(default)]
    pub instability: InstabilityConfig,
    #[serde(default)]
    pub conversations: ConversationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_alpha() -> f64 {
    0.05
}

pub const DEFAULT_SAMPLE_COUNT: usize = 200;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for s in &mut self.corpus.sources {
            fix(&mut s.path);
        }
    }

    pub fn sample_plan(&self, benchmark: Benchmark) -> SamplePlan {
        self.sampling.get(&benchmark).cloned().unwrap_or_else(|| {
            SamplePlan::uniform(DEFAULT_SAMPLE_COUNT, derive_seed([&self.rng_seed.to_le_bytes()[..], benchmark.as_str().as_bytes()]))
        })
    }

    /// Checks everything that can be checked without doing work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.endpoints.is_empty() {
            return invalid("no endpoints".into());
        }
        let mut names: Vec<&str> = self.endpoints.iter().map(EndpointConfig::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return invalid("endpoint names must be unique".into());
        }
        for e in &self.endpoints {
            match e {
                EndpointConfig::Http(ep) => ep.validate().map_err(|err| ConfigError::Invalid(format!("endpoint `{}`: {err}", ep.name)))?,
                EndpointConfig::Scripted { name, policy } => {
                    policy.validate().map_err(|err| ConfigError::Invalid(format!("endpoint `{name}`: {err}")))?
                }
            }
        }
        for s in &self.corpus.sources {
            if !s.path.exists() {
                return invalid(format!("source {} does not exist", s.path.display()));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha {} must be in (0, 1)", self.alpha));
        }
        let c = &self.conversations;
        if c.rounds < 1 {
            return invalid("conversations.rounds must be >= 1".into());
        }
        if c.runs < 1 || self.instability.runs < 1 {
            return invalid("runs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&c.failure_threshold) {
            return invalid("failure_threshold must be in [0, 1]".into());
        }
        if c.concurrency == 0 {
            return invalid("conversations.concurrency must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; stable across re-serialization.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable config").as_bytes())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.output_dir.join("corpus")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
rng_seed = 3

[[endpoints]]
kind = "http"
name = "local"
base_url = "http://127.0.0.1:8000/v1"
model_id = "tiny"

[[endpoints]]
kind = "scripted"
name = "s"
[endpoints.policy]
default_shift_probability = 0.25
initial_rule = { kind = "hashed" }

[conversations]
demographics = ["Black", "White"]
include_null_demographics = false
personas = ["teacher", "farmer"]
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.conversations.rounds, 3);
        assert_eq!(cfg.instability.runs, 5);
        assert_eq!(cfg.instability.selected_variants().len(), 22);
        assert_eq!(cfg.conversations.identity_profiles().len(), 8);
        assert!(cfg.endpoints[1].is_scripted());
        assert_eq!(cfg.sample_plan(Benchmark::Bbq).default_count, Some(200));
    }

    #[test]
    fn digest_is_stable_under_reserialization() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let again = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg.digest(), again.digest());
        let mut changed = cfg.clone();
        changed.rng_seed += 1;
        assert_ne!(cfg.digest(), changed.digest());
    }

    #[test]
    fn missing_source_fails_validation() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.corpus.sources.push(SourceConfig { benchmark: Benchmark::Bbq, path: "/nonexistent/bbq.jsonl".into() });
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(m)) if m.contains("does not exist")));
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        if let EndpointConfig::Http(e) = &mut cfg.endpoints[0] {
            e.base_url = "ftp://x".into();
        }
        assert!(cfg.validate().is_err());
    }
}
