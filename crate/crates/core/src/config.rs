//! Pipeline configuration: a sectioned `key = value` (TOML) file, plus the
//! per-stage fingerprints that tie artifacts to the settings they were built
//! with.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::collab::CollabTrainConfig;
use crate::dataset::PromptStyle;
use crate::error::{Error, Result};
use crate::fusion::GateConfig;
use crate::lm::{LmConfig, LoraConfig};
use crate::reason::DEFAULT_MAX_ATTEMPTS;
use crate::trainer::{LossConfig, MixConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `user<d>item<d>rating<d>timestamp` rows.
    pub ratings: PathBuf,
    /// `id<d>title<d>description` rows; optional.
    pub items: Option<PathBuf>,
    pub delimiter: String,
    pub item_delimiter: String,
    pub threshold: f64,
    pub min_interactions: usize,
    /// Explicit split boundaries; when absent they are taken at the
    /// `train_fraction` and `train_fraction + valid_fraction` timestamp quantiles.
    pub train_end: Option<i64>,
    pub valid_end: Option<i64>,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub max_history: usize,
    pub keywords: usize,
    pub item_singular: String,
    pub item_plural: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ratings: PathBuf::from("ratings.dat"),
            items: None,
            delimiter: "::".into(),
            item_delimiter: "\t".into(),
            threshold: 3.0,
            min_interactions: 5,
            train_end: None,
            valid_end: None,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            max_history: 10,
            keywords: 10,
            item_singular: "book".into(),
            item_plural: "books".into(),
        }
    }
}

impl DataConfig {
    pub fn style(&self) -> PromptStyle {
        PromptStyle { item_singular: self.item_singular.clone(), item_plural: self.item_plural.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonConfig {
    /// Number of training windows sent to the oracle; 0 means all.
    pub sample_n: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        Self { sample_n: 0, max_attempts: DEFAULT_MAX_ATTEMPTS, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub max_vocab: usize,
    pub min_count: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { max_vocab: 4000, min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub n_groups: usize,
    /// Trainable adapter layers counted from the top; 0 means half the stack.
    pub trainable_layers: usize,
    pub cluster_seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { n_groups: 2, trainable_layers: 0, cluster_seed: 42, steps: 100, learning_rate: 1e-4, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { steps: 100, learning_rate: 1e-3, seed: 42 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    Global,
    Single,
    Fused,
    #[default]
    Auto,
}

impl std::str::FromStr for ExpertMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "single" => Ok(Self::Single),
            "fused" => Ok(Self::Fused),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::Config(format!("unknown expert mode `{s}` (global, single, fused, auto)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub mode: ExpertMode,
    /// Feed projected collaborative embeddings into slotted prompts.
    pub use_features: bool,
    /// Test windows whose reasons are generated and scored with METEOR.
    pub reason_samples: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5, mode: ExpertMode::Auto, use_features: true, reason_samples: 16, max_new_tokens: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub reasons: ReasonConfig,
    pub collab: CollabTrainConfig,
    pub tokenizer: TokenizerConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub mix: MixConfig,
    pub loss: LossConfig,
    pub experts: ExpertConfig,
    pub projector: ProjectorConfig,
    pub gate: GateConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            reasons: ReasonConfig::default(),
            collab: CollabTrainConfig::default(),
            tokenizer: TokenizerConfig::default(),
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            mix: MixConfig::default(),
            loss: LossConfig::default(),
            experts: ExpertConfig::default(),
            projector: ProjectorConfig::default(),
            gate: GateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Synth,
    Collab,
    Global,
    Cluster,
    Experts,
    Projector,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Synth => "synth",
            Stage::Collab => "collab",
            Stage::Global => "global",
            Stage::Cluster => "cluster",
            Stage::Experts => "experts",
            Stage::Projector => "projector",
        }
    }
}

fn toml_of<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config sections serialize")
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.ratings);
        if let Some(items) = cfg.data.items.as_mut() {
            resolve(items);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml_of(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.max_history == 0 || d.min_interactions == 0 {
            return Err(Error::Config("max_history and min_interactions must be at least 1".into()));
        }
        if !(d.train_fraction > 0.0 && d.valid_fraction >= 0.0 && d.train_fraction + d.valid_fraction < 1.0) {
            return Err(Error::Config("train_fraction + valid_fraction must lie in (0, 1)".into()));
        }
        if let (Some(t), Some(v)) = (d.train_end, d.valid_end) {
            if t >= v {
                return Err(Error::Config("train_end must precede valid_end".into()));
            }
        }
        if d.train_end.is_some() != d.valid_end.is_some() {
            return Err(Error::Config("set both train_end and valid_end or neither".into()));
        }
        if self.reasons.max_attempts == 0 {
            return Err(Error::Config("reasons.max_attempts must be at least 1".into()));
        }
        if self.tokenizer.max_vocab <= crate::lm::tokenizer::FIRST_WORD as usize {
            return Err(Error::Config(format!(
                "tokenizer.max_vocab must exceed the {} reserved ids",
                crate::lm::tokenizer::FIRST_WORD
            )));
        }
        let mut lm = self.lm.clone();
        lm.vocab_size = lm.vocab_size.max(1);
        lm.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.lora.rank == 0 || !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::Config("lora.rank must be positive and dropout in [0, 1)".into()));
        }
        self.mix.validate()?;
        self.loss.weights.validate()?;
        if self.experts.n_groups == 0 || self.trainable_layers() > self.lm.n_layers || self.experts.learning_rate <= 0.0 {
            return Err(Error::Config(
                "experts.n_groups must be positive, trainable_layers at most lm.n_layers, learning_rate positive".into(),
            ));
        }
        if self.projector.learning_rate <= 0.0 {
            return Err(Error::Config("projector.learning_rate must be positive".into()));
        }
        let g = &self.gate;
        if !(g.tau > 0.0) || !(g.entropy_factor > 0.0) {
            return Err(Error::Config("gate.tau and gate.entropy_factor must be positive".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn trainable_layers(&self) -> usize {
        if self.experts.trainable_layers == 0 {
            (self.lm.n_layers / 2).max(1)
        } else {
            self.experts.trainable_layers
        }
    }

    /// Hash of every setting that can change a stage's output, including the
    /// settings of the stages it reads from.
    pub fn fingerprint(&self, stage: Stage) -> String {
        let mut data = self.data.clone();
        // Paths do not affect contents beyond what the file hashes record.
        data.ratings = PathBuf::new();
        data.items = None;
        let own = match stage {
            Stage::Prepare => toml_of(&data),
            Stage::Synth => toml_of(&self.reasons),
            Stage::Collab => toml_of(&self.collab),
            Stage::Global => format!(
                "{}{}{}{}{}",
                toml_of(&self.tokenizer),
                toml_of(&self.lm),
                toml_of(&self.lora),
                toml_of(&self.mix),
                toml_of(&self.loss)
            ),
            Stage::Cluster => format!("n_groups={} seed={}", self.experts.n_groups, self.experts.cluster_seed),
            Stage::Experts => format!("{}k={}", toml_of(&self.experts), self.trainable_layers()),
            Stage::Projector => toml_of(&self.projector),
        };
        let upstream: Vec<Stage> = match stage {
            Stage::Prepare => vec![],
            Stage::Synth | Stage::Collab => vec![Stage::Prepare],
            Stage::Global => vec![Stage::Synth],
            Stage::Cluster => vec![Stage::Collab],
            Stage::Experts => vec![Stage::Global, Stage::Cluster],
            Stage::Projector => vec![Stage::Global, Stage::Collab],
        };
        let mut text = format!("{}\n{own}", stage.name());
        for u in upstream {
            text.push('\n');
            text.push_str(&self.fingerprint(u));
        }
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn processed_dir(&self) -> PathBuf {
        self.output_dir.join("processed")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.loss.weights.alpha, 0.1);
        assert_eq!(cfg.mix.think_rate, 0.2);
        assert_eq!(cfg.lora.rank, 8);
        assert_eq!(cfg.gate.tau, 0.1);
        assert_eq!(cfg.data.max_history, 10);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = PipelineConfig::from_toml("[experts]\nn_groups = 3\n[lm]\nn_layers = 6\n").unwrap();
        assert_eq!(cfg.experts.n_groups, 3);
        assert_eq!(cfg.trainable_layers(), 3);
        assert_eq!(cfg.lm.d_model, 128);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[mix]\nthink_rate = 0.5\n",
            "[experts]\nn_groups = 0\n",
            "[data]\ntrain_end = 10\nvalid_end = 5\n",
            "[lm]\nd_model = 30\nn_heads = 4\n",
            "[unknown]\nx = 1\n",
            "[gate]\ntau = 0.0\n",
        ] {
            let err = PipelineConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn fingerprints_follow_dependencies() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.projector.steps += 1;
        assert_eq!(a.fingerprint(Stage::Experts), b.fingerprint(Stage::Experts));
        assert_ne!(a.fingerprint(Stage::Projector), b.fingerprint(Stage::Projector));
        let mut c = a.clone();
        c.data.max_history = 4;
        for s in [Stage::Prepare, Stage::Synth, Stage::Global, Stage::Experts, Stage::Projector] {
            assert_ne!(a.fingerprint(s), c.fingerprint(s));
        }
        let mut d = a.clone();
        d.eval.k = 10;
        d.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(Stage::Projector), d.fingerprint(Stage::Projector));
    }
}
