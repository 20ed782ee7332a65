//! Run configuration, config hashing and per-stage seeds.
//!
//! A run is described by one TOML document; unknown keys anywhere are
//! rejected. Every section has defaults, so an empty file is a valid
//! configuration:
//!
//! ```toml
//! seed = 1
//!
//! [corpus]
//! n_cases = 2000
//! scale = 1.0
//!
//! [lm]
//! n_layers = 2
//! d_model = 64
//!
//! [training.prompt]
//! epochs = 1
//! lr = 0.003
//!
//! [schedule]
//! lambda = 6.0
//! k = 50.0
//! mu = 10.0
//! top_n = 10
//!
//! [ablation]
//! no_navigator = false
//! ```
//!
//! The config hash covers everything that determines trained weights
//! (seed, corpus, model shapes, training). Decoding schedule and ablation
//! switches are recorded next to each artifact instead, so that the variants
//! of one experiment share a hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lm::LmConfig;
use crate::navigator::{ClassifierConfig, GuidanceSchedule};
use crate::prompt::{PromptConfig, PromptFlags};
use crate::train::TrainOpts;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_cases: usize,
    /// Multiplies the text length bounds and the response onset.
    pub scale: f64,
    /// Claim catalog file; the built-in lending catalog when absent.
    pub catalog: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_cases: 2000, scale: 1.0, catalog: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl StageTraining {
    fn new(epochs: usize, lr: f64, batch_size: usize) -> Self {
        Self { epochs, lr, batch_size, clip: 1.0, max_steps: None }
    }

    pub fn opts(&self, seed: u64) -> TrainOpts {
        TrainOpts { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, clip: self.clip, seed, max_steps: self.max_steps }
    }
}

impl Default for StageTraining {
    fn default() -> Self {
        Self::new(1, 1e-3, 8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lm: StageTraining,
    /// Share of pretraining sequences whose fact, claims and view come from
    /// the same case; the rest pair a case's fact and claims with another
    /// case's view, so the model learns the language but not the mapping.
    pub lm_aligned_fraction: f64,
    pub prompt: StageTraining,
    pub navigator: StageTraining,
    pub eval_classifier: StageTraining,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lm: StageTraining::new(3, 2e-3, 8),
            lm_aligned_fraction: 0.0,
            prompt: StageTraining::new(1, 3e-3, 8),
            navigator: StageTraining::new(4, 3e-3, 8),
            eval_classifier: StageTraining::new(4, 3e-3, 8),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_keyword_init: bool,
    pub no_label_attention: bool,
    pub no_navigator: bool,
}

impl AblationFlags {
    pub fn prompt(&self) -> PromptFlags {
        PromptFlags { no_keyword_init: self.no_keyword_init, no_label_attention: self.no_label_attention }
    }

    /// `kig` for the full method, otherwise the active switches joined by `+`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_keyword_init {
            parts.push("no-keyword-init");
        }
        if self.no_label_attention {
            parts.push("no-label-attention");
        }
        if self.no_navigator {
            parts.push("no-navigator");
        }
        if parts.is_empty() { "kig".into() } else { parts.join("+") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub prompt: PromptConfig,
    pub classifier: ClassifierConfig,
    pub training: TrainingConfig,
    pub schedule: GuidanceSchedule,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig::default(),
            lm: LmConfig::default(),
            prompt: PromptConfig::default(),
            classifier: ClassifierConfig::default(),
            training: TrainingConfig::default(),
            schedule: GuidanceSchedule::default(),
            ablation: AblationFlags::default(),
        }
    }
}

/// The part of the configuration that the config hash covers.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    corpus: &'a CorpusConfig,
    lm: &'a LmConfig,
    prompt: &'a PromptConfig,
    classifier: &'a ClassifierConfig,
    training: &'a TrainingConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.n_cases < 10 {
            return Err(Error::Config("corpus.n_cases must be at least 10".into()));
        }
        if !(self.corpus.scale > 0.0 && self.corpus.scale.is_finite()) {
            return Err(Error::Config("corpus.scale must be positive".into()));
        }
        self.lm.validate()?;
        self.schedule.validate()?;
        let f = self.training.lm_aligned_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config("training.lm_aligned_fraction must lie in [0, 1]".into()));
        }
        for (name, st) in [
            ("lm", &self.training.lm),
            ("prompt", &self.training.prompt),
            ("navigator", &self.training.navigator),
            ("eval_classifier", &self.training.eval_classifier),
        ] {
            if st.batch_size == 0 || !(st.lr > 0.0 && st.lr.is_finite()) || !(st.clip > 0.0) {
                return Err(Error::Config(format!("training.{name}: batch_size, lr and clip must be positive")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 (first 16 characters) of the weight-determining settings.
    pub fn hash(&self) -> String {
        let h = Hashed {
            seed: self.seed,
            corpus: &self.corpus,
            lm: &self.lm,
            prompt: &self.prompt,
            classifier: &self.classifier,
            training: &self.training,
        };
        let text = serde_json::to_string(&h).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

/// Seed for `stage`: the first eight bytes of SHA-256 over the master seed
/// and the stage name.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig { seed: 9, ..Default::default() };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        for bad in ["sed = 1", "[lm]\nd_modle = 3", "[schedule]\nlamda = 1.0", "[training.prompt]\nepoch = 2"] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn validation_errors() {
        for bad in ["[schedule]\nmu = 0.0", "[schedule]\ntop_n = 0", "[lm]\nn_heads = 5", "[corpus]\nn_cases = 3", "[schedule]\nlambda = -1.0"] {
            let e = RunConfig::from_toml(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn hash_ignores_schedule_and_ablation_but_not_training() {
        let base = RunConfig::default();
        let mut sched = base.clone();
        sched.schedule.lambda = 2.0;
        sched.ablation.no_navigator = true;
        assert_eq!(base.hash(), sched.hash());
        let mut other = base.clone();
        other.training.prompt.lr = 1e-2;
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash().len(), 16);
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, "lm"), derive_seed(1, "lm"));
        assert_ne!(derive_seed(1, "lm"), derive_seed(1, "prompt"));
        assert_ne!(derive_seed(1, "lm"), derive_seed(2, "lm"));
    }

    #[test]
    fn ablation_labels() {
        assert_eq!(AblationFlags::default().label(), "kig");
        let f = AblationFlags { no_keyword_init: true, no_navigator: true, ..Default::default() };
        assert_eq!(f.label(), "no-keyword-init+no-navigator");
    }
}
