use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cycle::CycleConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// On/off switches for the three contributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub mgfm: bool,
    pub mlfm: bool,
    pub cycle: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { mgfm: true, mlfm: true, cycle: true }
    }
}

impl AblationFlags {
    pub const fn new(mgfm: bool, mlfm: bool, cycle: bool) -> Self {
        Self { mgfm, mlfm, cycle }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate reached by the cosine schedule on the last step.
    pub min_learning_rate: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the annotated frame groups.
    pub steps_per_epoch: Option<usize>,
    /// Annotated multi-view frame groups per step.
    pub labeled_batch: usize,
    /// Unlabeled multi-view clips per step.
    pub unlabeled_batch: usize,
    pub clip_length: usize,
    pub resize: usize,
    pub crop: usize,
    pub rng_seed: u64,
    /// Serial data loading; turning it off loads and augments batches on a worker thread.
    pub deterministic: bool,
    /// Frames per forward pass during evaluation.
    pub eval_chunk: usize,
    /// Validate every this many epochs (the last epoch always validates).
    pub validate_every: usize,
    pub ablation: AblationFlags,
    pub model: ModelConfig,
    pub cycle: CycleConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-5,
            min_learning_rate: 0.0,
            epochs: 100,
            steps_per_epoch: None,
            labeled_batch: 8,
            unlabeled_batch: 1,
            clip_length: 40,
            resize: 144,
            crop: 112,
            rng_seed: 0,
            deterministic: true,
            eval_chunk: 16,
            validate_every: 1,
            ablation: AblationFlags::default(),
            model: ModelConfig::default(),
            cycle: CycleConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Reads a TOML document, or JSON when the file ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = crate::document::read_document(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !positive(self.weight_decay) || !positive(self.min_learning_rate) {
            return Err(Error::Config("weight_decay and min_learning_rate must be non-negative".into()));
        }
        if self.min_learning_rate > self.learning_rate {
            return Err(Error::Config("min_learning_rate exceeds learning_rate".into()));
        }
        if self.epochs == 0 || self.labeled_batch == 0 || self.eval_chunk == 0 || self.validate_every == 0 {
            return Err(Error::Config("epochs, labeled_batch, eval_chunk and validate_every must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must be in 1..={}", self.crop, self.resize)));
        }
        if self.crop % self.model.backbone.stride != 0 {
            return Err(Error::Config(format!(
                "crop {} is not divisible by the backbone stride {}",
                self.crop, self.model.backbone.stride
            )));
        }
        self.cycle.validate()?;
        if self.cycle_active() {
            if self.unlabeled_batch == 0 {
                return Err(Error::Config("the cycle loss needs unlabeled_batch >= 1".into()));
            }
            let need = 5 * self.cycle.chunk_size;
            if self.clip_length < need {
                return Err(Error::Config(format!("clip_length {} < 5 * chunk_size = {need}", self.clip_length)));
            }
        }
        self.loss.validate()?;
        self.effective_model().validate()
    }

    pub fn cycle_active(&self) -> bool {
        self.ablation.cycle && self.cycle.enabled
    }

    /// Model configuration with the ablation flags applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.mgfm.enabled &= self.ablation.mgfm;
        m.mlfm.enabled &= self.ablation.mlfm;
        m
    }

    /// Copy with the ablation flags replaced.
    pub fn with_ablation(&self, flags: AblationFlags) -> Self {
        Self { ablation: flags, ..self.clone() }
    }

    /// The independent single-view configuration (every contribution off).
    pub fn single_view(&self) -> Self {
        self.with_ablation(AblationFlags::new(false, false, false))
    }

    /// Canonical form: ablation folded into the module switches and the seed cleared.
    fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.model = self.effective_model();
        c.cycle.enabled = self.cycle_active();
        c.ablation = AblationFlags::new(c.model.mgfm.enabled, c.model.mlfm.enabled, c.cycle.enabled);
        c.model.mgfm.enabled = true;
        c.model.mlfm.enabled = true;
        c.cycle.enabled = true;
        // switched-off modules have no effect, so their settings do not count
        if !c.ablation.cycle {
            c.cycle = CycleConfig::default();
        }
        if !c.ablation.mgfm {
            c.model.mgfm = Default::default();
        }
        if !c.ablation.mlfm {
            c.model.mlfm = Default::default();
        }
        c.rng_seed = 0;
        c
    }

    /// SHA-256 of the canonical JSON, independent of `rng_seed`.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
