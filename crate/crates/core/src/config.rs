//! Run configuration. Every field has a documented default and the whole
//! struct round-trips through JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};

/// Ablation mode: which parts of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pure late fusion of audio, time-averaged video and question.
    Baseline,
    /// Video replaced by static and pooled dynamic factors, plus the DSE objective.
    Dse,
    /// As `Dse`, with cross-sample affinity transfer.
    DseA,
    /// As `DseA`, with counterfactual intervention and TIE supervision.
    DseAC,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Dse, Mode::DseA, Mode::DseAC];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Dse => "dse",
            Mode::DseA => "dse_a",
            Mode::DseAC => "dse_a_c",
        }
    }

    pub fn uses_dse(self) -> bool {
        self != Mode::Baseline
    }

    pub fn uses_affinity(self) -> bool {
        matches!(self, Mode::DseA | Mode::DseAC)
    }

    pub fn uses_counterfactual(self) -> bool {
        self == Mode::DseAC
    }
}

impl std::str::FromStr for Mode {
    type Err = DclError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DclError::Config(format!("unknown mode {s:?} (expected baseline, dse, dse_a or dse_a_c)")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the classification loss is applied to in counterfactual mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieLossTarget {
    /// Cross-entropy on softmax of the total indirect effect logits.
    Tie,
    /// Cross-entropy on the factual logits; counterfactual passes only affect inference.
    Factual,
}

/// Synthetic dataset shape and difficulty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Frames per clip.
    pub t: usize,
    /// Raw per-frame and audio dimensionality.
    pub d_raw: usize,
    pub n_materials: usize,
    pub n_motions: usize,
    /// Question templates, split evenly over material, motion and mixed targets.
    pub n_questions: usize,
    pub train_objects: usize,
    pub val_objects: usize,
    pub test_objects: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    /// Scale of the per-material appearance and timbre prototypes.
    pub prototype_scale: f64,
    /// Per-object appearance jitter bound (infinity norm).
    pub appearance_jitter: f64,
    /// Radius of the orbit every clip traces in the motion plane.
    pub motion_amplitude: f64,
    /// Distance of each motion type's orbit centre from the origin.
    pub motion_offset: f64,
    pub frame_noise: f64,
    pub audio_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            t: 8,
            d_raw: 32,
            n_materials: 6,
            n_motions: 5,
            n_questions: 12,
            train_objects: 160,
            val_objects: 32,
            test_objects: 48,
            train_pairs: 512,
            val_pairs: 64,
            test_pairs: 64,
            prototype_scale: 0.35,
            appearance_jitter: 0.1,
            motion_amplitude: 2.5,
            motion_offset: 2.0,
            frame_noise: 0.6,
            audio_noise: 0.6,
        }
    }
}

/// Model widths and objective constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoded feature width for video frames, audio and question.
    pub d: usize,
    pub d_s: usize,
    pub d_z: usize,
    /// Bi-LSTM width per direction; also the decoder width.
    pub hidden: usize,
    /// Width of the dynamic-posterior recurrence and the dynamic prior LSTM.
    pub latent_hidden: usize,
    pub fusion_hidden: usize,
    pub fusion_width: usize,
    pub tau_nce: f64,
    /// Cap on contrastive negatives per anchor; `None` uses every other batch item.
    pub n_max: Option<usize>,
    pub tau_aff: f64,
    pub k: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    /// Gaussian blur width (feature-axis standard deviation) for motion augmentation.
    pub blur_width: f64,
    pub cf_samples_train: usize,
    pub cf_samples_eval: usize,
    pub tie_loss_target: TieLossTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            d_s: 64,
            d_z: 64,
            hidden: 256,
            latent_hidden: 64,
            fusion_hidden: 128,
            fusion_width: 64,
            tau_nce: 0.5,
            n_max: None,
            tau_aff: 2.0,
            k: 5,
            gamma: 1.0,
            alpha: 0.1,
            beta: 0.1,
            theta: 0.1,
            blur_width: 1.0,
            cf_samples_train: 1,
            cf_samples_eval: 8,
            tie_loss_target: TieLossTarget::Tie,
        }
    }
}

/// Optimisation and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub probe_iters: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            lr: 1e-3,
            epochs: 20,
            patience: 20,
            seed: 0,
            probe_iters: 300,
            probe_lr: 0.5,
            probe_l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Small widths for the finite-difference check:
    /// d=8, T=4, d_s=d_z=4, batch 6, k=2.
    pub fn tiny() -> Self {
        Config {
            data: DataConfig {
                t: 4,
                d_raw: 6,
                n_materials: 3,
                n_motions: 3,
                n_questions: 3,
                train_objects: 12,
                val_objects: 6,
                test_objects: 6,
                train_pairs: 12,
                val_pairs: 6,
                test_pairs: 6,
                ..DataConfig::default()
            },
            model: ModelConfig {
                d: 8,
                d_s: 4,
                d_z: 4,
                hidden: 5,
                latent_hidden: 4,
                fusion_hidden: 6,
                fusion_width: 5,
                k: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch: 6,
                epochs: 2,
                ..TrainConfig::default()
            },
        }
    }

    /// Reduced widths for multi-seed ablation sweeps on a single CPU core,
    /// with larger validation and test splits so five-seed means resolve
    /// differences of about a point. Training data and every objective
    /// constant are unchanged.
    pub fn desk() -> Self {
        Config {
            data: DataConfig {
                val_pairs: 128,
                test_pairs: 512,
                ..DataConfig::default()
            },
            model: ModelConfig {
                d: 64,
                hidden: 64,
                d_s: 16,
                d_z: 16,
                latent_hidden: 32,
                fusion_hidden: 64,
                fusion_width: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DclError::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| DclError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(path, text).map_err(|e| DclError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let positive = [
            ("data.t", d.t),
            ("data.d_raw", d.d_raw),
            ("data.n_questions", d.n_questions),
            ("model.d", m.d),
            ("model.d_s", m.d_s),
            ("model.d_z", m.d_z),
            ("model.hidden", m.hidden),
            ("model.latent_hidden", m.latent_hidden),
            ("model.fusion_hidden", m.fusion_hidden),
            ("model.fusion_width", m.fusion_width),
            ("model.k", m.k),
            ("model.cf_samples_train", m.cf_samples_train),
            ("model.cf_samples_eval", m.cf_samples_eval),
            ("train.batch", t.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DclError::Config(format!("{name} must be positive")));
            }
        }
        if d.n_materials < 2 || d.n_motions < 2 {
            return Err(DclError::Config("need at least 2 materials and 2 motions".into()));
        }
        if m.d_s != m.d_z {
            return Err(DclError::Config(format!(
                "the static/dynamic MI estimator compares s with pooled z, so d_s ({}) must equal d_z ({})",
                m.d_s, m.d_z
            )));
        }
        if t.batch < 2 {
            return Err(DclError::Config("train.batch must be at least 2 so negatives exist".into()));
        }
        for (name, v) in [("model.tau_nce", m.tau_nce), ("model.tau_aff", m.tau_aff), ("model.blur_width", m.blur_width), ("train.lr", t.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DclError::Config(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in [("gamma", m.gamma), ("alpha", m.alpha), ("beta", m.beta), ("theta", m.theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DclError::Config(format!("loss weight {name} must be non-negative")));
            }
        }
        if m.n_max == Some(0) {
            return Err(DclError::Config("model.n_max must be at least 1".into()));
        }
        Ok(())
    }
}
