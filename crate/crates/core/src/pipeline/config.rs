use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::PerturbationConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::retrieval::{DEFAULT_CAP, DEFAULT_REFERENCE_TEMPLATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy through the classifier head.
    CrossEntropy,
    /// Image/class-prompt contrastive loss; the head is rebuilt from text.
    Contrastive,
}

/// Everything one training stage needs. Serializes to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub top_k_visual: usize,
    #[serde(default)]
    pub top_k_text: usize,
    pub loss: LossMode,
    pub use_ra: bool,
    pub use_ap: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub weights: LossWeights,
    pub perturbation: PerturbationConfig,
    /// Per-class cap applied when this stage retrieves.
    pub retrieval_cap: Option<usize>,
    /// Prompt for the contrastive target and the rebuilt head.
    #[serde(default = "default_prompt")]
    pub prompt_template: String,
    pub seed: u64,
}

fn default_prompt() -> String {
    DEFAULT_REFERENCE_TEMPLATE.to_string()
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.name)));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        for (n, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_classifier", self.lr_classifier),
            ("weight_decay", self.weight_decay),
            ("warmup_lr", self.warmup_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{n} = {v} must be finite and >= 0"));
            }
        }
        if self.loss == LossMode::Contrastive && (self.use_ra || self.use_ap) {
            return bad("contrastive stages do not combine with RA or AP".into());
        }
        if self.retrieval_cap == Some(0) {
            return bad("retrieval_cap must be >= 1".into());
        }
        self.weights
            .validate()
            .and_then(|_| self.perturbation.validate())
            .map_err(|e| Error::Config(format!("stage {}: {e}", self.name)))
    }

    /// Hex prefix of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Hyperparameter scale for the recipe table. `reference()` holds the
/// full-size values; `toy()` is sized for the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    /// Epochs and weight decay of the long single-stage runs (LP, FFT, PFT,
    /// PCT, PFT+AP).
    pub long_epochs: usize,
    pub long_weight_decay: f64,
    /// Epochs and weight decay of RA runs and of each SRAPF stage.
    pub short_epochs: usize,
    pub short_weight_decay: f64,
    /// Multiplies every epoch count (rounded, at least 1).
    pub epoch_scale: f64,
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub top_k_visual: usize,
    pub pct_top_k: usize,
    pub retrieval_cap: Option<usize>,
    pub perturbation: PerturbationConfig,
    pub tau: f64,
}

impl Profile {
    pub fn reference() -> Self {
        Self {
            name: "reference".into(),
            batch_size: 64,
            lr_backbone: 1e-6,
            lr_classifier: 1e-3,
            long_epochs: 50,
            long_weight_decay: 0.1,
            short_epochs: 10,
            short_weight_decay: 0.01,
            epoch_scale: 1.0,
            warmup_iters: 18,
            warmup_lr: 1e-8,
            top_k_visual: 4,
            pct_top_k: 4,
            retrieval_cap: Some(DEFAULT_CAP),
            perturbation: PerturbationConfig::default(),
            tau: 0.01,
        }
    }

    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            batch_size: 64,
            lr_backbone: 1e-4,
            lr_classifier: 1e-2,
            long_epochs: 50,
            long_weight_decay: 0.1,
            short_epochs: 10,
            short_weight_decay: 0.01,
            epoch_scale: 1.0,
            warmup_iters: 18,
            warmup_lr: 1e-8,
            top_k_visual: 4,
            pct_top_k: 3,
            retrieval_cap: Some(DEFAULT_CAP),
            perturbation: PerturbationConfig::default(),
            tau: 0.07,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Recipe {
    Lp,
    Fft,
    Pft,
    Pct,
    PftRa,
    PftAp,
    PftRaAp,
    Srapf,
}

impl Recipe {
    pub const ALL: [Recipe; 8] = [
        Recipe::Lp,
        Recipe::Fft,
        Recipe::Pft,
        Recipe::Pct,
        Recipe::PftRa,
        Recipe::PftAp,
        Recipe::PftRaAp,
        Recipe::Srapf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Lp => "LP",
            Recipe::Fft => "FFT",
            Recipe::Pft => "PFT",
            Recipe::Pct => "PCT",
            Recipe::PftRa => "PFT+RA",
            Recipe::PftAp => "PFT+AP",
            Recipe::PftRaAp => "PFT+RA+AP",
            Recipe::Srapf => "SRAPF",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, Recipe::PftRa | Recipe::PftRaAp | Recipe::Srapf)
    }

    /// Stage configs in execution order. `visual_depth` and `text_depth`
    /// resolve "all blocks" for full finetuning.
    pub fn stages(self, profile: &Profile, visual_depth: usize, text_depth: usize, seed: u64) -> Vec<StageConfig> {
        let scaled = |e: usize| ((e as f64 * profile.epoch_scale).round() as usize).max(1);
        let base = StageConfig {
            name: self.name().to_lowercase(),
            top_k_visual: profile.top_k_visual.min(visual_depth),
            top_k_text: 0,
            loss: LossMode::CrossEntropy,
            use_ra: false,
            use_ap: false,
            epochs: scaled(profile.long_epochs),
            batch_size: profile.batch_size,
            lr_backbone: profile.lr_backbone,
            lr_classifier: profile.lr_classifier,
            weight_decay: profile.long_weight_decay,
            warmup_iters: profile.warmup_iters,
            warmup_lr: profile.warmup_lr,
            weights: LossWeights {
                lambda_ap: 0.0,
                lambda_ra: 0.0,
                tau: profile.tau,
            },
            perturbation: profile.perturbation,
            retrieval_cap: profile.retrieval_cap,
            prompt_template: default_prompt(),
            seed,
        };
        let short = |mut c: StageConfig| {
            c.epochs = scaled(profile.short_epochs);
            c.weight_decay = profile.short_weight_decay;
            c
        };
        let with_ra = |mut c: StageConfig| {
            c.use_ra = true;
            c.weights.lambda_ra = 1.0;
            c
        };
        let with_ap = |mut c: StageConfig| {
            c.use_ap = true;
            c.weights.lambda_ap = 1.0;
            c
        };
        match self {
            Recipe::Lp => vec![StageConfig {
                top_k_visual: 0,
                ..base
            }],
            Recipe::Fft => vec![StageConfig {
                top_k_visual: visual_depth,
                ..base
            }],
            Recipe::Pft => vec![base],
            Recipe::Pct => vec![StageConfig {
                loss: LossMode::Contrastive,
                top_k_visual: profile.pct_top_k.min(visual_depth),
                top_k_text: profile.pct_top_k.min(text_depth),
                ..base
            }],
            Recipe::PftRa => vec![short(with_ra(base))],
            Recipe::PftAp => vec![with_ap(base)],
            Recipe::PftRaAp => vec![short(with_ap(with_ra(base)))],
            Recipe::Srapf => {
                let mut s1 = short(with_ra(base.clone()));
                s1.name = "stage1".into();
                let mut s2 = short(with_ap(base));
                s2.name = "stage2".into();
                vec![s1, s2]
            }
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase().replace('-', "+");
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == upper)
            .ok_or_else(|| Error::arg(format!("unknown recipe {s:?}")))
    }
}
