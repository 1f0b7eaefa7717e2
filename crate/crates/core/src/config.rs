//! Training configuration shared by the trainer, the model and the CLI.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DEFAULT_INTERVAL_SIZE;
use crate::error::{CedError, Result};
use crate::objective::{check_alpha, ObjectiveConfig, ObjectiveVariant, DEFAULT_LAMBDA0, DEFAULT_LAMBDA1};
use crate::textfeat::ConvSpec;

/// Model/objective combination to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// TF-IDF intervals, GRU, full CED objective.
    Ced,
    /// CED plus the original-message CNN feature.
    CedOm,
    /// CNN interval features plus the original-message feature.
    CedCnn,
    /// CED-CNN architecture, objective without the time term.
    O1,
    /// CED-CNN architecture, objective without the hinge term.
    O2,
    /// TF-IDF intervals, GRU, final-step likelihood only.
    Gru2,
    /// Logistic regression on the TF-IDF bag of the whole stream.
    TfidfLin,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ced,
        Variant::CedOm,
        Variant::CedCnn,
        Variant::O1,
        Variant::O2,
        Variant::Gru2,
        Variant::TfidfLin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ced => "ced",
            Variant::CedOm => "ced-om",
            Variant::CedCnn => "ced-cnn",
            Variant::O1 => "o1",
            Variant::O2 => "o2",
            Variant::Gru2 => "gru2",
            Variant::TfidfLin => "tfidf-lin",
        }
    }

    pub fn objective(self) -> ObjectiveVariant {
        match self {
            Variant::Ced | Variant::CedOm | Variant::CedCnn => ObjectiveVariant::Ced,
            Variant::O1 => ObjectiveVariant::O1NoTime,
            Variant::O2 => ObjectiveVariant::O2NoDiff,
            Variant::Gru2 | Variant::TfidfLin => ObjectiveVariant::FullSequence,
        }
    }

    pub fn default_featurizer(self) -> FeaturizerMode {
        match self {
            Variant::CedCnn | Variant::O1 | Variant::O2 => FeaturizerMode::Cnn,
            _ => FeaturizerMode::Tfidf,
        }
    }

    pub fn default_original_message(self) -> bool {
        matches!(self, Variant::CedOm | Variant::CedCnn | Variant::O1 | Variant::O2)
    }

    pub fn default_hidden_dims(self) -> Vec<usize> {
        if self.default_original_message() {
            vec![100, 100]
        } else {
            vec![200, 200]
        }
    }

    pub fn is_linear(self) -> bool {
        self == Variant::TfidfLin
    }

    /// Decides only at the last visible step.
    pub fn is_full_sequence(self) -> bool {
        self.objective() == ObjectiveVariant::FullSequence
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CedError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CedError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerMode {
    Tfidf,
    Cnn,
}

/// Every knob of a training run. Optional fields fall back to
/// per-variant defaults; [`TrainConfig::resolved`] fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub featurizer: Option<FeaturizerMode>,
    pub original_message: Option<bool>,
    pub hidden_dims: Option<Vec<usize>>,
    pub gru_bias: bool,
    pub interval_size: usize,
    /// Longest interval sequence kept in CNN mode; later intervals are dropped.
    pub max_intervals: usize,
    pub tfidf_dim: usize,
    pub repost_vocab: usize,
    pub om_vocab: usize,
    pub conv: ConvSpec,
    pub om_conv: ConvSpec,
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub patience: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ced,
            featurizer: None,
            original_message: None,
            hidden_dims: None,
            gru_bias: true,
            interval_size: DEFAULT_INTERVAL_SIZE,
            max_intervals: 64,
            tfidf_dim: 1000,
            repost_vocab: 20_000,
            om_vocab: 3_000,
            conv: ConvSpec::default(),
            om_conv: ConvSpec::default(),
            alpha: 0.875,
            lambda0: DEFAULT_LAMBDA0,
            lambda1: DEFAULT_LAMBDA1,
            batch_size: 16,
            epochs: 30,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 1,
            patience: 10,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn featurizer_mode(&self) -> FeaturizerMode {
        self.featurizer.unwrap_or_else(|| self.variant.default_featurizer())
    }

    pub fn uses_original_message(&self) -> bool {
        !self.variant.is_linear()
            && self
                .original_message
                .unwrap_or_else(|| self.variant.default_original_message())
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.hidden_dims
            .clone()
            .unwrap_or_else(|| self.variant.default_hidden_dims())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            variant: self.variant.objective(),
        }
    }

    /// Copy with every optional field made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            featurizer: Some(self.featurizer_mode()),
            original_message: Some(self.uses_original_message()),
            hidden_dims: Some(self.hidden()),
            ..self.clone()
        }
    }

    /// Switches variant, clearing the fields whose defaults depend on it.
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            featurizer: None,
            original_message: None,
            hidden_dims: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.objective().validate()?;
        let positive = [
            ("interval_size", self.interval_size),
            ("max_intervals", self.max_intervals),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CedError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("tfidf_dim", self.tfidf_dim),
            ("repost_vocab", self.repost_vocab),
            ("om_vocab", self.om_vocab),
        ] {
            if v < 3 {
                return Err(CedError::Config(format!("{name} must be at least 3")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CedError::Config("learning_rate must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(CedError::Config("clip_norm must be positive".into()));
        }
        let hidden = self.hidden();
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(CedError::Config("hidden_dims must be non-empty and positive".into()));
        }
        if self.variant.is_linear() && self.featurizer_mode() != FeaturizerMode::Tfidf {
            return Err(CedError::Config("tfidf-lin needs the tfidf featurizer".into()));
        }
        if self.featurizer_mode() == FeaturizerMode::Cnn {
            self.conv.validate()?;
        }
        if self.uses_original_message() {
            self.om_conv.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
