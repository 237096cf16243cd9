use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the architecture are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Positive/negative matching tensor and unified memories.
    #[default]
    Full,
    /// Single-sided question matching; negative passages are ignored.
    NoNeg,
    /// The decoder attends over the multi-perspective memories directly.
    NoUm,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoNeg, Ablation::NoUm];

    pub fn uses_negatives(self) -> bool {
        self != Ablation::NoNeg
    }

    pub fn uses_unified_memory(self) -> bool {
        self != Ablation::NoUm
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoNeg => "no-neg",
            Ablation::NoUm => "no-um",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-neg" | "no_neg" => Ok(Ablation::NoNeg),
            "no-um" | "no_um" => Ok(Ablation::NoUm),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected full, no-neg or no-um)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width, also the per-direction width of the token BiLSTM.
    pub embed_dim: usize,
    /// Number of matching perspectives.
    pub perspectives: usize,
    /// Column count of the passage alignment memory.
    pub pam_width: usize,
    /// Decoder LSTM width.
    pub decoder_hidden: usize,
    /// Passages used per question; also fixes the alignment weight height.
    pub max_passages: usize,
    pub max_question_len: usize,
    pub max_passage_len: usize,
    pub max_answer_len: usize,
    /// Cap on the input vocabulary built from training data.
    pub max_vocab: usize,
    /// Size of the decoder output vocabulary; `None` means the full
    /// vocabulary.
    pub decoder_vocab: Option<usize>,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 300,
            perspectives: 5,
            pam_width: 10,
            decoder_hidden: 300,
            max_passages: 3,
            max_question_len: 50,
            max_passage_len: 130,
            max_answer_len: 50,
            max_vocab: 50_000,
            decoder_vocab: None,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    /// Full-size settings with the 5,000-word decoder vocabulary.
    pub fn msmarco() -> Self {
        ModelConfig {
            decoder_vocab: Some(5000),
            ..Default::default()
        }
    }

    /// Small widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 16,
            perspectives: 5,
            pam_width: 10,
            decoder_hidden: 24,
            max_passages: 3,
            max_question_len: 50,
            max_passage_len: 32,
            max_answer_len: 50,
            max_vocab: 5000,
            decoder_vocab: None,
            ablation: Ablation::Full,
        }
    }

    /// Width of a multi-perspective memory row.
    pub fn mpm_width(&self) -> usize {
        2 * (self.embed_dim + self.perspectives)
    }

    /// Width of the passage memory the decoder attends over.
    pub fn passage_memory_width(&self) -> usize {
        if self.ablation.uses_unified_memory() {
            self.mpm_width() + self.pam_width
        } else {
            self.mpm_width()
        }
    }

    /// Rows of the shared alignment weights.
    pub fn alignment_rows(&self) -> usize {
        self.max_passages.saturating_sub(1) * self.max_passage_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("perspectives", self.perspectives),
            ("pam_width", self.pam_width),
            ("decoder_hidden", self.decoder_hidden),
            ("max_passages", self.max_passages),
            ("max_question_len", self.max_question_len),
            ("max_passage_len", self.max_passage_len),
            ("max_answer_len", self.max_answer_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_vocab < 5 {
            return Err(Error::Config("max_vocab must be at least 5".into()));
        }
        if let Some(v) = self.decoder_vocab {
            if v < 5 {
                return Err(Error::Config("decoder_vocab must be at least 5".into()));
            }
        }
        Ok(())
    }
}

/// Optimization and decoding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beam_size: usize,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Draw fresh negative passages every epoch instead of once.
    pub resample_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            epochs: 30,
            batch_size: 32,
            seed: 1,
            beam_size: 20,
            clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            resample_negatives: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.beam_size == 0 {
            return Err(Error::Config("batch_size and beam_size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// The canonical JSON config file: `{"model": {...}, "train": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_setup() {
        let m = ModelConfig::default();
        assert_eq!(m.embed_dim, 300);
        assert_eq!(m.perspectives, 5);
        assert_eq!(
            (m.max_question_len, m.max_passage_len, m.max_answer_len),
            (50, 130, 50)
        );
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate, 0.0005);
        assert_eq!(t.beam_size, 20);
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.epochs, 30);
        assert_eq!(ModelConfig::msmarco().decoder_vocab, Some(5000));
    }

    #[test]
    fn memory_widths() {
        let mut m = ModelConfig {
            embed_dim: 3,
            perspectives: 2,
            pam_width: 4,
            ..ModelConfig::default()
        };
        assert_eq!(m.mpm_width(), 10);
        assert_eq!(m.passage_memory_width(), 14);
        m.ablation = Ablation::NoUm;
        assert_eq!(m.passage_memory_width(), 10);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"model": {"pam_width": 30}}"#).unwrap();
        assert_eq!(partial.model.pam_width, 30);
        assert!(ExperimentConfig::from_json(r#"{"model": {"bogus": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"learning_rate": 0}}"#).is_err());
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("no-um".parse::<Ablation>().unwrap(), Ablation::NoUm);
        assert_eq!("no_neg".parse::<Ablation>().unwrap(), Ablation::NoNeg);
        assert!("none".parse::<Ablation>().is_err());
    }
}
