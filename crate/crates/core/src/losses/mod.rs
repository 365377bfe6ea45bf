//! Training objectives: CTC, attention cross-entropy, their hybrid, the
//! local contrastive alignment loss, and the weighted total.

pub mod align;
pub mod attention;
pub mod ctc;

pub use align::{align_loss, align_loss_var, local_distribution, positive_distribution, positive_mask, similarity_matrix};
pub use attention::{attention_ce_batch_var, attention_ce_loss};
pub use ctc::{ctc_batch_var, ctc_loss, ctc_loss_var, min_frames};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;
use crate::linguistics::LinguisticsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no valid path: {frames} frames cannot emit a target needing {required}")]
    NoValidPath { frames: usize, required: usize },
    #[error("blank token in target at position {position}")]
    BlankInTarget { position: usize },
    #[error("token {token} out of range for {classes} classes")]
    TokenOutOfRange { token: usize, classes: usize },
    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Linguistics(#[from] LinguisticsError),
}

/// Where the frame classes that build the mapping matrix come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MappingSource {
    /// Argmax of the branch logits (no gradient).
    #[default]
    Predicted,
    /// Framewise labels, when the data has them.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub window_w: usize,
    pub epsilon: f64,
    pub mapping_source: MappingSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            tau: 0.1,
            lambda1: 1.0,
            lambda2: 0.3,
            window_w: 5,
            epsilon: 1e-8,
            mapping_source: MappingSource::Predicted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad(format!("lambdas must be nonnegative, got {} and {}", self.lambda1, self.lambda2));
        }
        if self.window_w == 0 || self.window_w % 2 == 0 {
            return bad(format!("window width must be odd and positive, got {}", self.window_w));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// `alpha * attn + (1 - alpha) * ctc`.
pub fn hybrid_loss(attn: f64, ctc: f64, alpha: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * attn + (1.0 - alpha) * ctc)
}

/// Raw loss terms from one forward pass. Disabled terms are `None` and
/// count as zero in the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub char_ctc: f64,
    pub char_attn: f64,
    pub phoneme_ctc: Option<f64>,
    pub viseme_ctc: Option<f64>,
    pub align: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub char_ctc: f64,
    pub char_attn: f64,
    pub char_hybrid: f64,
    pub phoneme_ctc: f64,
    pub viseme_ctc: f64,
    pub align: f64,
    pub total: f64,
    /// Which terms carried a gradient: phoneme_ctc, viseme_ctc, align.
    pub has_phoneme_ctc: bool,
    pub has_viseme_ctc: bool,
    pub has_align: bool,
}

pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> Result<LossBundle, LossError> {
    let char_hybrid = hybrid_loss(c.char_attn, c.char_ctc, cfg.alpha)?;
    let phoneme_ctc = c.phoneme_ctc.unwrap_or(0.0);
    let viseme_ctc = c.viseme_ctc.unwrap_or(0.0);
    let align = c.align.unwrap_or(0.0);
    Ok(LossBundle {
        char_ctc: c.char_ctc,
        char_attn: c.char_attn,
        char_hybrid,
        phoneme_ctc,
        viseme_ctc,
        align,
        total: char_hybrid + cfg.lambda1 * align + cfg.lambda2 * (phoneme_ctc + viseme_ctc),
        has_phoneme_ctc: c.phoneme_ctc.is_some(),
        has_viseme_ctc: c.viseme_ctc.is_some(),
        has_align: c.align.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hybrid_examples() {
        assert_eq!(hybrid_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(hybrid_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert_eq!(hybrid_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(hybrid_loss(2.0, 4.0, 1.5).is_err());
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig {
            alpha: 0.5,
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let c = LossComponents {
            char_ctc: 1.0,
            char_attn: 3.0,
            phoneme_ctc: Some(5.0),
            viseme_ctc: Some(7.0),
            align: Some(0.25),
        };
        let b = total_loss(&c, &cfg).unwrap();
        assert_eq!(b.total, b.char_hybrid);
        let cfg = LossConfig {
            alpha: 0.0,
            lambda1: 1.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let c = LossComponents {
            char_ctc: 1.0,
            char_attn: 9.0,
            align: Some(0.5),
            ..LossComponents::default()
        };
        assert_eq!(total_loss(&c, &cfg).unwrap().total, 1.5);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { alpha: -0.1, ..LossConfig::default() },
            LossConfig { tau: 0.0, ..LossConfig::default() },
            LossConfig { window_w: 4, ..LossConfig::default() },
            LossConfig { epsilon: 0.0, ..LossConfig::default() },
            LossConfig { lambda2: -1.0, ..LossConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
