use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-frame input feature size.
    pub input_dim: usize,
    /// Model width `C`.
    pub feature_dim: usize,
    pub ffn_dim: usize,
    pub trunk_layers: usize,
    pub branch_layers: usize,
    pub char_encoder_layers: usize,
    pub char_decoder_layers: usize,
    pub attention_heads: usize,
    pub conv_kernel: usize,
    pub p_drop: f64,
    /// Number of characters; the char vocabulary adds blank (0) and a
    /// shared start/end token (`num_chars + 1`).
    pub num_chars: usize,
    pub phoneme_vocab: usize,
    pub viseme_vocab: usize,
    /// Longest input the positional table covers.
    pub max_frames: usize,
    pub max_decode_len: usize,
    /// Build the phoneme and viseme branches at all.
    pub with_branches: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            feature_dim: 64,
            ffn_dim: 128,
            trunk_layers: 2,
            branch_layers: 1,
            char_encoder_layers: 2,
            char_decoder_layers: 1,
            attention_heads: 4,
            conv_kernel: 3,
            p_drop: 0.3,
            num_chars: 24,
            phoneme_vocab: 38,
            viseme_vocab: 16,
            max_frames: 256,
            max_decode_len: 16,
            with_branches: true,
        }
    }
}

impl ModelConfig {
    pub fn char_classes(&self) -> usize {
        self.num_chars + 2
    }

    pub fn eos(&self) -> usize {
        self.num_chars + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("ffn_dim", self.ffn_dim),
            ("trunk_layers", self.trunk_layers),
            ("char_encoder_layers", self.char_encoder_layers),
            ("char_decoder_layers", self.char_decoder_layers),
            ("attention_heads", self.attention_heads),
            ("conv_kernel", self.conv_kernel),
            ("num_chars", self.num_chars),
            ("max_frames", self.max_frames),
            ("max_decode_len", self.max_decode_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.with_branches && (self.branch_layers == 0 || self.phoneme_vocab < 2 || self.viseme_vocab < 2) {
            return Err(ModelError::Config("branches need layers and at least two classes".into()));
        }
        if self.feature_dim % self.attention_heads != 0 {
            return Err(ModelError::Config("feature_dim must be divisible by attention_heads".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ModelError::Config("conv_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(ModelError::Config(format!("p_drop must lie in [0, 1), got {}", self.p_drop)));
        }
        Ok(())
    }
}
