use crate::data_synth::Utterance;
use crate::diffcore::Array;

/// Padded model input plus every label stream the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, T, C_in]`, zero past each length.
    pub features: Array,
    pub lengths: Vec<usize>,
    /// Char tokens (lexicon index + 1).
    pub char_targets: Vec<Vec<usize>>,
    pub phoneme_targets: Vec<Vec<usize>>,
    pub viseme_targets: Vec<Vec<usize>>,
    pub frame_phonemes: Vec<Vec<usize>>,
    pub frame_visemes: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Self {
        let c = utts.first().map_or(0, |u| u.features.last_dim());
        let t = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
        let mut data = vec![0.0; utts.len() * t * c];
        for (b, u) in utts.iter().enumerate() {
            let src = u.features.data();
            data[b * t * c..b * t * c + src.len()].copy_from_slice(src);
        }
        Self {
            features: Array::new(&[utts.len(), t, c], data).expect("sized"),
            lengths: utts.iter().map(|u| u.frames()).collect(),
            char_targets: utts.iter().map(|u| u.labels.chars.iter().map(|&c| c + 1).collect()).collect(),
            phoneme_targets: utts.iter().map(|u| u.labels.phonemes.clone()).collect(),
            viseme_targets: utts.iter().map(|u| u.labels.visemes.clone()).collect(),
            frame_phonemes: utts.iter().map(|u| u.frame_phonemes.clone()).collect(),
            frame_visemes: utts.iter().map(|u| u.frame_visemes.clone()).collect(),
        }
    }

    /// Unlabelled single sequence of `[T, C_in]` features.
    pub fn single(features: &Array) -> Self {
        let t = features.rows();
        let c = features.last_dim();
        Self {
            features: features.clone().reshaped(&[1, t, c]).expect("same size"),
            lengths: vec![t],
            char_targets: Vec::new(),
            phoneme_targets: Vec::new(),
            viseme_targets: Vec::new(),
            frame_phonemes: Vec::new(),
            frame_visemes: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_frames(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn has_targets(&self) -> bool {
        self.char_targets.len() == self.size() && self.size() > 0
    }
}
