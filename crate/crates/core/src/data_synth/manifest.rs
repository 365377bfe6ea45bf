//! Manifest directory: `index.jsonl` (a header line, then one record per
//! utterance) and `features.bin` (magic, version, value count, then
//! little-endian `f64` features of all utterances back to back).

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{expand_frames, Utterance};
use crate::diffcore::Array;
use crate::linguistics::{LabelTriple, LinguisticInventory};

pub const MANIFEST_VERSION: u32 = 1;
const FORMAT: &str = "cfvsr-manifest";
const BLOB_MAGIC: &[u8; 8] = b"CFVSRFB\0";
const BLOB_HEADER: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated manifest: {0}")]
    Truncated(String),
    #[error("corrupt manifest: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    feature_dim: usize,
    utterances: usize,
    feature_values: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    frames: usize,
    chars: String,
    phonemes: String,
    visemes: String,
    durations: String,
    lead_silence: usize,
    trail_silence: usize,
    offset: u64,
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn split(s: &str, what: &str, id: &str) -> Result<Vec<usize>, ManifestError> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| ManifestError::Corrupt(format!("{id}: bad {what} entry {t:?}"))))
        .collect()
}

pub fn write_manifest(dir: impl AsRef<Path>, corpus: &[Utterance]) -> Result<(), ManifestError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let feature_dim = corpus.first().map_or(0, |u| u.features.last_dim());
    let total: usize = corpus.iter().map(|u| u.features.len()).sum();

    let mut blob = BufWriter::new(fs::File::create(dir.join("features.bin"))?);
    blob.write_all(BLOB_MAGIC)?;
    blob.write_all(&MANIFEST_VERSION.to_le_bytes())?;
    blob.write_all(&(total as u64).to_le_bytes())?;

    let mut index = BufWriter::new(fs::File::create(dir.join("index.jsonl"))?);
    let header = Header {
        format: FORMAT.into(),
        version: MANIFEST_VERSION,
        feature_dim,
        utterances: corpus.len(),
        feature_values: total as u64,
    };
    writeln!(index, "{}", serde_json::to_string(&header).map_err(io::Error::other)?)?;
    let mut offset = 0u64;
    for u in corpus {
        if u.features.last_dim() != feature_dim {
            return Err(ManifestError::Corrupt(format!("{}: feature dim differs from the corpus", u.id)));
        }
        let rec = Record {
            id: u.id.clone(),
            frames: u.frames(),
            chars: join(&u.labels.chars),
            phonemes: join(&u.labels.phonemes),
            visemes: join(&u.labels.visemes),
            durations: join(&u.durations),
            lead_silence: u.lead_silence,
            trail_silence: u.trail_silence,
            offset,
        };
        writeln!(index, "{}", serde_json::to_string(&rec).map_err(io::Error::other)?)?;
        for v in u.features.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += u.features.len() as u64;
    }
    blob.flush()?;
    index.flush()?;
    Ok(())
}

/// Reads a manifest back. Frame viseme labels are re-derived through
/// `inv`, and any inconsistency aborts the whole read.
pub fn read_manifest(dir: impl AsRef<Path>, inv: &LinguisticInventory) -> Result<Vec<Utterance>, ManifestError> {
    let dir = dir.as_ref();
    let blob = fs::read(dir.join("features.bin"))?;
    if blob.len() < BLOB_HEADER {
        return Err(ManifestError::Truncated("feature blob shorter than its header".into()));
    }
    if &blob[..8] != BLOB_MAGIC {
        return Err(ManifestError::Corrupt("feature blob has the wrong magic".into()));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().expect("4 bytes"));
    if version != MANIFEST_VERSION {
        return Err(ManifestError::VersionMismatch { found: version, expected: MANIFEST_VERSION });
    }
    let count = u64::from_le_bytes(blob[12..20].try_into().expect("8 bytes"));
    let body = &blob[BLOB_HEADER..];
    if count.checked_mul(8) != Some(body.len() as u64) {
        return Err(ManifestError::Truncated(format!(
            "feature blob declares {count} values but holds {} bytes",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();

    let mut lines = BufReader::new(fs::File::open(dir.join("index.jsonl"))?).lines();
    let head = lines.next().ok_or_else(|| ManifestError::Truncated("index has no header".into()))??;
    let header: Header = serde_json::from_str(&head).map_err(|e| ManifestError::Corrupt(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(ManifestError::Corrupt(format!("unknown format {:?}", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(ManifestError::VersionMismatch { found: header.version, expected: MANIFEST_VERSION });
    }
    if header.feature_values != count {
        return Err(ManifestError::Corrupt("index and blob disagree on the feature count".into()));
    }
    let c = header.feature_dim;
    let mut corpus = Vec::with_capacity(header.utterances);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| ManifestError::Corrupt(format!("record: {e}")))?;
        let phonemes = split(&rec.phonemes, "phoneme", &rec.id)?;
        if let Some(&p) = phonemes.iter().find(|&&p| p >= inv.num_phonemes()) {
            return Err(ManifestError::Corrupt(format!("{}: phoneme {p} outside the inventory", rec.id)));
        }
        let visemes = split(&rec.visemes, "viseme", &rec.id)?;
        if visemes != inv.visemes_for(&phonemes) {
            return Err(ManifestError::Corrupt(format!("{}: visemes disagree with phonemes", rec.id)));
        }
        let durations = split(&rec.durations, "duration", &rec.id)?;
        if durations.len() != phonemes.len() {
            return Err(ManifestError::Corrupt(format!("{}: durations and phonemes differ in length", rec.id)));
        }
        let frame_phonemes = expand_frames(&phonemes, &durations, rec.lead_silence, rec.trail_silence);
        if frame_phonemes.len() != rec.frames {
            return Err(ManifestError::Corrupt(format!("{}: frame count disagrees with durations", rec.id)));
        }
        let start = rec.offset as usize;
        let end = start + rec.frames * c;
        if end > values.len() {
            return Err(ManifestError::Truncated(format!("{}: features run past the blob", rec.id)));
        }
        let features = Array::new(&[rec.frames, c], values[start..end].to_vec())
            .map_err(|e| ManifestError::Corrupt(e.to_string()))?;
        corpus.push(Utterance {
            id: rec.id.clone(),
            features,
            labels: LabelTriple {
                chars: split(&rec.chars, "char", &rec.id)?,
                phonemes,
                visemes,
            },
            durations,
            lead_silence: rec.lead_silence,
            trail_silence: rec.trail_silence,
            frame_visemes: inv.visemes_for(&frame_phonemes),
            frame_phonemes,
        });
    }
    if corpus.len() != header.utterances {
        return Err(ManifestError::Truncated(format!(
            "index lists {} of {} utterances",
            corpus.len(),
            header.utterances
        )));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_corpus, SynthConfig};
    use crate::linguistics::Lexicon;

    #[test]
    fn round_trip_and_corruption() {
        let inv = LinguisticInventory::bundled();
        let lex = Lexicon::bundled(&inv);
        let cfg = SynthConfig {
            num_utterances: 3,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg, &inv, &lex).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &corpus).unwrap();
        assert_eq!(read_manifest(dir.path(), &inv).unwrap(), corpus);

        let path = dir.path().join("features.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[12] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_manifest(dir.path(), &inv), Err(ManifestError::Truncated(_))));

        bytes[12] ^= 0x01;
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_manifest(dir.path(), &inv),
            Err(ManifestError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn empty_corpus() {
        let inv = LinguisticInventory::bundled();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &[]).unwrap();
        assert!(read_manifest(dir.path(), &inv).unwrap().is_empty());
    }
}
