use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{BranchFrames, CerReport};
use crate::model::ActivationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub activation: ActivationConfig,
    pub reference: String,
    pub hypothesis: String,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "N")]
    pub ref_len: usize,
    pub cer: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_frames: Option<BranchFrames>,
}

impl UtteranceRecord {
    pub fn new(id: String, activation: ActivationConfig, reference: String, hypothesis: String, r: CerReport) -> Self {
        Self {
            id,
            activation,
            reference,
            hypothesis,
            substitutions: r.substitutions,
            deletions: r.deletions,
            insertions: r.insertions,
            ref_len: r.ref_len,
            cer: r.cer,
            branch_frames: None,
        }
    }
}

/// Corpus-level totals for one activation config. `cer` is total edits
/// over total reference length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub activation: ActivationConfig,
    pub utterances: usize,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "N")]
    pub ref_len: usize,
    pub cer: f64,
    pub active_params: usize,
    /// Best-of-repeats seconds to decode the whole set. Left out of
    /// reports that must be reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Utterance(UtteranceRecord),
    Summary(CorpusSummary),
}

pub fn summarize(activation: ActivationConfig, records: &[UtteranceRecord], active_params: usize, wall_clock_secs: Option<f64>) -> CorpusSummary {
    let mine = records.iter().filter(|r| r.activation == activation);
    let mut s = CorpusSummary {
        activation,
        utterances: 0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ref_len: 0,
        cer: 0.0,
        active_params,
        wall_clock_secs,
    };
    for r in mine {
        s.utterances += 1;
        s.substitutions += r.substitutions;
        s.deletions += r.deletions;
        s.insertions += r.insertions;
        s.ref_len += r.ref_len;
    }
    if s.ref_len > 0 {
        s.cer = (s.substitutions + s.deletions + s.insertions) as f64 / s.ref_len as f64;
    }
    s
}

/// One JSON object per line: utterance records first, summaries last.
pub fn write_report<W: Write>(mut out: W, records: &[UtteranceRecord], summaries: &[CorpusSummary]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &ReportLine::Utterance(r.clone()))?;
        out.write_all(b"\n")?;
    }
    for s in summaries {
        serde_json::to_writer(&mut out, &ReportLine::Summary(s.clone()))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_report<R: BufRead>(input: R) -> io::Result<Vec<ReportLine>> {
    let mut lines = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(lines)
}
