//! Supervised fine-tuning export: one (messages, target) record per
//! evaluation unit, in the common chat-tuning line format, with the
//! recommended adapter hyperparameters recorded in a header line.
//!
//! Training prompts use the zero-shot shape (instructions + metadata +
//! history, no exemplars); fine-tuning is what internalizes the exemplars.

use crate::corpus::{units, CorpusStore, Domain, UnitFilter};
use crate::promptkit::{
    build_prompt, AblationConfig, PromptAssets, PromptError, PromptMode, PromptOptions,
};
use crate::respparse::render_mentions;
use crate::serialize::MetadataStyle;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const SFT_FORMAT_VERSION: u32 = 1;

/// Recommended adapter configuration carried as export metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftHyperparameters {
    pub rank: u32,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for SftHyperparameters {
    fn default() -> Self {
        SftHyperparameters {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
        }
    }
}

/// First line of an export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftHeader {
    pub format_version: u32,
    pub hyperparameters: SftHyperparameters,
    pub style: MetadataStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_filter: Option<Domain>,
    pub record_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub domain: Domain,
}

/// One training record: chat messages plus the canonical marker target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<ChatTurn>,
    /// Canonical `<SOM>…<EOM>` string; re-parses to the unit's gold set.
    pub target: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Error)]
pub enum SftError {
    #[error("io error on {path}: {detail}")]
    Io {
        path: std::path::PathBuf,
        detail: String,
    },

    #[error(transparent)]
    Prompt(#[from] PromptError),

    #[error("sft export requires zero-shot-shaped prompts, got {0}")]
    UnsupportedMode(PromptMode),

    #[error("malformed sft file {path} line {line}: {detail}")]
    Malformed {
        path: std::path::PathBuf,
        line: usize,
        detail: String,
    },
}

/// Export one SFT record per unit in the filtered store. Returns the
/// record count (the header line not included).
pub fn export_sft(
    store: &CorpusStore,
    domain_filter: Option<Domain>,
    style: MetadataStyle,
    mode: PromptMode,
    out_path: &Path,
    assets: &PromptAssets,
) -> Result<usize, SftError> {
    if mode != PromptMode::ZeroShot {
        return Err(SftError::UnsupportedMode(mode));
    }
    let filter = UnitFilter {
        domains: domain_filter.map(|d| [d].into_iter().collect()),
        ..Default::default()
    };
    let selected = units(store, &filter);

    let io_err = |e: std::io::Error| SftError::Io {
        path: out_path.to_path_buf(),
        detail: e.to_string(),
    };
    let file = std::fs::File::create(out_path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);

    let header = SftHeader {
        format_version: SFT_FORMAT_VERSION,
        hyperparameters: SftHyperparameters::default(),
        style,
        domain_filter,
        record_count: selected.len(),
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )
    .map_err(io_err)?;

    for unit in &selected {
        let bundle = build_prompt(
            unit,
            PromptMode::ZeroShot,
            AblationConfig::AllInfo,
            style,
            &[],
            assets,
            &PromptOptions::default(),
        )?;
        let record = SftRecord {
            messages: vec![
                ChatTurn {
                    role: "system".into(),
                    content: bundle.system_text,
                },
                ChatTurn {
                    role: "user".into(),
                    content: bundle.user_text,
                },
            ],
            target: render_mentions(unit.gold.iter().copied()),
            meta: SftMeta {
                dialogue_id: unit.dialogue_id.clone(),
                turn_index: unit.turn_index,
                domain: unit.domain,
            },
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(selected.len())
}

/// Read an export file back: the header line plus every record.
pub fn read_sft(path: &Path) -> Result<(SftHeader, Vec<SftRecord>), SftError> {
    let file = std::fs::File::open(path).map_err(|e| SftError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| SftError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        detail: "empty file".into(),
    })?;
    let first = first.map_err(|e| SftError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let header: SftHeader = serde_json::from_str(&first).map_err(|e| SftError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        detail: e.to_string(),
    })?;

    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| SftError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| SftError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })?,
        );
    }
    Ok((header, records))
}
