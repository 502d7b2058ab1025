//! The harness's self-contained corpus format: one JSON document embedding
//! dialogues, scenes, and joined metadata.
//!
//! Layout (`format_version` 1):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "scenes": { "<scene_id>": { ... SceneRecord ... } },
//!   "dialogues": [ { ... DialogueInstance ... } ]
//! }
//! ```
//!
//! Writing is canonical (sorted maps, sorted dialogues, two-space pretty
//! printing), so write → load → write is byte-idempotent.

use super::{CorpusError, CorpusStore, DialogueInstance, SceneRecord};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const NATIVE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NativeFile {
    format_version: u32,
    scenes: BTreeMap<String, SceneRecord>,
    dialogues: Vec<DialogueInstance>,
}

/// Load a native-format corpus file.
pub fn load_native(path: &Path) -> Result<CorpusStore, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_native(&text, &path.display().to_string())
}

/// Parse native-format corpus text; `file` labels error messages.
pub fn parse_native(text: &str, file: &str) -> Result<CorpusStore, CorpusError> {
    let parsed: NativeFile = serde_json::from_str(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        CorpusError::MalformedRecord {
            file: file.to_string(),
            detail: format!("{e} (byte offset {offset})"),
        }
    })?;
    if parsed.format_version != NATIVE_FORMAT_VERSION {
        return Err(CorpusError::MalformedRecord {
            file: file.to_string(),
            detail: format!(
                "unsupported format_version {} (expected {NATIVE_FORMAT_VERSION})",
                parsed.format_version
            ),
        });
    }
    let mut seen = BTreeSet::new();
    for d in &parsed.dialogues {
        if !seen.insert(d.dialogue_id.clone()) {
            return Err(CorpusError::MalformedRecord {
                file: file.to_string(),
                detail: format!("duplicate dialogue_id `{}`", d.dialogue_id),
            });
        }
    }
    for (key, scene) in &parsed.scenes {
        if key != &scene.scene_id {
            return Err(CorpusError::MalformedRecord {
                file: file.to_string(),
                detail: format!(
                    "scene map key `{key}` does not match scene_id `{}`",
                    scene.scene_id
                ),
            });
        }
    }
    Ok(CorpusStore::new(parsed.scenes, parsed.dialogues))
}

/// Serialize a store in the canonical native form.
pub fn to_native_string(store: &CorpusStore) -> String {
    let file = NativeFile {
        format_version: NATIVE_FORMAT_VERSION,
        scenes: store.scenes.clone(),
        dialogues: {
            let mut d = store.dialogues.clone();
            d.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
            d
        },
    };
    let mut out = serde_json::to_string_pretty(&file).expect("store serializes");
    out.push('\n');
    out
}

/// Write a store to `path` in the native format.
pub fn write_native(store: &CorpusStore, path: &Path) -> Result<(), CorpusError> {
    std::fs::write(path, to_native_string(store)).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Byte offset of a 1-based (line, column) position within `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut remaining = line.saturating_sub(1);
    let mut offset = 0;
    for (i, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            offset = i + 1;
        }
    }
    offset + column.saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Turn};
    use indexmap::IndexMap;

    fn store() -> CorpusStore {
        let scene = SceneRecord {
            scene_id: "s0".into(),
            objects: vec![crate::corpus::ObjectRecord {
                object_id: 0,
                prefab_key: "p0".into(),
                domain: Domain::Furniture,
                attributes: IndexMap::from([(
                    "type".to_string(),
                    crate::corpus::AttrValue::Str("table".into()),
                )]),
                bbox: None,
            }],
            image_extent: None,
        };
        let dlg = DialogueInstance {
            dialogue_id: "d0".into(),
            domain: Domain::Furniture,
            split: Some("train".into()),
            scene_map: [(0u32, "s0".to_string())].into_iter().collect(),
            turns: vec![Turn {
                turn_index: 0,
                user_utterance: "the table".into(),
                assistant_utterance: None,
                user_refs: [0u32].into_iter().collect(),
                assistant_refs: Default::default(),
                meta: Default::default(),
            }],
        };
        CorpusStore::new([("s0".to_string(), scene)].into_iter().collect(), vec![dlg])
    }

    #[test]
    fn round_trip_preserves_store() {
        let s = store();
        let text = to_native_string(&s);
        let loaded = parse_native(&text, "<mem>").unwrap();
        assert_eq!(loaded, s);
    }

    #[test]
    fn write_load_write_is_byte_identical() {
        let s = store();
        let once = to_native_string(&s);
        let twice = to_native_string(&parse_native(&once, "<mem>").unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn duplicate_dialogue_id_is_malformed() {
        let mut s = store();
        let dup = s.dialogues[0].clone();
        s.dialogues.push(dup);
        let text = to_native_string(&s);
        let err = parse_native(&text, "<mem>").unwrap_err();
        match err {
            CorpusError::MalformedRecord { detail, .. } => {
                assert!(detail.contains("duplicate dialogue_id"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let text = to_native_string(&store());
        let cut = &text[..text.len() / 2];
        let err = parse_native(cut, "<mem>").unwrap_err();
        match err {
            CorpusError::MalformedRecord { detail, .. } => {
                assert!(detail.contains("byte offset"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let text =
            to_native_string(&store()).replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(parse_native(&text, "<mem>").is_err());
    }

    #[test]
    fn byte_offset_counts_lines() {
        let text = "ab\ncd\nef";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 2), 4);
        assert_eq!(byte_offset(text, 3, 1), 6);
    }
}
