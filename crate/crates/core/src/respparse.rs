//! Extraction of referenced object ids from raw model output.
//!
//! The answer grammar is the last well-formed `<SOM> … <EOM>` block in the
//! text; reasoning modes emit deliberation first and the final answer last,
//! and reasoning traces may quote marker blocks from the prompt history.

use crate::corpus::SceneRecord;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const SOM: &str = "<SOM>";
pub const EOM: &str = "<EOM>";

/// Parse status flags. `ok` means none of them fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStatus {
    /// No `<SOM> … <EOM>` block found anywhere.
    pub missing_markers: bool,
    /// The selected block contained non-integer tokens (skipped).
    pub invalid_tokens: bool,
    /// The selected block contained no tokens at all.
    pub empty_answer: bool,
}

impl ParseStatus {
    pub fn is_ok(&self) -> bool {
        !self.missing_markers && !self.invalid_tokens && !self.empty_answer
    }
}

/// Ids extracted from a model response plus diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    /// Deduplicated, ascending.
    pub ids: BTreeSet<u32>,
    pub status: ParseStatus,
    /// The matched block including its tags, when one was found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_span: Option<String>,
}

/// Render an id set in the canonical marker format: ascending,
/// comma-separated, no spaces. The empty set renders `<SOM><EOM>`.
pub fn render_mentions<I: IntoIterator<Item = u32>>(ids: I) -> String {
    let sorted: BTreeSet<u32> = ids.into_iter().collect();
    let body = sorted
        .iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!("{SOM}{body}{EOM}")
}

/// Extract the referenced ids from arbitrary text. Total: never fails,
/// all failure shapes are status flags.
pub fn extract_mentions(text: &str) -> ParseResult {
    // Last <SOM> that is followed by an <EOM> wins.
    let mut block: Option<(usize, usize)> = None;
    let mut search_from = 0;
    while let Some(start_rel) = text[search_from..].find(SOM) {
        let start = search_from + start_rel;
        let body_start = start + SOM.len();
        if let Some(end_rel) = text[body_start..].find(EOM) {
            block = Some((start, body_start + end_rel));
        }
        search_from = body_start;
    }

    let Some((start, body_end)) = block else {
        return ParseResult {
            ids: BTreeSet::new(),
            status: ParseStatus {
                missing_markers: true,
                ..Default::default()
            },
            raw_span: None,
        };
    };

    let body = &text[start + SOM.len()..body_end];
    let raw_span = Some(text[start..body_end + EOM.len()].to_string());

    let mut ids = BTreeSet::new();
    let mut invalid_tokens = false;
    let mut saw_token = false;
    for token in body.split(|c: char| c == ',' || c.is_whitespace()) {
        if token.is_empty() {
            continue;
        }
        saw_token = true;
        match token.parse::<u32>() {
            Ok(id) => {
                ids.insert(id);
            }
            Err(_) => invalid_tokens = true,
        }
    }

    ParseResult {
        ids,
        status: ParseStatus {
            missing_markers: false,
            invalid_tokens,
            empty_answer: !saw_token,
        },
        raw_span,
    }
}

/// Split predicted ids into those present in the scene and those that
/// reference nonexistent objects.
pub fn validate_ids(ids: &BTreeSet<u32>, scene: &SceneRecord) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let scene_ids = scene.object_ids();
    let valid: BTreeSet<u32> = ids.intersection(&scene_ids).copied().collect();
    let dropped: BTreeSet<u32> = ids.difference(&scene_ids).copied().collect();
    (valid, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, ObjectRecord, SceneRecord};
    use indexmap::IndexMap;

    fn ids(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn answer_after_reasoning_is_extracted() {
        let r = extract_mentions("step 1 … the brown table maps to id 6. <SOM>6<EOM>");
        assert_eq!(r.ids, ids(&[6]));
        assert!(r.status.is_ok());
        assert_eq!(r.raw_span.as_deref(), Some("<SOM>6<EOM>"));
    }

    #[test]
    fn empty_block_is_empty_answer() {
        let r = extract_mentions("<SOM><EOM>");
        assert!(r.ids.is_empty());
        assert!(r.status.empty_answer);
        assert!(!r.status.missing_markers);
    }

    #[test]
    fn invalid_tokens_are_skipped_and_flagged() {
        let r = extract_mentions("<SOM>2, 2, x, 5<EOM>");
        assert_eq!(r.ids, ids(&[2, 5]));
        assert!(r.status.invalid_tokens);
        assert!(!r.status.empty_answer);
    }

    #[test]
    fn last_block_wins() {
        let r = extract_mentions("history echo <SOM>3<EOM> … final answer <SOM>7,9<EOM>");
        assert_eq!(r.ids, ids(&[7, 9]));
    }

    #[test]
    fn no_block_is_missing_markers() {
        let r = extract_mentions("I think the answer is 6.");
        assert!(r.status.missing_markers);
        assert!(r.ids.is_empty());
        assert!(r.raw_span.is_none());
    }

    #[test]
    fn unclosed_block_falls_back_to_previous() {
        let r = extract_mentions("<SOM>1<EOM> and then <SOM>2, 3");
        assert_eq!(r.ids, ids(&[1]));
    }

    #[test]
    fn whitespace_inside_block_is_tolerated() {
        let r = extract_mentions("<SOM> 4 ,\n 8 <EOM>");
        assert_eq!(r.ids, ids(&[4, 8]));
        assert!(r.status.is_ok());
    }

    #[test]
    fn render_is_canonical() {
        assert_eq!(render_mentions([9, 2, 2, 5]), "<SOM>2,5,9<EOM>");
        assert_eq!(render_mentions([]), "<SOM><EOM>");
    }

    #[test]
    fn render_parse_round_trip() {
        let set = ids(&[0, 3, 12, 99]);
        let r = extract_mentions(&render_mentions(set.clone()));
        assert_eq!(r.ids, set);
        assert!(r.status.is_ok());
        let empty = extract_mentions(&render_mentions([]));
        assert!(empty.ids.is_empty());
        assert!(empty.status.empty_answer);
    }

    #[test]
    fn out_of_scene_ids_are_dropped() {
        let scene = SceneRecord {
            scene_id: "s".into(),
            objects: (0..10)
                .map(|i| ObjectRecord {
                    object_id: i,
                    prefab_key: String::new(),
                    domain: Domain::Fashion,
                    attributes: IndexMap::new(),
                    bbox: None,
                })
                .collect(),
            image_extent: None,
        };
        let (valid, dropped) = validate_ids(&ids(&[6]), &scene);
        assert_eq!(valid, ids(&[6]));
        assert!(dropped.is_empty());

        let (valid, dropped) = validate_ids(&ids(&[99]), &scene);
        assert!(valid.is_empty());
        assert_eq!(dropped, ids(&[99]));

        let (valid, dropped) = validate_ids(&ids(&[]), &scene);
        assert!(valid.is_empty());
        assert!(dropped.is_empty());
    }
}
