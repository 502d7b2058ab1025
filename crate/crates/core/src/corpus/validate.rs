//! Store integrity validation. Validation never aborts: every invariant
//! violation is collected as a located finding.

use super::{AttrValue, CorpusStore, Domain};
use serde::{Deserialize, Serialize};
use std::fmt;

/// One invariant violation with its location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Finding {
    GoldOutOfScene {
        dialogue_id: String,
        turn_index: u32,
        object_id: u32,
        scene_id: String,
    },
    BboxOutOfExtent {
        scene_id: String,
        object_id: u32,
    },
    NonMonotoneTurnIndex {
        dialogue_id: String,
        turn_index: u32,
    },
    MissingSceneForTurnZero {
        dialogue_id: String,
    },
    UnresolvableScene {
        dialogue_id: String,
        turn_index: u32,
        scene_id: String,
    },
    DuplicateObjectId {
        scene_id: String,
        object_id: u32,
    },
    ForeignAttribute {
        scene_id: String,
        object_id: u32,
        attribute: String,
    },
    NegativeValue {
        scene_id: String,
        object_id: u32,
        attribute: String,
    },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::GoldOutOfScene {
                dialogue_id,
                turn_index,
                object_id,
                scene_id,
            } => write!(
                f,
                "{dialogue_id}:{turn_index}: gold object {object_id} not in scene {scene_id}"
            ),
            Finding::BboxOutOfExtent {
                scene_id,
                object_id,
            } => {
                write!(
                    f,
                    "{scene_id}: object {object_id} bbox exceeds image extent"
                )
            }
            Finding::NonMonotoneTurnIndex {
                dialogue_id,
                turn_index,
            } => {
                write!(
                    f,
                    "{dialogue_id}: turn index {turn_index} not strictly increasing"
                )
            }
            Finding::MissingSceneForTurnZero { dialogue_id } => {
                write!(f, "{dialogue_id}: scene_map has no entry for turn 0")
            }
            Finding::UnresolvableScene {
                dialogue_id,
                turn_index,
                scene_id,
            } => write!(
                f,
                "{dialogue_id}:{turn_index}: scene `{scene_id}` not in the scene store"
            ),
            Finding::DuplicateObjectId {
                scene_id,
                object_id,
            } => {
                write!(f, "{scene_id}: duplicate object_id {object_id}")
            }
            Finding::ForeignAttribute {
                scene_id,
                object_id,
                attribute,
            } => write!(
                f,
                "{scene_id}: object {object_id} carries `{attribute}` from the other domain"
            ),
            Finding::NegativeValue {
                scene_id,
                object_id,
                attribute,
            } => {
                write!(
                    f,
                    "{scene_id}: object {object_id} has negative `{attribute}`"
                )
            }
        }
    }
}

/// Result of [`validate`]: empty iff the store is clean.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return write!(f, "clean");
        }
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        Ok(())
    }
}

/// Check every store invariant and report all violations.
pub fn validate(store: &CorpusStore) -> ValidationReport {
    let mut findings = Vec::new();

    for (scene_id, scene) in &store.scenes {
        let mut seen = std::collections::BTreeSet::new();
        for obj in &scene.objects {
            if !seen.insert(obj.object_id) {
                findings.push(Finding::DuplicateObjectId {
                    scene_id: scene_id.clone(),
                    object_id: obj.object_id,
                });
            }
            if let (Some(bbox), Some((w, h))) = (obj.bbox, scene.image_extent) {
                if bbox.x < 0.0 || bbox.y < 0.0 || bbox.x + bbox.w > w || bbox.y + bbox.h > h {
                    findings.push(Finding::BboxOutOfExtent {
                        scene_id: scene_id.clone(),
                        object_id: obj.object_id,
                    });
                }
            }
            let foreign = match obj.domain {
                Domain::Fashion => "materials",
                Domain::Furniture => "sleeveLength",
            };
            if obj.attributes.contains_key(foreign) {
                findings.push(Finding::ForeignAttribute {
                    scene_id: scene_id.clone(),
                    object_id: obj.object_id,
                    attribute: foreign.to_string(),
                });
            }
            for key in ["price", "customerReview", "customerRating"] {
                if let Some(AttrValue::Num(n)) = obj.attr(key) {
                    if *n < 0.0 {
                        findings.push(Finding::NegativeValue {
                            scene_id: scene_id.clone(),
                            object_id: obj.object_id,
                            attribute: key.to_string(),
                        });
                    }
                }
            }
        }
    }

    for dlg in &store.dialogues {
        if !dlg.scene_map.contains_key(&0) {
            findings.push(Finding::MissingSceneForTurnZero {
                dialogue_id: dlg.dialogue_id.clone(),
            });
        }
        for (turn_index, scene_id) in &dlg.scene_map {
            if !store.scenes.contains_key(scene_id) {
                findings.push(Finding::UnresolvableScene {
                    dialogue_id: dlg.dialogue_id.clone(),
                    turn_index: *turn_index,
                    scene_id: scene_id.clone(),
                });
            }
        }
        let mut prev: Option<u32> = None;
        for turn in &dlg.turns {
            if let Some(p) = prev {
                if turn.turn_index <= p {
                    findings.push(Finding::NonMonotoneTurnIndex {
                        dialogue_id: dlg.dialogue_id.clone(),
                        turn_index: turn.turn_index,
                    });
                }
            }
            prev = Some(turn.turn_index);

            let scene = dlg
                .scene_id_at(turn.turn_index)
                .and_then(|id| store.scenes.get(id));
            let Some(scene) = scene else { continue };
            let ids = scene.object_ids();
            for refs in [&turn.user_refs, &turn.assistant_refs] {
                for &object_id in refs {
                    if !ids.contains(&object_id) {
                        findings.push(Finding::GoldOutOfScene {
                            dialogue_id: dlg.dialogue_id.clone(),
                            turn_index: turn.turn_index,
                            object_id,
                            scene_id: scene.scene_id.clone(),
                        });
                    }
                }
            }
        }
    }

    ValidationReport { findings }
}
