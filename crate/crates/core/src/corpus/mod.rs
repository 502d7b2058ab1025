//! Domain types for dialogues, scenes, and object metadata, plus corpus
//! ingestion and integrity validation.
//!
//! Two on-disk layouts are supported: the SIMMC 2.1 release layout
//! ([`load_simmc`]) and the harness's own self-contained native format
//! ([`load_native`] / [`write_native`]).

mod native;
mod simmc;
mod validate;

pub use native::{load_native, write_native, NATIVE_FORMAT_VERSION};
pub use simmc::load_simmc;
pub use validate::{validate, Finding, ValidationReport};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use thiserror::Error;

/// The two object domains of the corpus. Their object inventories are
/// fully disjoint, which is what makes cross-domain evaluation meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Fashion,
    Furniture,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Fashion => write!(f, "fashion"),
            Domain::Furniture => write!(f, "furniture"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fashion" => Ok(Domain::Fashion),
            "furniture" => Ok(Domain::Furniture),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// A metadata attribute value. Values stay typed so the serializers decide
/// formatting, not the loader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Str(String),
    Num(f64),
    List(Vec<String>),
}

impl AttrValue {
    /// Canonical one-line rendering: integral numbers drop the fraction,
    /// lists join with ", ".
    pub fn render(&self) -> String {
        match self {
            AttrValue::Str(s) => s.clone(),
            AttrValue::Num(n) => {
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    format!("{}", *n as i64)
                } else {
                    format!("{n}")
                }
            }
            AttrValue::List(items) => items.join(", "),
        }
    }
}

/// Object bounding box in image pixels: origin at the top-left corner,
/// y growing downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// One candidate object of a scene together with its joined metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    /// Scene-local index the model refers to in `<SOM>…<EOM>` answers.
    pub object_id: u32,
    /// Metadata lookup key (prefab path in the SIMMC layout).
    pub prefab_key: String,
    pub domain: Domain,
    /// Attribute map in source order; unknown keys are preserved verbatim.
    pub attributes: IndexMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl ObjectRecord {
    /// Attribute lookup by key.
    pub fn attr(&self, key: &str) -> Option<&AttrValue> {
        self.attributes.get(key)
    }
}

/// The set of candidate objects visible in one environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    /// Objects sorted by `object_id` ascending.
    pub objects: Vec<ObjectRecord>,
    /// Image width and height in pixels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_extent: Option<(f64, f64)>,
}

impl SceneRecord {
    pub fn object_ids(&self) -> BTreeSet<u32> {
        self.objects.iter().map(|o| o.object_id).collect()
    }

    pub fn object(&self, id: u32) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.object_id == id)
    }
}

/// One dialogue turn: the user utterance, the assistant reply, and the gold
/// reference sets for both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: u32,
    pub user_utterance: String,
    /// Absent on a trailing user-only turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_utterance: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub user_refs: BTreeSet<u32>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub assistant_refs: BTreeSet<u32>,
    /// Free-form annotations (the synthetic generator records its utterance
    /// template kind here). Never rendered into prompts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

/// A multi-turn dialogue grounded in one or more scenes. The scene active
/// at turn `t` is the `scene_map` entry with the largest key `<= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub dialogue_id: String,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub scene_map: BTreeMap<u32, String>,
    pub turns: Vec<Turn>,
}

impl DialogueInstance {
    /// Scene id active at the given turn.
    pub fn scene_id_at(&self, turn_index: u32) -> Option<&str> {
        self.scene_map
            .range(..=turn_index)
            .next_back()
            .map(|(_, id)| id.as_str())
    }
}

/// An immutable, validated collection of dialogues and scenes. Safe for
/// concurrent read by many workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStore {
    pub scenes: BTreeMap<String, SceneRecord>,
    /// Kept sorted by `dialogue_id` (lexicographic).
    pub dialogues: Vec<DialogueInstance>,
}

impl CorpusStore {
    pub fn new(
        scenes: BTreeMap<String, SceneRecord>,
        mut dialogues: Vec<DialogueInstance>,
    ) -> Self {
        dialogues.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
        CorpusStore { scenes, dialogues }
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty() && self.scenes.is_empty()
    }

    /// Content hash of the whole store, used to key run ids.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("store serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_encode(&hasher.finalize())
    }

    /// Merge two stores; dialogue and scene ids must be disjoint.
    pub fn merge(mut self, other: CorpusStore) -> Result<CorpusStore, CorpusError> {
        for (id, scene) in other.scenes {
            if self.scenes.contains_key(&id) {
                return Err(CorpusError::MalformedRecord {
                    file: "<merge>".into(),
                    detail: format!("duplicate scene_id `{id}`"),
                });
            }
            self.scenes.insert(id, scene);
        }
        let mut dialogues = self.dialogues;
        for d in other.dialogues {
            if dialogues.iter().any(|x| x.dialogue_id == d.dialogue_id) {
                return Err(CorpusError::MalformedRecord {
                    file: "<merge>".into(),
                    detail: format!("duplicate dialogue_id `{}`", d.dialogue_id),
                });
            }
            dialogues.push(d);
        }
        Ok(CorpusStore::new(self.scenes, dialogues))
    }
}

pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

/// One prediction instance: everything needed to render a prompt for turn
/// `t` of a dialogue and to score the answer against the gold set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalUnit {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub domain: Domain,
    /// Complete turns before the current one.
    pub history: Vec<Turn>,
    /// The user utterance under evaluation (u_t).
    pub current_utterance: String,
    pub scene: SceneRecord,
    /// User-side gold reference set of turn t. Always a subset of the
    /// scene's object ids in a valid store.
    pub gold: BTreeSet<u32>,
    /// Turn annotations carried over from the source turn.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl EvalUnit {
    /// `dialogue_id:turn_index`, the unit's human-readable address.
    pub fn key(&self) -> String {
        format!("{}:{}", self.dialogue_id, self.turn_index)
    }

    pub fn is_unambiguous(&self) -> bool {
        self.meta
            .get("unambiguous")
            .map(|v| v == "true")
            .unwrap_or(false)
    }
}

/// Selection filter for [`units`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<BTreeSet<Domain>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_units: Option<usize>,
}

/// Expand a store into evaluation units, one per user turn. Turns whose
/// gold set is empty are first-class units. Order is deterministic:
/// dialogue_id lexicographic, then turn_index ascending.
pub fn units(store: &CorpusStore, filter: &UnitFilter) -> Vec<EvalUnit> {
    let mut out = Vec::new();
    // store.dialogues is already sorted by dialogue_id.
    for dlg in &store.dialogues {
        if let Some(domains) = &filter.domains {
            if !domains.contains(&dlg.domain) {
                continue;
            }
        }
        if let Some(split) = &filter.split {
            if dlg.split.as_deref() != Some(split.as_str()) {
                continue;
            }
        }
        for (i, turn) in dlg.turns.iter().enumerate() {
            if let Some(max) = filter.max_units {
                if out.len() >= max {
                    return out;
                }
            }
            let scene = dlg
                .scene_id_at(turn.turn_index)
                .and_then(|id| store.scenes.get(id));
            let Some(scene) = scene else { continue };
            out.push(EvalUnit {
                dialogue_id: dlg.dialogue_id.clone(),
                turn_index: turn.turn_index,
                domain: dlg.domain,
                history: dlg.turns[..i].to_vec(),
                current_utterance: turn.user_utterance.clone(),
                scene: scene.clone(),
                gold: turn.user_refs.clone(),
                meta: turn.meta.clone(),
            });
        }
    }
    out
}

/// Errors surfaced by corpus ingestion.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing scene `{scene_id}` referenced by dialogue `{dialogue_id}`")]
    MissingScene {
        scene_id: String,
        dialogue_id: String,
    },

    #[error("malformed record in {file}: {detail}")]
    MalformedRecord { file: String, detail: String },

    #[error("metadata join failure: prefab key `{prefab_key}` not found (scene `{scene_id}`)")]
    MetadataJoinFailure {
        prefab_key: String,
        scene_id: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
