//! Loader for the SIMMC 2.1 release layout: one dialogue JSON per split,
//! per-scene JSON files named `<scene_id>_scene.json`, and two metadata
//! files (fashion, furniture) keyed by prefab path.

use super::{
    AttrValue, BBox, CorpusError, CorpusStore, DialogueInstance, Domain, ObjectRecord, SceneRecord,
    Turn,
};
use indexmap::IndexMap;
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Deserialize)]
struct DialogueFile {
    dialogue_data: Vec<RawDialogue>,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Deserialize)]
struct RawDialogue {
    #[serde(default)]
    dialogue_idx: Option<i64>,
    domain: String,
    scene_ids: BTreeMap<String, String>,
    dialogue: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    transcript: String,
    #[serde(default)]
    system_transcript: Option<String>,
    #[serde(default)]
    transcript_annotated: Option<RawAnnotation>,
    #[serde(default)]
    system_transcript_annotated: Option<RawAnnotation>,
    #[serde(default)]
    turn_idx: Option<u32>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    act_attributes: Option<RawActAttributes>,
}

#[derive(Deserialize)]
struct RawActAttributes {
    #[serde(default)]
    objects: Vec<i64>,
}

#[derive(Deserialize)]
struct SceneFile {
    scenes: Vec<RawScene>,
}

#[derive(Deserialize)]
struct RawScene {
    objects: Vec<RawObject>,
}

#[derive(Deserialize)]
struct RawObject {
    prefab_path: String,
    index: i64,
    /// SIMMC bbox order is `[x, y, h, w]`.
    #[serde(default)]
    bbox: Option<Vec<f64>>,
}

type MetadataMap = BTreeMap<String, IndexMap<String, serde_json::Value>>;

/// Load a SIMMC 2.1 split: the dialogue file, the scene directory, and the
/// two per-domain metadata files. Prefab attributes are joined onto each
/// scene object; unknown attribute keys are preserved verbatim.
pub fn load_simmc(
    dialogue_path: &Path,
    scene_dir: &Path,
    fashion_meta_path: &Path,
    furniture_meta_path: &Path,
) -> Result<CorpusStore, CorpusError> {
    let fashion_meta = read_metadata(fashion_meta_path)?;
    let furniture_meta = read_metadata(furniture_meta_path)?;

    let text = read(dialogue_path)?;
    let file_label = dialogue_path.display().to_string();
    let parsed: DialogueFile =
        serde_json::from_str(&text).map_err(|e| CorpusError::MalformedRecord {
            file: file_label.clone(),
            detail: e.to_string(),
        })?;

    let mut scenes: BTreeMap<String, SceneRecord> = BTreeMap::new();
    let mut dialogues = Vec::new();

    for (i, raw) in parsed.dialogue_data.into_iter().enumerate() {
        let domain: Domain = raw
            .domain
            .parse()
            .map_err(|e| CorpusError::MalformedRecord {
                file: file_label.clone(),
                detail: format!("dialogue_data[{i}]: {e}"),
            })?;
        let dialogue_id = match raw.dialogue_idx {
            Some(idx) => format!("simmc_{idx:06}"),
            None => format!("simmc_pos_{i:06}"),
        };

        let mut scene_map = BTreeMap::new();
        for (turn_key, scene_id) in &raw.scene_ids {
            let turn_index: u32 = turn_key.parse().map_err(|_| CorpusError::MalformedRecord {
                file: file_label.clone(),
                detail: format!("dialogue `{dialogue_id}`: non-numeric scene_ids key `{turn_key}`"),
            })?;
            if !scenes.contains_key(scene_id) {
                let scene = load_scene(
                    scene_dir,
                    scene_id,
                    &fashion_meta,
                    &furniture_meta,
                    &dialogue_id,
                )?;
                scenes.insert(scene_id.clone(), scene);
            }
            scene_map.insert(turn_index, scene_id.clone());
        }

        let mut turns = Vec::new();
        for (t, raw_turn) in raw.dialogue.into_iter().enumerate() {
            let turn_index = raw_turn.turn_idx.unwrap_or(t as u32);
            turns.push(Turn {
                turn_index,
                user_utterance: raw_turn.transcript,
                assistant_utterance: raw_turn.system_transcript,
                user_refs: ref_set(&raw_turn.transcript_annotated),
                assistant_refs: ref_set(&raw_turn.system_transcript_annotated),
                meta: BTreeMap::new(),
            });
        }

        dialogues.push(DialogueInstance {
            dialogue_id,
            domain,
            split: parsed.split.clone(),
            scene_map,
            turns,
        });
    }

    Ok(CorpusStore::new(scenes, dialogues))
}

fn ref_set(anno: &Option<RawAnnotation>) -> BTreeSet<u32> {
    anno.as_ref()
        .and_then(|a| a.act_attributes.as_ref())
        .map(|attrs| {
            attrs
                .objects
                .iter()
                .filter(|&&id| id >= 0)
                .map(|&id| id as u32)
                .collect()
        })
        .unwrap_or_default()
}

fn load_scene(
    scene_dir: &Path,
    scene_id: &str,
    fashion_meta: &MetadataMap,
    furniture_meta: &MetadataMap,
    dialogue_id: &str,
) -> Result<SceneRecord, CorpusError> {
    let path = scene_dir.join(format!("{scene_id}_scene.json"));
    if !path.exists() {
        return Err(CorpusError::MissingScene {
            scene_id: scene_id.to_string(),
            dialogue_id: dialogue_id.to_string(),
        });
    }
    let text = read(&path)?;
    let file_label = path.display().to_string();
    let parsed: SceneFile =
        serde_json::from_str(&text).map_err(|e| CorpusError::MalformedRecord {
            file: file_label.clone(),
            detail: e.to_string(),
        })?;
    let raw_scene =
        parsed
            .scenes
            .into_iter()
            .next()
            .ok_or_else(|| CorpusError::MalformedRecord {
                file: file_label.clone(),
                detail: "empty `scenes` list".to_string(),
            })?;

    let mut objects = Vec::new();
    for raw in raw_scene.objects {
        let (domain, attrs) = if let Some(attrs) = fashion_meta.get(&raw.prefab_path) {
            (Domain::Fashion, attrs)
        } else if let Some(attrs) = furniture_meta.get(&raw.prefab_path) {
            (Domain::Furniture, attrs)
        } else {
            return Err(CorpusError::MetadataJoinFailure {
                prefab_key: raw.prefab_path,
                scene_id: scene_id.to_string(),
            });
        };
        let mut attributes = IndexMap::new();
        for (key, value) in attrs {
            attributes.insert(key.clone(), attr_value(value));
        }
        objects.push(ObjectRecord {
            object_id: raw.index.max(0) as u32,
            prefab_key: raw.prefab_path,
            domain,
            attributes,
            bbox: raw.bbox.as_deref().and_then(bbox_from_simmc),
        });
    }
    objects.sort_by_key(|o| o.object_id);

    Ok(SceneRecord {
        scene_id: scene_id.to_string(),
        objects,
        image_extent: None,
    })
}

fn bbox_from_simmc(b: &[f64]) -> Option<BBox> {
    if b.len() != 4 {
        return None;
    }
    // [x, y, h, w] in the release files.
    Some(BBox {
        x: b[0],
        y: b[1],
        w: b[3],
        h: b[2],
    })
}

fn attr_value(value: &serde_json::Value) -> AttrValue {
    match value {
        serde_json::Value::String(s) => AttrValue::Str(s.clone()),
        serde_json::Value::Number(n) => AttrValue::Num(n.as_f64().unwrap_or(0.0)),
        serde_json::Value::Array(items) => AttrValue::List(
            items
                .iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect(),
        ),
        serde_json::Value::Bool(b) => AttrValue::Str(b.to_string()),
        other => AttrValue::Str(other.to_string()),
    }
}

fn read_metadata(path: &Path) -> Result<MetadataMap, CorpusError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| CorpusError::MalformedRecord {
        file: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{units, UnitFilter};

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    /// A two-dialogue fixture in the release layout.
    fn fixture(
        dir: &Path,
    ) -> (
        std::path::PathBuf,
        std::path::PathBuf,
        std::path::PathBuf,
        std::path::PathBuf,
    ) {
        let scene_dir = dir.join("scenes");
        std::fs::create_dir_all(&scene_dir).unwrap();

        let fashion_meta = dir.join("fashion_meta.json");
        write(
            &fashion_meta,
            r#"{
              "cloth/dress_a": {"type": "dress", "color": "white", "pattern": "plain",
                                "brand": "Coast Line", "price": 129.99,
                                "availableSizes": ["S", "M"], "sleeveLength": "short"},
              "cloth/jacket_b": {"type": "jacket", "color": "black", "price": 89.0}
            }"#,
        );
        let furniture_meta = dir.join("furniture_meta.json");
        write(
            &furniture_meta,
            r#"{
              "furn/table_a": {"type": "table", "color": "brown", "materials": "wood",
                               "price": 250, "customerRating": 4.2}
            }"#,
        );

        write(
            &scene_dir.join("shop_a_scene.json"),
            r#"{"scenes": [{"objects": [
                 {"prefab_path": "cloth/dress_a", "index": 0, "bbox": [10, 20, 40, 30]},
                 {"prefab_path": "cloth/jacket_b", "index": 1, "bbox": [50, 20, 40, 30]}
            ]}]}"#,
        );
        write(
            &scene_dir.join("shop_b_scene.json"),
            r#"{"scenes": [{"objects": [
                 {"prefab_path": "furn/table_a", "index": 6, "bbox": [5, 5, 10, 10]}
            ]}]}"#,
        );

        let dialogue_path = dir.join("dialogues.json");
        write(
            &dialogue_path,
            r#"{"split": "devtest", "dialogue_data": [
              {"dialogue_idx": 3, "domain": "fashion",
               "scene_ids": {"0": "shop_a"},
               "dialogue": [
                 {"transcript": "Hi, do you have any jackets today?",
                  "system_transcript": "We have this black one.",
                  "transcript_annotated": {"act_attributes": {"objects": []}},
                  "system_transcript_annotated": {"act_attributes": {"objects": [1]}},
                  "turn_idx": 0},
                 {"transcript": "I like the white dress.",
                  "system_transcript": "Great choice.",
                  "transcript_annotated": {"act_attributes": {"objects": [0]}},
                  "system_transcript_annotated": {"act_attributes": {"objects": [0]}},
                  "turn_idx": 1}
               ]},
              {"dialogue_idx": 7, "domain": "furniture",
               "scene_ids": {"0": "shop_b"},
               "dialogue": [
                 {"transcript": "How much is the brown table?",
                  "system_transcript": "It is 250.",
                  "transcript_annotated": {"act_attributes": {"objects": [6]}},
                  "system_transcript_annotated": {"act_attributes": {"objects": [6]}},
                  "turn_idx": 0}
               ]}
            ]}"#,
        );

        (dialogue_path, scene_dir, fashion_meta, furniture_meta)
    }

    #[test]
    fn loads_release_layout_and_joins_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let (dlg, scenes, fm, um) = fixture(dir.path());
        let store = load_simmc(&dlg, &scenes, &fm, &um).unwrap();
        assert_eq!(store.dialogues.len(), 2);
        assert_eq!(store.scenes.len(), 2);

        let scene = &store.scenes["shop_a"];
        assert_eq!(scene.objects.len(), 2);
        let dress = scene.object(0).unwrap();
        assert_eq!(dress.domain, Domain::Fashion);
        assert_eq!(dress.attr("color"), Some(&AttrValue::Str("white".into())));
        assert_eq!(dress.attr("price"), Some(&AttrValue::Num(129.99)));
        // SIMMC bbox order [x, y, h, w] maps to w=30, h=40.
        assert_eq!(
            dress.bbox,
            Some(BBox {
                x: 10.0,
                y: 20.0,
                w: 30.0,
                h: 40.0
            })
        );

        let us = units(&store, &UnitFilter::default());
        assert_eq!(us.len(), 3);
        assert_eq!(us[0].dialogue_id, "simmc_000003");
        assert!(us[0].gold.is_empty());
        assert_eq!(us[1].gold, [0u32].into_iter().collect());
        assert_eq!(store.dialogues[0].split.as_deref(), Some("devtest"));
    }

    #[test]
    fn empty_dialogue_file_yields_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let (_, scenes, fm, um) = fixture(dir.path());
        let empty = dir.path().join("empty.json");
        write(&empty, r#"{"dialogue_data": []}"#);
        let store = load_simmc(&empty, &scenes, &fm, &um).unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn missing_scene_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let (_, scenes, fm, um) = fixture(dir.path());
        let dlg = dir.path().join("bad.json");
        write(
            &dlg,
            r#"{"dialogue_data": [
              {"dialogue_idx": 1, "domain": "fashion",
               "scene_ids": {"0": "nowhere"},
               "dialogue": [{"transcript": "hi"}]}
            ]}"#,
        );
        let err = load_simmc(&dlg, &scenes, &fm, &um).unwrap_err();
        match err {
            CorpusError::MissingScene { scene_id, .. } => assert_eq!(scene_id, "nowhere"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_prefab_is_a_join_failure() {
        let dir = tempfile::tempdir().unwrap();
        let (_, scenes, fm, um) = fixture(dir.path());
        write(
            &scenes.join("shop_c_scene.json"),
            r#"{"scenes": [{"objects": [{"prefab_path": "ghost/x", "index": 0}]}]}"#,
        );
        let dlg = dir.path().join("c.json");
        write(
            &dlg,
            r#"{"dialogue_data": [
              {"dialogue_idx": 2, "domain": "fashion",
               "scene_ids": {"0": "shop_c"},
               "dialogue": [{"transcript": "hi"}]}
            ]}"#,
        );
        let err = load_simmc(&dlg, &scenes, &fm, &um).unwrap_err();
        match err {
            CorpusError::MetadataJoinFailure { prefab_key, .. } => {
                assert_eq!(prefab_key, "ghost/x");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
