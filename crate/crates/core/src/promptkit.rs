//! Prompt assembly for an evaluation unit under a (mode, ablation,
//! metadata style) configuration: task instructions, the five-step
//! deliberation scaffold, the few-shot example bank, and dialogue-history
//! rendering with `<SOM>…<EOM>` mention markers.
//!
//! All text comes from data assets. The copies compiled into the binary
//! are the checked-in files under `assets/prompts/`; an assets directory
//! can replace them at runtime without recompilation.

use crate::corpus::{Domain, EvalUnit, Turn};
use crate::respparse::{extract_mentions, render_mentions, EOM, SOM};
use crate::serialize::{render_scene_with, MetadataStyle, NlTemplates};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

/// The line the model is expected to continue with its answer.
pub const ANSWER_CUE: &str = "Assistant reference ids:";

/// Prompt completion strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
    FewShotReasoning,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [
        PromptMode::ZeroShot,
        PromptMode::FewShot,
        PromptMode::FewShotReasoning,
    ];
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptMode::ZeroShot => write!(f, "zero-shot"),
            PromptMode::FewShot => write!(f, "few-shot"),
            PromptMode::FewShotReasoning => write!(f, "few-shot-reasoning"),
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "zero-shot" | "zeroshot" => Ok(PromptMode::ZeroShot),
            "few-shot" | "fewshot" => Ok(PromptMode::FewShot),
            "few-shot-reasoning" | "reasoning" => Ok(PromptMode::FewShotReasoning),
            other => Err(format!("unknown prompt mode `{other}`")),
        }
    }
}

/// Information-access ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationConfig {
    /// Full access: metadata and history mention markers.
    AllInfo,
    /// Scene metadata withheld everywhere in the prompt body.
    NoMetadata,
    /// All `<SOM>…<EOM>` mention syntax stripped from the prompt body.
    NoObjectReferences,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 3] = [
        AblationConfig::AllInfo,
        AblationConfig::NoMetadata,
        AblationConfig::NoObjectReferences,
    ];
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationConfig::AllInfo => write!(f, "all-info"),
            AblationConfig::NoMetadata => write!(f, "no-metadata"),
            AblationConfig::NoObjectReferences => write!(f, "no-object-references"),
        }
    }
}

impl std::str::FromStr for AblationConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "all-info" | "all" => Ok(AblationConfig::AllInfo),
            "no-metadata" => Ok(AblationConfig::NoMetadata),
            "no-object-references" | "no-objects" => Ok(AblationConfig::NoObjectReferences),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

/// The scenario a few-shot example demonstrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleTag {
    NoReference,
    PreviouslyMentioned,
    FirstMention,
}

impl ExampleTag {
    pub const ALL: [ExampleTag; 3] = [
        ExampleTag::NoReference,
        ExampleTag::PreviouslyMentioned,
        ExampleTag::FirstMention,
    ];

    fn asset_stem(&self) -> &'static str {
        match self {
            ExampleTag::NoReference => "no_reference",
            ExampleTag::PreviouslyMentioned => "previously_mentioned",
            ExampleTag::FirstMention => "first_mention",
        }
    }
}

/// One few-shot demonstration, metadata already rendered in a concrete
/// style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub tag: ExampleTag,
    pub domain: Domain,
    pub scene_text: String,
    /// Ends with the example's final `User:` line.
    pub history_text: String,
    /// Canonical `<SOM>…<EOM>` string.
    pub answer: String,
    /// Included only in the reasoning mode.
    pub reasoning_text: Option<String>,
}

/// A fully assembled prompt plus its content fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    /// SHA-256 over both texts; changes iff any text changes.
    pub fingerprint: String,
}

impl PromptBundle {
    fn new(system_text: String, user_text: String) -> PromptBundle {
        let mut hasher = Sha256::new();
        hasher.update(system_text.as_bytes());
        hasher.update([0x1f]);
        hasher.update(user_text.as_bytes());
        let fingerprint = crate::corpus::hex_encode(&hasher.finalize());
        PromptBundle {
            system_text,
            user_text,
            fingerprint,
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("few-shot mode requires a non-empty example bank")]
    EmptyBank,
    #[error("prompt asset missing: {path}")]
    AssetMissing { path: String },
    #[error("prompt asset `{path}` is malformed: {detail}")]
    MalformedAsset { path: String, detail: String },
}

#[derive(Debug, Clone)]
struct RawExample {
    domain: Domain,
    scene_text: String,
    history_text: String,
    reasoning_text: String,
    answer: String,
}

/// The loaded prompt texts: instructions, reasoning steps, the few-shot
/// bank per style, and the sentence templates for the full-NL style.
#[derive(Debug, Clone)]
pub struct PromptAssets {
    instructions: String,
    reasoning_steps: String,
    fewshot: BTreeMap<(ExampleTag, MetadataStyle), RawExample>,
    nl_templates: NlTemplates,
}

const BUILTIN_INSTRUCTIONS: &str = include_str!("../assets/prompts/instructions.txt");
const BUILTIN_REASONING: &str = include_str!("../assets/prompts/reasoning_steps.txt");

macro_rules! builtin_fewshot {
    ($($tag:ident, $style:ident => $path:literal;)*) => {
        [$((ExampleTag::$tag, MetadataStyle::$style, include_str!($path)),)*]
    };
}

const BUILTIN_FEWSHOT: [(ExampleTag, MetadataStyle, &str); 9] = builtin_fewshot![
    NoReference, StructuredRaw => "../assets/prompts/fewshot/no_reference.structured_raw.txt";
    NoReference, StructuredNlCoords => "../assets/prompts/fewshot/no_reference.structured_nl_coords.txt";
    NoReference, FullNl => "../assets/prompts/fewshot/no_reference.full_nl.txt";
    PreviouslyMentioned, StructuredRaw => "../assets/prompts/fewshot/previously_mentioned.structured_raw.txt";
    PreviouslyMentioned, StructuredNlCoords => "../assets/prompts/fewshot/previously_mentioned.structured_nl_coords.txt";
    PreviouslyMentioned, FullNl => "../assets/prompts/fewshot/previously_mentioned.full_nl.txt";
    FirstMention, StructuredRaw => "../assets/prompts/fewshot/first_mention.structured_raw.txt";
    FirstMention, StructuredNlCoords => "../assets/prompts/fewshot/first_mention.structured_nl_coords.txt";
    FirstMention, FullNl => "../assets/prompts/fewshot/first_mention.full_nl.txt";
];

impl PromptAssets {
    /// The assets compiled into the binary.
    pub fn builtin() -> &'static PromptAssets {
        static BUILTIN: OnceLock<PromptAssets> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            let mut fewshot = BTreeMap::new();
            for (tag, style, text) in BUILTIN_FEWSHOT {
                let raw = parse_example(text, tag.asset_stem()).expect("builtin example parses");
                fewshot.insert((tag, style), raw);
            }
            PromptAssets {
                instructions: BUILTIN_INSTRUCTIONS.trim_end().to_string(),
                reasoning_steps: BUILTIN_REASONING.trim_end().to_string(),
                fewshot,
                nl_templates: NlTemplates::builtin().clone(),
            }
        })
    }

    /// Load an assets directory laid out like `assets/prompts/`:
    /// `instructions.txt`, `reasoning_steps.txt`, `fewshot/<tag>.<style>.txt`,
    /// and optionally `templates/fullnl.<domain>.txt`.
    pub fn load(dir: &Path) -> Result<PromptAssets, PromptError> {
        let read = |rel: String| -> Result<String, PromptError> {
            let path = dir.join(&rel);
            std::fs::read_to_string(&path).map_err(|_| PromptError::AssetMissing {
                path: path.display().to_string(),
            })
        };
        let mut fewshot = BTreeMap::new();
        for tag in ExampleTag::ALL {
            for style in MetadataStyle::ALL {
                let rel = format!("fewshot/{}.{style}.txt", tag.asset_stem());
                let raw = parse_example(&read(rel.clone())?, &rel)?;
                fewshot.insert((tag, style), raw);
            }
        }
        let templates_dir = dir.join("templates");
        let nl_templates = if templates_dir.is_dir() {
            NlTemplates::load(&templates_dir).map_err(|e| PromptError::MalformedAsset {
                path: templates_dir.display().to_string(),
                detail: e.to_string(),
            })?
        } else {
            NlTemplates::builtin().clone()
        };
        Ok(PromptAssets {
            instructions: read("instructions.txt".into())?.trim_end().to_string(),
            reasoning_steps: read("reasoning_steps.txt".into())?.trim_end().to_string(),
            fewshot,
            nl_templates,
        })
    }

    pub fn instructions(&self) -> &str {
        &self.instructions
    }

    pub fn nl_templates(&self) -> &NlTemplates {
        &self.nl_templates
    }

    /// SHA-256 over every asset text, pinned by golden tests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.instructions.as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.reasoning_steps.as_bytes());
        for ((tag, style), raw) in &self.fewshot {
            hasher.update(format!("\x1f{:?}/{style}\x1f", tag).as_bytes());
            hasher.update(raw.scene_text.as_bytes());
            hasher.update([0x1f]);
            hasher.update(raw.history_text.as_bytes());
            hasher.update([0x1f]);
            hasher.update(raw.reasoning_text.as_bytes());
            hasher.update([0x1f]);
            hasher.update(raw.answer.as_bytes());
        }
        crate::corpus::hex_encode(&hasher.finalize())
    }
}

/// Parse the sectioned few-shot asset format (`@@ <section>` headers).
fn parse_example(text: &str, path: &str) -> Result<RawExample, PromptError> {
    let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("@@ ") {
            current = Some(name.trim().to_string());
            sections.entry(name.trim().to_string()).or_default();
        } else if let Some(name) = &current {
            sections.get_mut(name).expect("section exists").push(line);
        }
    }
    let get = |name: &str| -> Result<String, PromptError> {
        sections
            .get(name)
            .map(|lines| lines.join("\n").trim_end().to_string())
            .ok_or_else(|| PromptError::MalformedAsset {
                path: path.to_string(),
                detail: format!("missing `@@ {name}` section"),
            })
    };
    let domain: Domain =
        get("domain")?
            .parse()
            .map_err(|e: String| PromptError::MalformedAsset {
                path: path.to_string(),
                detail: e,
            })?;
    Ok(RawExample {
        domain,
        scene_text: get("scene")?,
        history_text: get("history")?,
        reasoning_text: get("reasoning")?,
        answer: get("answer")?,
    })
}

/// The default three-example bank for a style, in fixed order:
/// no-reference, previously-mentioned, first-mention.
pub fn default_fewshot_bank(
    style: MetadataStyle,
    assets: &PromptAssets,
) -> Result<Vec<FewShotExample>, PromptError> {
    let mut bank = Vec::with_capacity(3);
    for tag in ExampleTag::ALL {
        let raw = assets
            .fewshot
            .get(&(tag, style))
            .ok_or_else(|| PromptError::AssetMissing {
                path: format!("fewshot/{}.{style}.txt", tag.asset_stem()),
            })?;
        bank.push(FewShotExample {
            tag,
            domain: raw.domain,
            scene_text: raw.scene_text.clone(),
            history_text: raw.history_text.clone(),
            answer: raw.answer.clone(),
            reasoning_text: Some(raw.reasoning_text.clone()),
        });
    }
    Ok(bank)
}

/// The five-step deliberation text.
pub fn reasoning_steps_text(assets: &PromptAssets) -> &str {
    &assets.reasoning_steps
}

/// Render dialogue turns as alternating `User:` / `Assistant:` lines.
/// With `include_refs`, each utterance line ends with its mention block
/// (`<SOM>i,j<EOM>`, ascending, `<SOM><EOM>` for the empty set).
pub fn render_history(turns: &[Turn], include_refs: bool) -> String {
    let mut lines = Vec::new();
    for turn in turns {
        let mut user = format!("User: {}", turn.user_utterance);
        if include_refs {
            user.push(' ');
            user.push_str(&render_mentions(turn.user_refs.iter().copied()));
        }
        lines.push(user);
        if let Some(assistant) = &turn.assistant_utterance {
            let mut line = format!("Assistant: {assistant}");
            if include_refs {
                line.push(' ');
                line.push_str(&render_mentions(turn.assistant_refs.iter().copied()));
            }
            lines.push(line);
        }
    }
    lines.join("\n")
}

/// Remove every `<SOM>…<EOM>` block (and one preceding space) from text.
fn strip_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(SOM) {
        match rest[start + SOM.len()..].find(EOM) {
            Some(end_rel) => {
                let mut head = &rest[..start];
                if head.ends_with(' ') {
                    head = &head[..head.len() - 1];
                }
                out.push_str(head);
                rest = &rest[start + SOM.len() + end_rel + EOM.len()..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

/// Rendering options beyond the core (mode, ablation, style) triple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Keep only the last N history turns. `None` renders the full history.
    pub max_history_turns: Option<usize>,
}

/// Assemble the prompt for one unit. Deterministic and byte-stable per
/// (unit, mode, ablation, style, bank, assets, options).
pub fn build_prompt(
    unit: &EvalUnit,
    mode: PromptMode,
    ablation: AblationConfig,
    style: MetadataStyle,
    bank: &[FewShotExample],
    assets: &PromptAssets,
    options: &PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if mode != PromptMode::ZeroShot && bank.is_empty() {
        return Err(PromptError::EmptyBank);
    }

    let mut system_text = assets.instructions.clone();
    if mode == PromptMode::FewShotReasoning {
        system_text.push_str("\n\n");
        system_text.push_str(&assets.reasoning_steps);
    }

    let include_refs = ablation != AblationConfig::NoObjectReferences;
    let mut sections: Vec<String> = Vec::new();

    if ablation != AblationConfig::NoMetadata {
        let scene = render_scene_with(&assets.nl_templates, &unit.scene, style);
        sections.push(format!("Scene objects:\n{scene}"));
    }

    if mode != PromptMode::ZeroShot {
        for (i, example) in bank.iter().enumerate() {
            let mut block = format!("Example {}:\n", i + 1);
            if ablation != AblationConfig::NoMetadata {
                block.push_str("Scene objects:\n");
                block.push_str(&example.scene_text);
                block.push('\n');
            }
            block.push_str("Dialogue:\n");
            if include_refs {
                block.push_str(&example.history_text);
            } else {
                block.push_str(&strip_markers(&example.history_text));
            }
            block.push('\n');
            if mode == PromptMode::FewShotReasoning {
                if let Some(reasoning) = &example.reasoning_text {
                    let text = if include_refs {
                        reasoning.clone()
                    } else {
                        strip_markers(reasoning)
                    };
                    block.push_str("Reasoning:\n");
                    block.push_str(&text);
                    block.push('\n');
                }
            }
            let answer = if include_refs {
                example.answer.clone()
            } else {
                bare_answer(&example.answer)
            };
            block.push_str(&format!("{ANSWER_CUE} {answer}"));
            sections.push(block);
        }
    }

    let history: &[Turn] = match options.max_history_turns {
        Some(n) if unit.history.len() > n => &unit.history[unit.history.len() - n..],
        _ => &unit.history,
    };
    let history_text = render_history(history, include_refs);
    let mut dialogue = String::from("Dialogue:\n");
    if !history_text.is_empty() {
        dialogue.push_str(&history_text);
        dialogue.push('\n');
    }
    dialogue.push_str(&format!("User: {}\n{ANSWER_CUE}", unit.current_utterance));
    sections.push(dialogue);

    Ok(PromptBundle::new(system_text, sections.join("\n\n")))
}

/// Marker-free answer rendering for the no-object-references ablation:
/// bare comma-separated ids, or `none` for the empty set.
fn bare_answer(answer: &str) -> String {
    let parsed = extract_mentions(answer);
    if parsed.ids.is_empty() {
        "none".to_string()
    } else {
        parsed
            .ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}
