//! Rendering of scene objects into the three metadata representations:
//! structured blocks with raw normalized coordinates, structured blocks
//! with coarse spatial descriptors, and fluent natural-language sentences.
//!
//! All render functions are pure and byte-stable per input.

use crate::corpus::{BBox, Domain, ObjectRecord, SceneRecord};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

/// The three metadata representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataStyle {
    /// Key-value block, location as normalized `(cx, cy)` coordinates.
    StructuredRaw,
    /// Key-value block, location as a coarse spatial descriptor.
    StructuredNlCoords,
    /// One fluent sentence per object, no key-value structure.
    FullNl,
}

impl MetadataStyle {
    pub const ALL: [MetadataStyle; 3] = [
        MetadataStyle::StructuredRaw,
        MetadataStyle::StructuredNlCoords,
        MetadataStyle::FullNl,
    ];
}

impl fmt::Display for MetadataStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetadataStyle::StructuredRaw => write!(f, "structured_raw"),
            MetadataStyle::StructuredNlCoords => write!(f, "structured_nl_coords"),
            MetadataStyle::FullNl => write!(f, "full_nl"),
        }
    }
}

impl std::str::FromStr for MetadataStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "structured_raw" | "raw" => Ok(MetadataStyle::StructuredRaw),
            "structured_nl_coords" | "nl_coords" => Ok(MetadataStyle::StructuredNlCoords),
            "full_nl" | "nl" => Ok(MetadataStyle::FullNl),
            other => Err(format!("unknown metadata style `{other}`")),
        }
    }
}

/// One cell of the 3x3 spatial grid, image convention: y grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialCell {
    TopLeft,
    TopCenter,
    TopRight,
    CenterLeft,
    Center,
    CenterRight,
    BottomLeft,
    BottomCenter,
    BottomRight,
}

impl fmt::Display for SpatialCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpatialCell::TopLeft => "top-left",
            SpatialCell::TopCenter => "top-center",
            SpatialCell::TopRight => "top-right",
            SpatialCell::CenterLeft => "center-left",
            SpatialCell::Center => "center",
            SpatialCell::CenterRight => "center-right",
            SpatialCell::BottomLeft => "bottom-left",
            SpatialCell::BottomCenter => "bottom-center",
            SpatialCell::BottomRight => "bottom-right",
        };
        write!(f, "{s}")
    }
}

/// Normalized object center in `[0,1]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCenter {
    pub cx: f64,
    pub cy: f64,
    /// Set when no usable extent existed and the center defaulted to (0.5, 0.5).
    pub degenerate: bool,
}

/// Normalization extent for a scene: the image extent when present,
/// otherwise the maximum `(x+w, y+h)` over all object boxes.
pub fn scene_extent(scene: &SceneRecord) -> Option<(f64, f64)> {
    if let Some(extent) = scene.image_extent {
        return Some(extent);
    }
    let mut max_x: f64 = 0.0;
    let mut max_y: f64 = 0.0;
    let mut any = false;
    for obj in &scene.objects {
        if let Some(b) = obj.bbox {
            max_x = max_x.max(b.x + b.w);
            max_y = max_y.max(b.y + b.h);
            any = true;
        }
    }
    if any {
        Some((max_x, max_y))
    } else {
        None
    }
}

/// Normalize a bbox center against an extent, clamping to `[0,1]`.
/// A missing or zero-area extent is degenerate and yields (0.5, 0.5).
pub fn normalize_bbox(bbox: BBox, extent: Option<(f64, f64)>) -> NormCenter {
    let (cx, cy) = bbox.center();
    match extent {
        Some((w, h)) if w > 0.0 && h > 0.0 => NormCenter {
            cx: (cx / w).clamp(0.0, 1.0),
            cy: (cy / h).clamp(0.0, 1.0),
            degenerate: false,
        },
        _ => NormCenter {
            cx: 0.5,
            cy: 0.5,
            degenerate: true,
        },
    }
}

/// Map a normalized center to its grid cell. Thirds boundaries belong to
/// the center band: `[0, 1/3)`, `[1/3, 2/3]`, `(2/3, 1]`.
pub fn spatial_descriptor(cx: f64, cy: f64) -> SpatialCell {
    let band = |v: f64| {
        if v < 1.0 / 3.0 {
            0
        } else if v <= 2.0 / 3.0 {
            1
        } else {
            2
        }
    };
    match (band(cy), band(cx)) {
        (0, 0) => SpatialCell::TopLeft,
        (0, 1) => SpatialCell::TopCenter,
        (0, 2) => SpatialCell::TopRight,
        (1, 0) => SpatialCell::CenterLeft,
        (1, 1) => SpatialCell::Center,
        (1, 2) => SpatialCell::CenterRight,
        (2, 0) => SpatialCell::BottomLeft,
        (2, 1) => SpatialCell::BottomCenter,
        _ => SpatialCell::BottomRight,
    }
}

/// Errors from loading or parsing natural-language templates.
#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Text(String),
    Placeholder(String),
    /// Optional clause: emitted only when every placeholder inside resolves.
    Clause(Vec<Node>),
}

/// A parsed sentence template with `{attribute}` placeholders and
/// `[...]` optional clauses.
#[derive(Debug, Clone)]
pub struct Template {
    nodes: Vec<Node>,
    placeholder_names: Vec<String>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Template, TemplateError> {
        let text = text.trim_end_matches('\n');
        let mut nodes = Vec::new();
        let mut clause: Option<Vec<Node>> = None;
        let mut buf = String::new();
        let mut chars = text.chars().peekable();
        let mut names = Vec::new();

        fn flush(buf: &mut String, target: &mut Vec<Node>) {
            if !buf.is_empty() {
                target.push(Node::Text(std::mem::take(buf)));
            }
        }

        while let Some(c) = chars.next() {
            match c {
                '[' => {
                    if clause.is_some() {
                        return Err(TemplateError::Parse("nested clause".into()));
                    }
                    flush(&mut buf, &mut nodes);
                    clause = Some(Vec::new());
                }
                ']' => {
                    let mut inner = clause
                        .take()
                        .ok_or_else(|| TemplateError::Parse("unmatched `]`".into()))?;
                    flush(&mut buf, &mut inner);
                    nodes.push(Node::Clause(inner));
                }
                '{' => {
                    let target = clause.as_mut().unwrap_or(&mut nodes);
                    flush(&mut buf, target);
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) => name.push(ch),
                            None => {
                                return Err(TemplateError::Parse("unterminated placeholder".into()))
                            }
                        }
                    }
                    names.push(name.clone());
                    target.push(Node::Placeholder(name));
                }
                '}' => return Err(TemplateError::Parse("unmatched `}`".into())),
                _ => buf.push(c),
            }
        }
        if clause.is_some() {
            return Err(TemplateError::Parse("unterminated clause".into()));
        }
        flush(&mut buf, &mut nodes);
        Ok(Template {
            nodes,
            placeholder_names: names,
        })
    }

    fn render(&self, resolve: &dyn Fn(&str) -> Option<String>) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            match node {
                Node::Text(t) => out.push_str(t),
                Node::Placeholder(name) => {
                    if let Some(v) = resolve(name) {
                        out.push_str(&v);
                    }
                }
                Node::Clause(inner) => {
                    let mut piece = String::new();
                    let mut complete = true;
                    for n in inner {
                        match n {
                            Node::Text(t) => piece.push_str(t),
                            Node::Placeholder(name) => match resolve(name) {
                                Some(v) => piece.push_str(&v),
                                None => {
                                    complete = false;
                                    break;
                                }
                            },
                            Node::Clause(_) => unreachable!("no nested clauses"),
                        }
                    }
                    if complete {
                        out.push_str(&piece);
                    }
                }
            }
        }
        tidy(&out)
    }

    fn names(&self) -> &[String] {
        &self.placeholder_names
    }
}

/// Collapse double spaces and space-before-punctuation left behind by
/// dropped clauses.
fn tidy(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev_space = false;
    for c in s.chars() {
        if c == ' ' {
            if prev_space {
                continue;
            }
            prev_space = true;
            out.push(c);
        } else {
            if (c == ',' || c == '.') && out.ends_with(' ') {
                out.pop();
            }
            prev_space = false;
            out.push(c);
        }
    }
    out.trim().to_string()
}

/// The per-domain sentence templates for the full natural-language style.
#[derive(Debug, Clone)]
pub struct NlTemplates {
    fashion: Template,
    furniture: Template,
}

const BUILTIN_FASHION: &str = include_str!("../assets/templates/fullnl.fashion.txt");
const BUILTIN_FURNITURE: &str = include_str!("../assets/templates/fullnl.furniture.txt");

impl NlTemplates {
    /// The templates compiled into the binary (the checked-in assets).
    pub fn builtin() -> &'static NlTemplates {
        static BUILTIN: OnceLock<NlTemplates> = OnceLock::new();
        BUILTIN.get_or_init(|| NlTemplates {
            fashion: Template::parse(BUILTIN_FASHION).expect("builtin fashion template parses"),
            furniture: Template::parse(BUILTIN_FURNITURE)
                .expect("builtin furniture template parses"),
        })
    }

    /// Load `fullnl.fashion.txt` / `fullnl.furniture.txt` from a directory.
    pub fn load(dir: &Path) -> Result<NlTemplates, TemplateError> {
        let read = |name: &str| -> Result<Template, TemplateError> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.clone(),
                source,
            })?;
            Template::parse(&text)
        };
        Ok(NlTemplates {
            fashion: read("fullnl.fashion.txt")?,
            furniture: read("fullnl.furniture.txt")?,
        })
    }

    fn for_domain(&self, domain: Domain) -> &Template {
        match domain {
            Domain::Fashion => &self.fashion,
            Domain::Furniture => &self.furniture,
        }
    }
}

/// Render one object under a style, using the builtin templates for FullNl.
pub fn render_object(obj: &ObjectRecord, scene: &SceneRecord, style: MetadataStyle) -> String {
    render_object_with(NlTemplates::builtin(), obj, scene, style)
}

/// Render one object under a style with explicit templates.
pub fn render_object_with(
    templates: &NlTemplates,
    obj: &ObjectRecord,
    scene: &SceneRecord,
    style: MetadataStyle,
) -> String {
    let extent = scene_extent(scene);
    let center = obj.bbox.map(|b| normalize_bbox(b, extent));

    match style {
        MetadataStyle::StructuredRaw | MetadataStyle::StructuredNlCoords => {
            let mut lines = Vec::with_capacity(obj.attributes.len() + 2);
            lines.push(format!("Object ID: {}", obj.object_id));
            for (key, value) in &obj.attributes {
                lines.push(format!("{key}: {}", value.render()));
            }
            if let Some(c) = center {
                let location = match style {
                    MetadataStyle::StructuredRaw => format!("({:.2}, {:.2})", c.cx, c.cy),
                    _ => spatial_descriptor(c.cx, c.cy).to_string(),
                };
                lines.push(format!("location: {location}"));
            }
            lines.join("\n")
        }
        MetadataStyle::FullNl => {
            let template = templates.for_domain(obj.domain);
            let resolve = |name: &str| -> Option<String> {
                match name {
                    "object_id" => Some(obj.object_id.to_string()),
                    "location" => center.map(|c| spatial_descriptor(c.cx, c.cy).to_string()),
                    other => obj.attr(other).map(|v| v.render()),
                }
            };
            let mut sentence = template.render(&resolve);
            // Attributes the template never names are still surfaced.
            for (key, value) in &obj.attributes {
                if !template.names().iter().any(|n| n == key) {
                    sentence.push_str(&format!(" Its {key} is {}.", value.render()));
                }
            }
            sentence
        }
    }
}

/// Render a whole scene: objects in ascending id order, one block or
/// sentence each. Empty scenes render as the empty string.
pub fn render_scene(scene: &SceneRecord, style: MetadataStyle) -> String {
    render_scene_with(NlTemplates::builtin(), scene, style)
}

pub fn render_scene_with(
    templates: &NlTemplates,
    scene: &SceneRecord,
    style: MetadataStyle,
) -> String {
    let mut objects: Vec<&ObjectRecord> = scene.objects.iter().collect();
    objects.sort_by_key(|o| o.object_id);
    let sep = match style {
        MetadataStyle::FullNl => "\n",
        _ => "\n\n",
    };
    objects
        .iter()
        .map(|o| render_object_with(templates, o, scene, style))
        .collect::<Vec<_>>()
        .join(sep)
}
