//! Job specifications and their resolution.
//!
//! A job is assembled from three layers, later layers winning field by
//! field: backbone defaults, then a TOML job file, then command-line flags
//! (or a service request body). Layers are merged as JSON trees and the
//! result is parsed once, so every field error carries its full path.

use std::path::{Path, PathBuf};

use imprint_core::backbone::{known_handle, InversionConfig, DEFAULT_EDIT_BACKBONE, DEFAULT_GENERATION_BACKBONE};
use imprint_core::engine::OptimizationConfig;
use imprint_core::workflows::Ablations;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    Edit,
}

impl JobKind {
    pub fn default_backbone(self) -> &'static str {
        match self {
            JobKind::Generate => DEFAULT_GENERATION_BACKBONE,
            JobKind::Edit => DEFAULT_EDIT_BACKBONE,
        }
    }
}

/// Which embedding backends a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    /// `offline` for the toy backbone, `cache` otherwise.
    #[default]
    Auto,
    /// Seeded random-projection stand-ins.
    Offline,
    /// Raw pixels as features, so distances are pixel distances.
    Pixel,
    /// Pretrained weights from the model cache.
    Cache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Auto,
    User,
    Box,
    None,
}

/// Everything a session needs, fully resolved. Paths are relative to the
/// working directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub kind: JobKind,
    pub backbone: String,
    pub subject: Option<PathBuf>,
    /// Subject class; also names the detector query when editing.
    pub class: Option<String>,
    /// Target prompts rendered after optimization (generation).
    pub prompts: Vec<String>,
    pub simple_prompt: Option<String>,
    pub render_steps: Option<usize>,
    /// Image to edit.
    pub input: Option<PathBuf>,
    /// Subject mask for `input` (single channel, nonzero = subject).
    pub mask: Option<PathBuf>,
    /// `None` means `user` when `mask` is set and `auto` otherwise.
    pub mask_source: Option<MaskMode>,
    /// `[x0, y0, x1, y1]`, exclusive upper corner.
    pub bbox: Option<[usize; 4]>,
    /// Editing prompt; defaults to the simple prompt.
    pub edit_prompt: Option<String>,
    pub extractors: ExtractorMode,
    pub optimization: OptimizationConfig,
    pub inversion: InversionConfig,
    pub ablations: Ablations,
}

impl JobSpec {
    /// Defaults for `kind` on `backbone`.
    pub fn defaults(kind: JobKind, backbone: &str) -> Result<Self> {
        let handle = known_handle(backbone)?;
        Ok(Self {
            kind,
            backbone: backbone.to_string(),
            subject: None,
            class: None,
            prompts: Vec::new(),
            simple_prompt: None,
            render_steps: None,
            input: None,
            mask: None,
            mask_source: None,
            bbox: None,
            edit_prompt: None,
            extractors: ExtractorMode::Auto,
            optimization: OptimizationConfig::for_backbone(&handle),
            inversion: InversionConfig::default(),
            ablations: Ablations::default(),
        })
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_source.unwrap_or(if self.mask.is_some() { MaskMode::User } else { MaskMode::Auto })
    }

    /// Checks cross-field requirements that parsing cannot express.
    pub fn validate(&self) -> Result<()> {
        let job = |field: &str, message: String| Error::Job { field: field.to_string(), message };
        known_handle(&self.backbone).map_err(|e| job("backbone", e.to_string()))?;
        if self.subject.is_none() {
            return Err(job("subject", "a subject image is required".into()));
        }
        if self.class.as_deref().is_some_and(|c| c.trim().is_empty()) {
            return Err(job("class", "must not be empty".into()));
        }
        if self.simple_prompt.as_deref().is_some_and(|p| p.trim().is_empty()) {
            return Err(job("simple_prompt", "must not be empty".into()));
        }
        if self.render_steps == Some(0) {
            return Err(job("render_steps", "must be at least 1".into()));
        }
        self.optimization.validate().map_err(|e| job("optimization", e.to_string()))?;
        self.inversion.validate().map_err(|e| job("inversion", e.to_string()))?;
        match self.kind {
            JobKind::Generate => {
                if self.ablations.no_prompt_simplification && self.prompts.is_empty() {
                    return Err(job("prompts", "optimizing without prompt simplification needs a target prompt".into()));
                }
            }
            JobKind::Edit => {
                if self.input.is_none() {
                    return Err(job("input", "editing needs an input image".into()));
                }
                match self.mask_mode() {
                    MaskMode::User if self.mask.is_none() => {
                        return Err(job("mask", "mask_source = user needs a mask file".into()))
                    }
                    MaskMode::Box if self.bbox.is_none() => {
                        return Err(job("bbox", "mask_source = box needs a bbox".into()))
                    }
                    _ => {}
                }
                if let Some([x0, y0, x1, y1]) = self.bbox {
                    if x0 >= x1 || y0 >= y1 {
                        return Err(job("bbox", format!("empty box [{x0}, {y0}, {x1}, {y1}]")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON: struct fields in declaration order, maps sorted.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("job specs serialize")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn config_hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Resolves `p` against `workdir` unless it is absolute.
pub fn resolve_path(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value (arrays included) replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a TOML job file into a JSON tree.
pub fn parse_toml(text: &str, origin: &Path) -> Result<Value> {
    let v: Value = toml::from_str(text).map_err(|e| Error::format(origin, e.message()))?;
    if !v.is_object() {
        return Err(Error::format(origin, "job file must be a table"));
    }
    Ok(v)
}

pub fn load_toml(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text, path)
}

fn backbone_in(layer: &Value) -> Result<Option<String>> {
    match layer.get("backbone") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(Error::Job { field: "backbone".into(), message: format!("expected a string, got {other}") }),
    }
}

/// Builds the effective job from defaults, then each overlay in order.
/// The backbone (which selects the defaults) is itself taken from the
/// highest layer that sets it.
pub fn resolve(kind: JobKind, layers: &[Value]) -> Result<JobSpec> {
    let mut backbone = kind.default_backbone().to_string();
    for layer in layers {
        if let Some(b) = backbone_in(layer)? {
            backbone = b;
        }
    }
    let defaults =
        JobSpec::defaults(kind, &backbone).map_err(|e| Error::Job { field: "backbone".into(), message: e.to_string() })?;
    let mut tree = serde_json::to_value(&defaults).expect("job specs serialize");
    for layer in layers {
        if let Some(k) = layer.get("kind") {
            if k != &tree["kind"] {
                return Err(Error::Job { field: "kind".into(), message: format!("job file is for {k}, not {}", tree["kind"]) });
            }
        }
        merge(&mut tree, layer.clone());
    }
    let spec: JobSpec = serde_path_to_error::deserialize(tree).map_err(|e| {
        let field = e.path().to_string();
        Error::Job { field, message: e.into_inner().to_string() }
    })?;
    spec.validate()?;
    Ok(spec)
}

/// A JSON object holding only the given `(dotted.path, value)` pairs.
pub fn overlay(pairs: impl IntoIterator<Item = (&'static str, Value)>) -> Value {
    let mut root = Value::Object(Map::new());
    for (path, v) in pairs {
        let mut slot = &mut root;
        let mut parts = path.split('.').peekable();
        while let Some(part) = parts.next() {
            let obj = slot.as_object_mut().expect("overlay paths nest objects");
            if parts.peek().is_none() {
                obj.insert(part.to_string(), v);
                break;
            }
            slot = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
        }
    }
    root
}
