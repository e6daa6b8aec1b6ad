//! Value types shared by every stage: images, captions, edits and triplets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Synthetic,
}

/// One image known to a manifest. `uri` is resolved relative to the manifest root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub uri: String,
    pub split: Split,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

/// The caption components that a perturbation may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Subject,
    Object,
    Background,
    Adjective,
    Domain,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Subject,
        ComponentKind::Object,
        ComponentKind::Background,
        ComponentKind::Adjective,
        ComponentKind::Domain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Subject => "subject",
            ComponentKind::Object => "object",
            ComponentKind::Background => "background",
            ComponentKind::Adjective => "adjective",
            ComponentKind::Domain => "domain",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown component kind `{s}`"))
    }
}

/// Half-open range of token indices `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Normalizes one whitespace-delimited word: lowercase, trailing punctuation removed.
pub fn normalize_token(word: &str) -> String {
    word.trim_end_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

/// Whitespace tokenization; token `i` always corresponds to raw word `i`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(normalize_token).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<BTreeMap<ComponentKind, TokenSpan>>,
}

impl Caption {
    pub fn new(image_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            text: text.into(),
            components: None,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn span(&self, kind: ComponentKind) -> Option<TokenSpan> {
        self.components.as_ref()?.get(&kind).copied()
    }

    /// Normalized tokens covered by `span`, joined by single spaces.
    pub fn span_text(&self, span: TokenSpan) -> String {
        let tokens = self.tokens();
        tokens
            .get(span.start..span.end.min(tokens.len()))
            .unwrap_or_default()
            .join(" ")
    }

    /// Problems with the component spans: out of bounds, empty, overlapping.
    pub fn span_problems(&self) -> Vec<String> {
        let n = self.tokens().len();
        let mut problems = Vec::new();
        let Some(components) = &self.components else {
            return problems;
        };
        let spans: Vec<_> = components.iter().collect();
        for (kind, span) in &spans {
            if span.is_empty() {
                problems.push(format!("{kind} span is empty"));
            }
            if span.end > n {
                problems.push(format!("{kind} span ends past token {n}"));
            }
        }
        for (i, (ka, a)) in spans.iter().enumerate() {
            for (kb, b) in &spans[i + 1..] {
                if a.overlaps(b) {
                    problems.push(format!("{ka} and {kb} spans overlap"));
                }
            }
        }
        problems
    }
}

/// A single-component caption edit: `c_ref` to `c_cf`, described by `modification_text`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEdit {
    pub reference_caption: Caption,
    pub counterfactual_caption: Caption,
    pub modification_text: String,
    pub kind: ComponentKind,
    pub changed_span_ref: TokenSpan,
    pub changed_span_cf: TokenSpan,
}

impl CaptionEdit {
    pub fn old_value(&self) -> String {
        self.reference_caption.span_text(self.changed_span_ref)
    }

    pub fn new_value(&self) -> String {
        self.counterfactual_caption.span_text(self.changed_span_cf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Synthetic,
}

/// How the editing backend injected attention for a synthetic target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Same token count on both sides: cross-attention maps are swapped in for shared tokens.
    WordSwap,
    /// Token count changed: maps are aligned and injected for the shared tokens only.
    Refinement,
}

impl InjectionMode {
    pub fn for_edit(edit: &CaptionEdit) -> Self {
        if edit.changed_span_ref.len() == edit.changed_span_cf.len() {
            InjectionMode::WordSwap
        } else {
            InjectionMode::Refinement
        }
    }
}

/// `<reference image, modification text, target image>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub reference_image_id: String,
    pub modification_text: String,
    pub target_image_id: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<CaptionEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<InjectionMode>,
    /// Individual annotator captions when several were joined into `modification_text`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_captions: Vec<String>,
}

impl Triplet {
    pub fn manual(
        id: impl Into<String>,
        reference: impl Into<String>,
        text: impl Into<String>,
        target: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            reference_image_id: reference.into(),
            modification_text: text.into(),
            target_image_id: target.into(),
            provenance: Provenance::Manual,
            edit: None,
            generation_seed: None,
            injection: None,
            source_captions: Vec::new(),
        }
    }
}
