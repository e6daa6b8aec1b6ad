//! Counterfactual captions: locate caption components, edit exactly one, and
//! describe the edit as modification text.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use similar::{capture_diff_slices, Algorithm, DiffTag};
use thiserror::Error;

use crate::hashing::seeded_hash;
use crate::toyworld::{substitution_text, Vocabulary};
use crate::transport::{join_url, Transport};
use crate::types::{normalize_token, tokenize, Caption, CaptionEdit, ComponentKind, TokenSpan};

/// Prompt used by the served perturbation model; `{caption}` and `{kind}` are substituted.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/perturb_prompt_v1.txt");
pub const PROMPT_VERSION: &str = "perturb-prompt-v1";

pub const MAX_REPLACEMENT_TOKENS: usize = 3;

const ARTICLES: &[&str] = &["a", "an", "the"];
const DOMAIN_WORDS: &[&str] = &[
    "photo", "photograph", "painting", "picture", "drawing", "sketch", "illustration", "image",
    "rendering", "cartoon", "render",
];
const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "with", "on", "in", "at", "of", "and", "or", "near", "by", "under", "over",
    "behind", "beside", "next", "to", "from", "into", "is", "are", "while", "that", "which",
    "down", "up", "through", "against", "background",
];
const COMMON_ADJECTIVES: &[&str] = &[
    "small", "large", "big", "little", "tall", "short", "old", "young", "new", "dark", "bright",
    "wooden", "metal", "shiny", "silver", "gold", "golden", "brown", "gray", "grey", "pink",
    "cute", "fluffy", "empty", "busy",
];

pub fn render_prompt(caption: &str, kind: ComponentKind) -> String {
    PROMPT_TEMPLATE
        .replace("{caption}", caption)
        .replace("{kind}", kind.as_str())
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("caption has no locatable {kind} to perturb")]
    Unperturbable { kind: ComponentKind },
    #[error("no unused replacement left for {kind} `{original}`")]
    Exhausted { kind: ComponentKind, original: String },
    #[error("perturbation service error: {message}")]
    Backend { message: String, payload: Option<String> },
    #[error("edit response rejected: {0}")]
    Parse(#[from] EditParseError),
    #[error("edit failed validation: {violations:?}")]
    Validation {
        violations: Vec<EditViolation>,
        raw: String,
    },
    #[error("invalid perturber configuration: {0}")]
    Config(String),
}

impl PerturbError {
    /// True for failures that say nothing about the availability of the service.
    pub fn is_skippable(&self) -> bool {
        !matches!(self, PerturbError::Backend { .. } | PerturbError::Config(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorCode {
    MalformedJson,
    MissingField,
    InvalidKind,
    IdentityEdit,
    MultiSpan,
    UnparseableDiff,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{code:?}: {detail} (raw: {raw})")]
pub struct EditParseError {
    pub code: ParseErrorCode,
    pub detail: String,
    pub raw: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditViolationCode {
    IdentityEdit,
    MultiSpan,
    SpanMismatch,
    SpanTooLong,
    EmptyModificationText,
    MissingMention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditViolation {
    pub code: EditViolationCode,
    pub detail: String,
}

impl fmt::Display for EditViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.detail)
    }
}

pub type KindWeights = BTreeMap<ComponentKind, f64>;

pub fn uniform_weights() -> KindWeights {
    ComponentKind::ALL.into_iter().map(|k| (k, 1.0)).collect()
}

#[derive(Clone)]
pub enum PerturberBackend {
    RuleBased {
        vocabulary: &'static Vocabulary,
        kind_weights: KindWeights,
    },
    ExternalLlm {
        endpoint: String,
        transport: Arc<dyn Transport>,
        kind_weights: KindWeights,
    },
}

impl fmt::Debug for PerturberBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturberBackend::RuleBased { kind_weights, .. } => f
                .debug_struct("RuleBased")
                .field("kind_weights", kind_weights)
                .finish(),
            PerturberBackend::ExternalLlm {
                endpoint,
                kind_weights,
                ..
            } => f
                .debug_struct("ExternalLlm")
                .field("endpoint", endpoint)
                .field("kind_weights", kind_weights)
                .finish(),
        }
    }
}

impl PerturberBackend {
    pub fn rule_based() -> Self {
        PerturberBackend::RuleBased {
            vocabulary: Vocabulary::builtin(),
            kind_weights: uniform_weights(),
        }
    }

    pub fn kind_weights(&self) -> &KindWeights {
        match self {
            PerturberBackend::RuleBased { kind_weights, .. }
            | PerturberBackend::ExternalLlm { kind_weights, .. } => kind_weights,
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let weights = self.kind_weights();
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PerturbError::Config("kind weights must be finite and non-negative".into()));
        }
        if weights.values().sum::<f64>() <= 0.0 {
            return Err(PerturbError::Config("kind weights must sum to a positive value".into()));
        }
        Ok(())
    }
}

/// Draws a kind from `available` proportionally to `weights`; zero-weight kinds are never drawn.
pub fn sample_kind<R: Rng + ?Sized>(
    weights: &KindWeights,
    available: &[ComponentKind],
    rng: &mut R,
) -> Option<ComponentKind> {
    let candidates: Vec<(ComponentKind, f64)> = available
        .iter()
        .map(|&k| (k, weights.get(&k).copied().unwrap_or(0.0)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let index = WeightedIndex::new(candidates.iter().map(|&(_, w)| w)).ok()?;
    Some(candidates[index.sample(rng)].0)
}

/// Registry of `(reference image, kind, replacement)` already used in one synthesis run.
#[derive(Debug, Default)]
pub struct DedupRegistry {
    seen: Mutex<HashSet<(String, ComponentKind, String)>>,
}

impl DedupRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the key; false if it was already present.
    pub fn insert(&self, reference_id: &str, kind: ComponentKind, value: &str) -> bool {
        self.seen
            .lock()
            .expect("dedup lock")
            .insert((reference_id.to_string(), kind, value.to_string()))
    }

    pub fn contains(&self, reference_id: &str, kind: ComponentKind, value: &str) -> bool {
        self.seen
            .lock()
            .expect("dedup lock")
            .contains(&(reference_id.to_string(), kind, value.to_string()))
    }

    /// Replacement values already used for this reference and kind.
    pub fn used(&self, reference_id: &str, kind: ComponentKind) -> BTreeSet<String> {
        self.seen
            .lock()
            .expect("dedup lock")
            .iter()
            .filter(|(r, k, _)| r == reference_id && *k == kind)
            .map(|(_, _, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("dedup lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn is_stop(token: &str) -> bool {
    STOP_WORDS.contains(&token) || (token.len() > 4 && token.ends_with("ing"))
}

fn is_adjective(token: &str) -> bool {
    Vocabulary::builtin().contains(ComponentKind::Adjective, token) || COMMON_ADJECTIVES.contains(&token)
}

/// Template inversion for `a D of a A S [with a O] on a B background`.
fn parse_toy_grammar(tokens: &[String]) -> Option<BTreeMap<ComponentKind, TokenSpan>> {
    let n = tokens.len();
    if n < 9 || tokens[0] != "a" || tokens[2] != "of" || tokens[3] != "a" || tokens[n - 1] != "background" {
        return None;
    }
    let on = (5..n - 2).rev().find(|&i| tokens[i] == "on" && tokens[i + 1] == "a")?;
    if on + 2 >= n - 1 || on <= 5 {
        return None;
    }
    let mut spans = BTreeMap::new();
    spans.insert(ComponentKind::Domain, TokenSpan::new(1, 2));
    spans.insert(ComponentKind::Adjective, TokenSpan::new(4, 5));
    spans.insert(ComponentKind::Background, TokenSpan::new(on + 2, n - 1));
    match (5..on).find(|&i| tokens[i] == "with" && tokens.get(i + 1).map(String::as_str) == Some("a")) {
        Some(with) if with > 5 && with + 2 < on => {
            spans.insert(ComponentKind::Subject, TokenSpan::new(5, with));
            spans.insert(ComponentKind::Object, TokenSpan::new(with + 2, on));
        }
        Some(_) => return None,
        None => {
            spans.insert(ComponentKind::Subject, TokenSpan::new(5, on));
        }
    }
    Some(spans)
}

fn noun_phrase_end(tokens: &[String], start: usize) -> usize {
    let mut end = start;
    while end < tokens.len() && !is_stop(&tokens[end]) {
        end += 1;
    }
    end
}

fn parse_heuristic(tokens: &[String]) -> BTreeMap<ComponentKind, TokenSpan> {
    let n = tokens.len();
    let mut spans = BTreeMap::new();
    let is_article = |i: usize| tokens.get(i).is_some_and(|t| ARTICLES.contains(&t.as_str()));

    // Subject noun phrase after the first article, or after "a {domain} of a".
    let mut np_start = None;
    if n >= 4 && is_article(0) && DOMAIN_WORDS.contains(&tokens[1].as_str()) && tokens[2] == "of" {
        spans.insert(ComponentKind::Domain, TokenSpan::new(1, 2));
        np_start = Some(if is_article(3) { 4 } else { 3 });
    } else if let Some(first) = (0..n).find(|&i| is_article(i)) {
        np_start = Some(first + 1);
    }
    if let Some(start) = np_start {
        let end = noun_phrase_end(tokens, start);
        if end > start {
            if end - start >= 2 && is_adjective(&tokens[start]) {
                spans.insert(ComponentKind::Adjective, TokenSpan::new(start, start + 1));
                spans.insert(ComponentKind::Subject, TokenSpan::new(start + 1, end));
            } else {
                spans.insert(ComponentKind::Subject, TokenSpan::new(start, end));
            }
        }
    }

    // Background: "... X in the background", "... a X background", or trailing "in/on the X".
    let background = if n >= 4 && tokens[n - 3..] == ["in", "the", "background"] {
        let end = n - 3;
        let mut start = end;
        while start > 0 && !is_stop(&tokens[start - 1]) {
            start -= 1;
        }
        (start < end).then(|| TokenSpan::new(start, end))
    } else if n >= 3 && tokens[n - 1] == "background" && is_article(n - 3) {
        Some(TokenSpan::new(n - 2, n - 1))
    } else {
        (1..n.saturating_sub(1))
            .rev()
            .find(|&i| (tokens[i - 1] == "in" || tokens[i - 1] == "on") && is_article(i))
            .and_then(|i| {
                let start = i + 1;
                let covered = (start..n).all(|j| !is_stop(&tokens[j]));
                (covered && start < n && n - start <= MAX_REPLACEMENT_TOKENS)
                    .then(|| TokenSpan::new(start, n))
            })
    };
    if let Some(span) = background {
        if spans.values().all(|s| !s.overlaps(&span)) {
            spans.insert(ComponentKind::Background, span);
        }
    }

    // Object: "with a/an X".
    if let Some(with) = (0..n.saturating_sub(2)).find(|&i| tokens[i] == "with" && is_article(i + 1)) {
        let start = with + 2;
        let end = noun_phrase_end(tokens, start);
        let span = TokenSpan::new(start, end);
        if end > start && spans.values().all(|s| !s.overlaps(&span)) {
            spans.insert(ComponentKind::Object, span);
        }
    }
    spans
}

/// Locates caption components. Existing components are kept as they are.
pub fn parse_components(caption: &Caption) -> Caption {
    if caption.components.is_some() {
        return caption.clone();
    }
    let tokens = caption.tokens();
    let spans = parse_toy_grammar(&tokens).unwrap_or_else(|| parse_heuristic(&tokens));
    Caption {
        components: Some(spans),
        ..caption.clone()
    }
}

/// Replaces the words of `span` with `replacement`, keeping other raw words verbatim.
fn splice(reference: &Caption, span: TokenSpan, replacement: &str) -> (Caption, TokenSpan) {
    let words: Vec<&str> = reference.text.split_whitespace().collect();
    let new_words: Vec<String> = replacement.split_whitespace().map(str::to_string).collect();
    let mut out: Vec<String> = words[..span.start].iter().map(|w| w.to_string()).collect();
    out.extend(new_words.iter().cloned());
    if let (Some(last_old), Some(last_new)) = (words.get(span.end - 1), out.last_mut()) {
        let trailing: String = last_old
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_punctuation())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        last_new.push_str(&trailing);
    }
    out.extend(words[span.end..].iter().map(|w| w.to_string()));

    let new_span = TokenSpan::new(span.start, span.start + new_words.len());
    let delta = new_words.len() as isize - span.len() as isize;
    let components = reference.components.as_ref().map(|map| {
        map.iter()
            .map(|(&kind, s)| {
                let shifted = if *s == span {
                    new_span
                } else if s.start >= span.end {
                    TokenSpan::new(
                        (s.start as isize + delta) as usize,
                        (s.end as isize + delta) as usize,
                    )
                } else {
                    *s
                };
                (kind, shifted)
            })
            .collect()
    });
    (
        Caption {
            image_id: reference.image_id.clone(),
            text: out.join(" "),
            components,
        },
        new_span,
    )
}

/// Rule-based replacement choice: index `hash(seed, caption) mod |candidates|`
/// into the kind's vocabulary with the original (and any excluded values) removed.
pub fn rule_based_replacement<'v>(
    vocabulary: &'v Vocabulary,
    caption_text: &str,
    kind: ComponentKind,
    original: &str,
    seed: u64,
    exclude: &BTreeSet<String>,
) -> Option<&'v str> {
    let candidates: Vec<&str> = vocabulary
        .values(kind)
        .into_iter()
        .filter(|v| *v != original && !exclude.contains(*v))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let index = seeded_hash(seed, &[caption_text]) % candidates.len() as u64;
    Some(candidates[index as usize])
}

pub fn perturb_caption(
    caption: &Caption,
    kind: ComponentKind,
    seed: u64,
    backend: &PerturberBackend,
) -> Result<CaptionEdit, PerturbError> {
    perturb_caption_excluding(caption, kind, seed, backend, &BTreeSet::new())
}

/// As [`perturb_caption`], never choosing a replacement in `exclude` (rule-based backend).
pub fn perturb_caption_excluding(
    caption: &Caption,
    kind: ComponentKind,
    seed: u64,
    backend: &PerturberBackend,
    exclude: &BTreeSet<String>,
) -> Result<CaptionEdit, PerturbError> {
    let caption = parse_components(caption);
    let span = caption
        .span(kind)
        .filter(|s| !s.is_empty())
        .ok_or(PerturbError::Unperturbable { kind })?;
    let original = caption.span_text(span);

    match backend {
        PerturberBackend::RuleBased { vocabulary, .. } => {
            let replacement =
                rule_based_replacement(vocabulary, &caption.text, kind, &original, seed, exclude)
                    .ok_or_else(|| PerturbError::Exhausted {
                        kind,
                        original: original.clone(),
                    })?;
            let (counterfactual, new_span) = splice(&caption, span, replacement);
            let edit = CaptionEdit {
                modification_text: substitution_text(&original, replacement),
                reference_caption: caption,
                counterfactual_caption: counterfactual,
                kind,
                changed_span_ref: span,
                changed_span_cf: new_span,
            };
            check_edit(edit, String::new())
        }
        PerturberBackend::ExternalLlm {
            endpoint,
            transport,
            ..
        } => {
            let body = json!({ "caption": caption.text, "kind": kind.as_str() });
            let raw = transport
                .post_json(&join_url(endpoint, "perturb"), &body)
                .map_err(|e| PerturbError::Backend {
                    message: e.to_string(),
                    payload: e.payload().map(str::to_string),
                })?;
            let edit = parse_llm_edit_response(&raw, &caption)?;
            if edit.kind != kind {
                return Err(PerturbError::Validation {
                    violations: vec![EditViolation {
                        code: EditViolationCode::SpanMismatch,
                        detail: format!("requested {kind}, service edited {}", edit.kind),
                    }],
                    raw,
                });
            }
            check_edit(edit, raw)
        }
    }
}

fn check_edit(edit: CaptionEdit, raw: String) -> Result<CaptionEdit, PerturbError> {
    let violations = validate_edit(&edit);
    if violations.is_empty() {
        Ok(edit)
    } else {
        Err(PerturbError::Validation { violations, raw })
    }
}

/// Contiguous changed regions between two token sequences, as (old range, new range).
fn changed_hunks(old: &[String], new: &[String]) -> Vec<(TokenSpan, TokenSpan)> {
    let mut hunks: Vec<(TokenSpan, TokenSpan)> = Vec::new();
    for op in capture_diff_slices(Algorithm::Myers, old, new) {
        let (tag, o, n) = op.as_tag_tuple();
        if tag == DiffTag::Equal {
            continue;
        }
        match hunks.last_mut() {
            Some((ho, hn)) if ho.end == o.start && hn.end == n.start => {
                ho.end = o.end;
                hn.end = n.end;
            }
            _ => hunks.push((TokenSpan::new(o.start, o.end), TokenSpan::new(n.start, n.end))),
        }
    }
    hunks
}

/// Parses `{"counterfactual", "modification", "kind"}` and derives spans by token diff.
pub fn parse_llm_edit_response(raw: &str, reference: &Caption) -> Result<CaptionEdit, EditParseError> {
    let fail = |code, detail: String| EditParseError {
        code,
        detail,
        raw: raw.to_string(),
    };
    let value: Value =
        serde_json::from_str(raw).map_err(|e| fail(ParseErrorCode::MalformedJson, e.to_string()))?;
    let field = |name: &str| {
        value
            .get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| fail(ParseErrorCode::MissingField, format!("`{name}`")))
    };
    let counterfactual = field("counterfactual")?;
    let modification = field("modification")?;
    let kind: ComponentKind = field("kind")?
        .parse()
        .map_err(|e: String| fail(ParseErrorCode::InvalidKind, e))?;

    let reference = parse_components(reference);
    let old = reference.tokens();
    let new = tokenize(&counterfactual);
    let hunks = changed_hunks(&old, &new);
    let (span_ref, span_cf) = match hunks[..] {
        [] => return Err(fail(ParseErrorCode::IdentityEdit, "counterfactual equals reference".into())),
        [one] => one,
        _ => return Err(fail(ParseErrorCode::MultiSpan, format!("{} changed regions", hunks.len()))),
    };
    if span_ref.is_empty() || span_cf.is_empty() {
        return Err(fail(
            ParseErrorCode::UnparseableDiff,
            "edit is a pure insertion or deletion".into(),
        ));
    }
    // Components of the counterfactual follow the reference's, shifted past the edit.
    let delta = span_cf.len() as isize - span_ref.len() as isize;
    let components = reference.components.as_ref().map(|map| {
        map.iter()
            .filter(|(_, s)| !s.overlaps(&span_ref) || **s == span_ref)
            .map(|(&k, s)| {
                let shifted = if *s == span_ref {
                    span_cf
                } else if s.start >= span_ref.end {
                    TokenSpan::new((s.start as isize + delta) as usize, (s.end as isize + delta) as usize)
                } else {
                    *s
                };
                (k, shifted)
            })
            .collect()
    });
    Ok(CaptionEdit {
        counterfactual_caption: Caption {
            image_id: reference.image_id.clone(),
            text: counterfactual,
            components,
        },
        reference_caption: reference,
        modification_text: modification,
        kind,
        changed_span_ref: span_ref,
        changed_span_cf: span_cf,
    })
}

fn mentions(text: &str, phrase: &str) -> bool {
    let haystack = format!(" {} ", tokenize(text).join(" "));
    let needle = format!(" {} ", tokenize(phrase).join(" "));
    needle.trim().is_empty() || haystack.contains(&needle)
}

/// Policy checks for an edit: one changed region matching the declared spans,
/// a short replacement, and modification text that names both values.
pub fn validate_edit(edit: &CaptionEdit) -> Vec<EditViolation> {
    let mut out = Vec::new();
    let mut push = |code, detail: String| out.push(EditViolation { code, detail });
    let old = edit.reference_caption.tokens();
    let new = edit.counterfactual_caption.tokens();
    let hunks = changed_hunks(&old, &new);

    match hunks[..] {
        [] => push(EditViolationCode::IdentityEdit, "captions are identical".into()),
        [(hunk_ref, hunk_cf)] => {
            let declared_ok = edit.changed_span_ref.end <= old.len()
                && edit.changed_span_cf.end <= new.len()
                && old[..edit.changed_span_ref.start] == new[..edit.changed_span_cf.start]
                && old[edit.changed_span_ref.end..] == new[edit.changed_span_cf.end..]
                && hunk_ref.start >= edit.changed_span_ref.start
                && hunk_ref.end <= edit.changed_span_ref.end
                && hunk_cf.start >= edit.changed_span_cf.start
                && hunk_cf.end <= edit.changed_span_cf.end;
            if !declared_ok {
                push(
                    EditViolationCode::SpanMismatch,
                    format!(
                        "declared {:?}->{:?}, observed {:?}->{:?}",
                        edit.changed_span_ref, edit.changed_span_cf, hunk_ref, hunk_cf
                    ),
                );
            }
        }
        _ => push(EditViolationCode::MultiSpan, format!("{} changed regions", hunks.len())),
    }
    if edit.changed_span_cf.len() > MAX_REPLACEMENT_TOKENS {
        push(
            EditViolationCode::SpanTooLong,
            format!("replacement has {} tokens", edit.changed_span_cf.len()),
        );
    }
    if edit.modification_text.trim().is_empty() {
        push(EditViolationCode::EmptyModificationText, String::new());
    } else if hunks.len() == 1 {
        let (old_value, new_value) = (edit.old_value(), edit.new_value());
        if !mentions(&edit.modification_text, &old_value) || !mentions(&edit.modification_text, &new_value) {
            push(
                EditViolationCode::MissingMention,
                format!("`{}` must mention `{old_value}` and `{new_value}`", edit.modification_text),
            );
        }
    }
    out
}

/// Normalized value of `kind` in a caption, if located.
pub fn component_value(caption: &Caption, kind: ComponentKind) -> Option<String> {
    parse_components(caption).span(kind).map(|s| {
        caption.text.split_whitespace().skip(s.start).take(s.len()).map(normalize_token).collect::<Vec<_>>().join(" ")
    })
}
