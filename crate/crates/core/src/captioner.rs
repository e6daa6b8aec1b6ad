//! Reference captions for images, from an external vision-language service or the toy world.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::toyworld::{SceneMeta, ToyError};
use crate::transport::{join_url, Transport, TransportError};
use crate::types::{Caption, ComponentKind, ImageRecord, TokenSpan};

/// Default toy caption template. Bracketed words appear only when the scene has an object.
pub const TOY_TEMPLATE: &str =
    "a {domain} of a {adjective} {subject} [with a {object}] on a {background} background";

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("captioning service error: {message}")]
    Backend {
        message: String,
        payload: Option<String>,
    },
    #[error("invalid caption template: {0}")]
    Template(String),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

#[derive(Clone)]
pub enum CaptionerBackend {
    ExternalService {
        endpoint: String,
        transport: Arc<dyn Transport>,
    },
    Toy { template: String },
}

impl fmt::Debug for CaptionerBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptionerBackend::ExternalService { endpoint, .. } => {
                f.debug_struct("ExternalService").field("endpoint", endpoint).finish()
            }
            CaptionerBackend::Toy { template } => {
                f.debug_struct("Toy").field("template", template).finish()
            }
        }
    }
}

impl CaptionerBackend {
    pub fn toy() -> Self {
        CaptionerBackend::Toy {
            template: TOY_TEMPLATE.to_string(),
        }
    }
}

/// Fills a caption template from a scene, recording the token span of every placeholder.
pub fn render_template(
    template: &str,
    scene: &SceneMeta,
) -> Result<(String, BTreeMap<ComponentKind, TokenSpan>), CaptionError> {
    let mut words: Vec<String> = Vec::new();
    let mut spans = BTreeMap::new();
    let mut group: Option<Vec<&str>> = None;

    fn emit(
        piece: &str,
        scene: &SceneMeta,
        words: &mut Vec<String>,
        spans: &mut BTreeMap<ComponentKind, TokenSpan>,
    ) -> Result<(), CaptionError> {
        if let Some(name) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            let kind: ComponentKind = name.parse().map_err(CaptionError::Template)?;
            let value = scene
                .value(kind)
                .ok_or_else(|| CaptionError::Template(format!("{kind} is unset")))?;
            let start = words.len();
            words.extend(value.split_whitespace().map(str::to_string));
            spans.insert(kind, TokenSpan::new(start, words.len()));
        } else {
            words.push(piece.to_string());
        }
        Ok(())
    }

    for raw in template.split_whitespace() {
        let (opens, rest) = match raw.strip_prefix('[') {
            Some(rest) => (true, rest),
            None => (false, raw),
        };
        let (closes, piece) = match rest.strip_suffix(']') {
            Some(piece) => (true, piece),
            None => (false, rest),
        };
        if opens {
            if group.is_some() {
                return Err(CaptionError::Template("nested optional group".into()));
            }
            group = Some(Vec::new());
        }
        match group.as_mut() {
            Some(g) => g.push(piece),
            None => emit(piece, scene, &mut words, &mut spans)?,
        }
        if closes {
            let g = group
                .take()
                .ok_or_else(|| CaptionError::Template("unbalanced `]`".into()))?;
            // A group is kept only if every placeholder in it has a value.
            let satisfied = g.iter().all(|p| {
                p.strip_prefix('{')
                    .and_then(|p| p.strip_suffix('}'))
                    .and_then(|name| name.parse::<ComponentKind>().ok())
                    .is_none_or(|kind| scene.value(kind).is_some())
            });
            if satisfied {
                for piece in g {
                    emit(piece, scene, &mut words, &mut spans)?;
                }
            }
        }
    }
    if group.is_some() {
        return Err(CaptionError::Template("unclosed `[`".into()));
    }
    Ok((words.join(" "), spans))
}

fn read(path: &Path) -> Result<Vec<u8>, CaptionError> {
    fs::read(path).map_err(|source| CaptionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

/// Captions one image. `media_root` resolves the record's relative paths.
pub fn generate_caption(
    image: &ImageRecord,
    media_root: &Path,
    backend: &CaptionerBackend,
) -> Result<Caption, CaptionError> {
    let image_path = media_root.join(&image.uri);
    let bytes = read(&image_path)?;
    match backend {
        CaptionerBackend::Toy { template } => {
            let sidecar = image.sidecar.as_ref().ok_or_else(|| CaptionError::Io {
                path: image_path.with_extension("json"),
                source: io::Error::new(
                    io::ErrorKind::NotFound,
                    format!("image {} has no scene sidecar", image.image_id),
                ),
            })?;
            let scene = SceneMeta::read_sidecar(&media_root.join(sidecar)).map_err(|e| match e {
                ToyError::Sidecar { path, source } => CaptionError::Io {
                    path: path.into(),
                    source,
                },
                other => CaptionError::Toy(other),
            })?;
            let (text, spans) = render_template(template, &scene)?;
            Ok(Caption {
                image_id: image.image_id.clone(),
                text,
                components: Some(spans),
            })
        }
        CaptionerBackend::ExternalService {
            endpoint,
            transport,
        } => {
            let body = json!({
                "image": base64::engine::general_purpose::STANDARD.encode(&bytes),
                "format": "png",
            });
            let raw = transport
                .post_json(&join_url(endpoint, "caption"), &body)
                .map_err(|e: TransportError| CaptionError::Backend {
                    message: e.to_string(),
                    payload: e.payload().map(str::to_string),
                })?;
            let reply: CaptionReply =
                serde_json::from_str(&raw).map_err(|e| CaptionError::Backend {
                    message: format!("malformed caption reply: {e}"),
                    payload: Some(raw.clone()),
                })?;
            if reply.caption.trim().is_empty() {
                return Err(CaptionError::Backend {
                    message: "empty caption".into(),
                    payload: Some(raw),
                });
            }
            Ok(Caption::new(image.image_id.clone(), reply.caption))
        }
    }
}
