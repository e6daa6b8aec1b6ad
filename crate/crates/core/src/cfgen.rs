//! Target-image generation: invert the reference image, then re-generate it
//! under the counterfactual caption with attention injection.
//!
//! The diffusion sampler, null-text optimization and attention plumbing live
//! behind [`GeneratorBackend`]. The toy backend implements the same contract
//! exactly: inversion is lossless and an edit re-renders the scene with only
//! the edited component changed.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::perturber::validate_edit;
use crate::toyworld::{self, SceneMeta, ToyError, Vocabulary};
use crate::transport::{join_url, Transport};
use crate::types::{Caption, CaptionEdit, ImageRecord, InjectionMode, Provenance, Source, Triplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub num_inversion_steps: u32,
    pub guidance_scale: f64,
    /// Fraction of steps during which the source cross-attention maps are injected.
    pub cross_attention_injection_fraction: f64,
    pub self_attention_injection_fraction: f64,
    pub null_text_opt_iters: u32,
    pub seed: u64,
    pub output_size: u32,
    /// Largest acceptable mean absolute reconstruction error, in [0, 1] units.
    pub inversion_tolerance: f64,
    /// Failed generations allowed per reference image before it is dropped.
    pub retry_budget: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_inversion_steps: 50,
            guidance_scale: 7.5,
            cross_attention_injection_fraction: 0.8,
            self_attention_injection_fraction: 0.4,
            null_text_opt_iters: 10,
            seed: 0,
            output_size: 512,
            inversion_tolerance: 0.05,
            retry_budget: 3,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.num_inversion_steps < 1 {
            return bad("num_inversion_steps must be at least 1");
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale > 0.0) {
            return bad("guidance_scale must be positive");
        }
        for (name, f) in [
            ("cross_attention_injection_fraction", self.cross_attention_injection_fraction),
            ("self_attention_injection_fraction", self.self_attention_injection_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(GenError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.output_size == 0 {
            return bad("output_size must be positive");
        }
        if !(self.inversion_tolerance.is_finite() && self.inversion_tolerance >= 0.0) {
            return bad("inversion_tolerance must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("reconstruction error {error} exceeds tolerance {tolerance}")]
    InversionQuality { error: f64, tolerance: f64 },
    #[error("generation backend error ({context}): {message}")]
    Backend {
        context: String,
        message: String,
        payload: Option<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Toy(#[from] ToyError),
}

impl GenError {
    /// Errors after which the attempt is skipped and another edit drawn.
    pub fn is_skippable(&self) -> bool {
        matches!(
            self,
            GenError::InversionQuality { .. } | GenError::Precondition(_) | GenError::Toy(_)
        )
    }
}

#[derive(Clone)]
pub enum GeneratorBackend {
    ExternalDiffusion {
        endpoint: String,
        transport: Arc<dyn Transport>,
    },
    Toy,
}

impl fmt::Debug for GeneratorBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorBackend::ExternalDiffusion { endpoint, .. } => f
                .debug_struct("ExternalDiffusion")
                .field("endpoint", endpoint)
                .finish(),
            GeneratorBackend::Toy => f.write_str("Toy"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrajectoryHandle {
    Toy { scene: SceneMeta },
    External { trajectory_id: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub image_id: String,
    pub handle: TrajectoryHandle,
    pub reconstruction_error: f64,
}

/// Writes synthetic rasters under `{media_root}/{subdir}` with ids from a shared counter.
#[derive(Debug)]
pub struct MediaWriter {
    media_root: PathBuf,
    subdir: String,
    next: AtomicU64,
}

impl MediaWriter {
    pub fn new(media_root: impl Into<PathBuf>, subdir: impl Into<String>, first_id: u64) -> Self {
        Self {
            media_root: media_root.into(),
            subdir: subdir.into(),
            next: AtomicU64::new(first_id),
        }
    }

    pub fn media_root(&self) -> &Path {
        &self.media_root
    }

    pub fn next_id(&self) -> String {
        format!("syn-{:06}", self.next.fetch_add(1, Ordering::SeqCst))
    }

    pub fn peek_next(&self) -> u64 {
        self.next.load(Ordering::SeqCst)
    }

    fn write(
        &self,
        id: &str,
        png: &[u8],
        scene: Option<&SceneMeta>,
        reference: &ImageRecord,
    ) -> Result<ImageRecord, GenError> {
        let dir = self.media_root.join(&self.subdir);
        let io_err = |path: PathBuf| move |source| GenError::Io { path, source };
        fs::create_dir_all(&dir).map_err(io_err(dir.clone()))?;
        let png_path = dir.join(format!("{id}.png"));
        fs::write(&png_path, png).map_err(io_err(png_path.clone()))?;
        let sidecar = match scene {
            Some(scene) => {
                let path = dir.join(format!("{id}.json"));
                fs::write(&path, scene.to_sidecar_json()).map_err(io_err(path.clone()))?;
                Some(format!("{}/{id}.json", self.subdir))
            }
            None => None,
        };
        Ok(ImageRecord {
            image_id: id.to_string(),
            uri: format!("{}/{id}.png", self.subdir),
            split: reference.split,
            source: Source::Synthetic,
            sidecar,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, GenError> {
    fs::read(path).map_err(|source| GenError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn backend_err(context: &str) -> impl Fn(crate::transport::TransportError) -> GenError + '_ {
    move |e| GenError::Backend {
        context: context.to_string(),
        message: e.to_string(),
        payload: e.payload().map(str::to_string),
    }
}

#[derive(Deserialize)]
struct InvertReply {
    trajectory_id: String,
    reconstruction_error: f64,
}

#[derive(Deserialize)]
struct EditReply {
    image: String,
}

/// Mean absolute per-channel difference in [0, 1].
pub fn mean_abs_error(a: &image::RgbImage, b: &image::RgbImage) -> f64 {
    if a.dimensions() != b.dimensions() {
        return 1.0;
    }
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as u64)
        .sum();
    total as f64 / (a.as_raw().len() as f64 * 255.0)
}

pub fn invert_image(
    image: &ImageRecord,
    caption: &Caption,
    media_root: &Path,
    config: &GenerationConfig,
    backend: &GeneratorBackend,
) -> Result<LatentTrajectory, GenError> {
    config.validate()?;
    if caption.image_id != image.image_id {
        return Err(GenError::Precondition(format!(
            "caption belongs to {}, not {}",
            caption.image_id, image.image_id
        )));
    }
    let bytes = read(&media_root.join(&image.uri))?;
    let trajectory = match backend {
        GeneratorBackend::Toy => {
            let sidecar = image.sidecar.as_ref().ok_or_else(|| {
                GenError::Precondition(format!("toy image {} has no sidecar", image.image_id))
            })?;
            let scene = SceneMeta::read_sidecar(&media_root.join(sidecar))?;
            let observed = toyworld::decode_png(&bytes)?;
            let reconstruction = toyworld::render(&scene, Vocabulary::builtin());
            LatentTrajectory {
                image_id: image.image_id.clone(),
                reconstruction_error: mean_abs_error(&observed, &reconstruction),
                handle: TrajectoryHandle::Toy { scene },
            }
        }
        GeneratorBackend::ExternalDiffusion { endpoint, transport } => {
            let body = json!({
                "image": base64::engine::general_purpose::STANDARD.encode(&bytes),
                "caption": caption.text,
                "steps": config.num_inversion_steps,
                "guidance": config.guidance_scale,
                "null_opt_iters": config.null_text_opt_iters,
                "seed": config.seed,
            });
            let context = format!("invert {}", image.image_id);
            let raw = transport
                .post_json(&join_url(endpoint, "invert"), &body)
                .map_err(backend_err(&context))?;
            let reply: InvertReply = serde_json::from_str(&raw).map_err(|e| GenError::Backend {
                context: context.clone(),
                message: format!("malformed invert reply: {e}"),
                payload: Some(raw.clone()),
            })?;
            if !reply.reconstruction_error.is_finite() || reply.reconstruction_error < 0.0 {
                return Err(GenError::Backend {
                    context,
                    message: "reconstruction_error must be finite and non-negative".into(),
                    payload: Some(raw),
                });
            }
            LatentTrajectory {
                image_id: image.image_id.clone(),
                reconstruction_error: reply.reconstruction_error,
                handle: TrajectoryHandle::External {
                    trajectory_id: reply.trajectory_id,
                },
            }
        }
    };
    if trajectory.reconstruction_error > config.inversion_tolerance {
        return Err(GenError::InversionQuality {
            error: trajectory.reconstruction_error,
            tolerance: config.inversion_tolerance,
        });
    }
    Ok(trajectory)
}

/// The scene after applying a validated edit to the trajectory's scene.
pub fn edited_scene(scene: &SceneMeta, edit: &CaptionEdit) -> Result<SceneMeta, GenError> {
    let old = edit.old_value();
    if scene.value(edit.kind) != Some(old.as_str()) {
        return Err(GenError::Precondition(format!(
            "edit replaces {} `{old}` but the scene has {:?}",
            edit.kind,
            scene.value(edit.kind)
        )));
    }
    let next = scene.with_value(edit.kind, &edit.new_value());
    next.validate(Vocabulary::builtin())?;
    Ok(next)
}

/// Generated target raster (PNG bytes) and its record.
pub struct EditedImage {
    pub png: Vec<u8>,
    pub record: ImageRecord,
}

pub fn edit_image(
    trajectory: &LatentTrajectory,
    reference: &ImageRecord,
    edit: &CaptionEdit,
    config: &GenerationConfig,
    backend: &GeneratorBackend,
    writer: &MediaWriter,
    target_id: &str,
) -> Result<EditedImage, GenError> {
    config.validate()?;
    if trajectory.image_id != reference.image_id || edit.reference_caption.image_id != reference.image_id {
        return Err(GenError::Precondition(
            "trajectory, edit and reference image disagree".into(),
        ));
    }
    let violations = validate_edit(edit);
    if !violations.is_empty() {
        return Err(GenError::Precondition(format!("edit is invalid: {violations:?}")));
    }
    match (&trajectory.handle, backend) {
        (TrajectoryHandle::Toy { scene }, GeneratorBackend::Toy) => {
            let target = edited_scene(scene, edit)?;
            let png = toyworld::encode_png(&toyworld::render(&target, Vocabulary::builtin()))?;
            let record = writer.write(target_id, &png, Some(&target), reference)?;
            Ok(EditedImage { png, record })
        }
        (
            TrajectoryHandle::External { trajectory_id },
            GeneratorBackend::ExternalDiffusion { endpoint, transport },
        ) => {
            let body = json!({
                "trajectory_id": trajectory_id,
                "source_caption": edit.reference_caption.text,
                "target_caption": edit.counterfactual_caption.text,
                "cross_frac": config.cross_attention_injection_fraction,
                "self_frac": config.self_attention_injection_fraction,
                "seed": config.seed,
            });
            let context = format!("edit {} ({}: {})", reference.image_id, edit.kind, edit.modification_text);
            let raw = transport
                .post_json(&join_url(endpoint, "edit"), &body)
                .map_err(backend_err(&context))?;
            let malformed = |message: String| GenError::Backend {
                context: context.clone(),
                message,
                payload: Some(raw.clone()),
            };
            let reply: EditReply =
                serde_json::from_str(&raw).map_err(|e| malformed(format!("malformed edit reply: {e}")))?;
            let png = base64::engine::general_purpose::STANDARD
                .decode(reply.image.as_bytes())
                .map_err(|e| malformed(format!("image is not base64: {e}")))?;
            toyworld::decode_png(&png).map_err(|e| malformed(format!("image is not a png: {e}")))?;
            let record = writer.write(target_id, &png, None, reference)?;
            Ok(EditedImage { png, record })
        }
        _ => Err(GenError::Precondition(
            "trajectory was produced by a different backend".into(),
        )),
    }
}

/// Result of one generation attempt.
pub enum Generated {
    Target { record: ImageRecord, triplet: Triplet },
    /// Inversion was not faithful enough; the caller should draw another edit.
    Skipped { reason: String },
}

impl fmt::Debug for Generated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generated::Target { record, .. } => write!(f, "Target({})", record.image_id),
            Generated::Skipped { reason } => write!(f, "Skipped({reason})"),
        }
    }
}

pub fn triplet_id_for(target_id: &str) -> String {
    format!("t-{target_id}")
}

/// Inversion followed by editing, assembled into a synthetic triplet.
pub fn generate_target(
    image: &ImageRecord,
    edit: &CaptionEdit,
    media_root: &Path,
    config: &GenerationConfig,
    backend: &GeneratorBackend,
    writer: &MediaWriter,
    target_id: &str,
) -> Result<Generated, GenError> {
    config.validate()?;
    let trajectory = match invert_image(image, &edit.reference_caption, media_root, config, backend) {
        Ok(t) => t,
        Err(GenError::InversionQuality { error, tolerance }) => {
            return Ok(Generated::Skipped {
                reason: format!("reconstruction error {error} above {tolerance}"),
            })
        }
        Err(e) => return Err(e),
    };
    let edited = edit_image(&trajectory, image, edit, config, backend, writer, target_id)?;
    let mut edit = edit.clone();
    edit.counterfactual_caption.image_id = edited.record.image_id.clone();
    let triplet = Triplet {
        id: triplet_id_for(&edited.record.image_id),
        reference_image_id: image.image_id.clone(),
        modification_text: edit.modification_text.clone(),
        target_image_id: edited.record.image_id.clone(),
        provenance: Provenance::Synthetic,
        injection: Some(InjectionMode::for_edit(&edit)),
        edit: Some(edit),
        generation_seed: Some(config.seed),
        source_captions: Vec::new(),
    };
    Ok(Generated::Target {
        record: edited.record,
        triplet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{generate_caption, CaptionerBackend};
    use crate::perturber::{perturb_caption, PerturberBackend};
    use crate::toyworld::{write_scene_files, RASTER_SIZE};
    use crate::types::{ComponentKind, Split};

    fn setup(dir: &Path, scene: &SceneMeta) -> (ImageRecord, Caption) {
        let (uri, sidecar) = write_scene_files(dir, "orig", "ref0", scene, Vocabulary::builtin()).unwrap();
        let record = ImageRecord {
            image_id: "ref0".into(),
            uri,
            split: Split::Train,
            source: Source::Original,
            sidecar: Some(sidecar),
        };
        let caption = generate_caption(&record, dir, &CaptionerBackend::toy()).unwrap();
        (record, caption)
    }

    fn white_car() -> SceneMeta {
        SceneMeta {
            subject: "sports car".into(),
            object: Some("flag".into()),
            adjective: "white".into(),
            background: "mountains".into(),
            domain: "photo".into(),
        }
    }

    fn edit_to(caption: &Caption, kind: ComponentKind, value: &str) -> CaptionEdit {
        (0..1000u64)
            .map(|s| perturb_caption(caption, kind, s, &PerturberBackend::rule_based()).unwrap())
            .find(|e| e.new_value() == value)
            .unwrap()
    }

    #[test]
    fn toy_inversion_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (record, caption) = setup(dir.path(), &white_car());
        let t = invert_image(&record, &caption, dir.path(), &GenerationConfig::default(), &GeneratorBackend::Toy)
            .unwrap();
        assert_eq!(t.reconstruction_error, 0.0);
    }

    #[test]
    fn adjective_edit_changes_only_white_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (record, caption) = setup(dir.path(), &white_car());
        let edit = edit_to(&caption, ComponentKind::Adjective, "red");
        let writer = MediaWriter::new(dir.path(), "synthetic", 0);
        let id = writer.next_id();
        let out = generate_target(&record, &edit, dir.path(), &GenerationConfig::default(), &GeneratorBackend::Toy, &writer, &id)
            .unwrap();
        let Generated::Target { record: target, triplet } = out else { panic!("skipped") };
        assert_eq!(target.source, Source::Synthetic);
        assert_eq!(triplet.modification_text, "replace the white with red");
        assert_eq!(triplet.injection, Some(InjectionMode::WordSwap));

        let vocab = Vocabulary::builtin();
        let reference = toyworld::render(&white_car(), vocab);
        let produced = toyworld::decode_png(&fs::read(dir.path().join(&target.uri)).unwrap()).unwrap();
        let white = vocab.adjectives.iter().find(|a| a.name == "white").unwrap().rgb;
        let red = vocab.adjectives.iter().find(|a| a.name == "red").unwrap().rgb;
        let mut changed = 0;
        for (a, b) in reference.pixels().zip(produced.pixels()) {
            if a != b {
                assert_eq!(a.0, white);
                assert_eq!(b.0, red);
                changed += 1;
            }
        }
        assert!(changed > 0);
        // Oracle: direct render of the red scene.
        let direct = toyworld::render(&white_car().with_value(ComponentKind::Adjective, "red"), vocab);
        assert_eq!(produced, direct);
    }

    #[test]
    fn background_edit_leaves_subject_block_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let (record, caption) = setup(dir.path(), &white_car());
        let edit = edit_to(&caption, ComponentKind::Background, "buildings");
        let writer = MediaWriter::new(dir.path(), "synthetic", 0);
        let Generated::Target { record: target, .. } =
            generate_target(&record, &edit, dir.path(), &GenerationConfig::default(), &GeneratorBackend::Toy, &writer, "syn-x")
                .unwrap()
        else {
            panic!()
        };
        let before = white_car();
        let after = before.with_value(ComponentKind::Background, "buildings");
        let a = toyworld::render(&before, Vocabulary::builtin());
        let b = toyworld::decode_png(&fs::read(dir.path().join(&target.uri)).unwrap()).unwrap();
        let mut background_changed = false;
        for y in 0..RASTER_SIZE {
            for x in 0..RASTER_SIZE {
                let region = toyworld::region_of(&before, x, y);
                if region != ComponentKind::Background {
                    assert_eq!(a.get_pixel(x, y), b.get_pixel(x, y), "{region:?} at {x},{y}");
                } else if a.get_pixel(x, y) != b.get_pixel(x, y) {
                    background_changed = true;
                }
                assert_eq!(toyworld::region_of(&after, x, y), region);
            }
        }
        assert!(background_changed);
    }

    #[test]
    fn identity_edit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (record, caption) = setup(dir.path(), &white_car());
        let mut edit = edit_to(&caption, ComponentKind::Adjective, "red");
        edit.counterfactual_caption = edit.reference_caption.clone();
        edit.changed_span_cf = edit.changed_span_ref;
        let writer = MediaWriter::new(dir.path(), "synthetic", 0);
        let err = generate_target(&record, &edit, dir.path(), &GenerationConfig::default(), &GeneratorBackend::Toy, &writer, "syn-x")
            .unwrap_err();
        assert!(matches!(err, GenError::Precondition(_)));
    }

    #[test]
    fn zero_steps_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let (record, caption) = setup(dir.path(), &white_car());
        let edit = edit_to(&caption, ComponentKind::Adjective, "red");
        let config = GenerationConfig {
            num_inversion_steps: 0,
            ..Default::default()
        };
        let writer = MediaWriter::new(dir.path(), "synthetic", 0);
        let err = generate_target(&record, &edit, dir.path(), &config, &GeneratorBackend::Toy, &writer, "syn-x").unwrap_err();
        assert!(matches!(err, GenError::Config(_)));
    }

    #[test]
    fn same_inputs_give_identical_bytes() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let (record, caption) = setup(dir.path(), &white_car());
            let edit = edit_to(&caption, ComponentKind::Subject, "boat");
            let writer = MediaWriter::new(dir.path(), "synthetic", 0);
            let Generated::Target { record: target, triplet } =
                generate_target(&record, &edit, dir.path(), &GenerationConfig::default(), &GeneratorBackend::Toy, &writer, "syn-x")
                    .unwrap()
            else {
                panic!()
            };
            assert_eq!(triplet.injection, Some(InjectionMode::Refinement));
            fs::read(dir.path().join(target.uri)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corrupted_reference_fails_inversion_and_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let (record, caption) = setup(dir.path(), &white_car());
        // Overwrite the raster with a different scene so reconstruction is lossy.
        let other = white_car().with_value(ComponentKind::Background, "grid");
        let png = toyworld::encode_png(&toyworld::render(&other, Vocabulary::builtin())).unwrap();
        fs::write(dir.path().join(&record.uri), png).unwrap();
        let config = GenerationConfig {
            inversion_tolerance: 0.0,
            ..Default::default()
        };
        let err = invert_image(&record, &caption, dir.path(), &config, &GeneratorBackend::Toy).unwrap_err();
        assert!(matches!(err, GenError::InversionQuality { .. }));
        let edit = edit_to(&caption, ComponentKind::Adjective, "red");
        let writer = MediaWriter::new(dir.path(), "synthetic", 0);
        let out = generate_target(&record, &edit, dir.path(), &config, &GeneratorBackend::Toy, &writer, "syn-x").unwrap();
        assert!(matches!(out, Generated::Skipped { .. }));
    }

    #[test]
    fn config_defaults_and_fraction_bounds() {
        let c = GenerationConfig::default();
        assert_eq!((c.num_inversion_steps, c.null_text_opt_iters, c.output_size), (50, 10, 512));
        assert_eq!((c.guidance_scale, c.cross_attention_injection_fraction, c.self_attention_injection_fraction), (7.5, 0.8, 0.4));
        assert!(c.validate().is_ok());
        let bad = GenerationConfig {
            cross_attention_injection_fraction: 1.5,
            ..c
        };
        assert!(bad.validate().is_err());
    }
}
