//! Deterministic procedural scenes standing in for real photographs.
//!
//! A scene is a handful of attributes. From it we derive a caption (with
//! component spans), a 64x64 raster, and the sidecar JSON that toy backends
//! read instead of looking at pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::OnceLock;

use image::{ImageEncoder, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::stable_hash;
use crate::manifest::DatasetManifest;
use crate::types::{ComponentKind, ImageRecord, Source, Split, TokenSpan, Triplet};

pub const RASTER_SIZE: u32 = 64;
const BORDER: u32 = 3;
const SUBJECT_BOX: (u32, u32, u32, u32) = (18, 22, 46, 50);
const OBJECT_BOX: (u32, u32, u32, u32) = (46, 6, 58, 18);
const GLYPH_CELLS: u32 = 7;
const INK: [u8; 3] = [40, 40, 40];

static VOCABULARY_JSON: &str = include_str!("../assets/toy_vocabulary.json");

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("scene value `{value}` is not in the {kind} vocabulary")]
    UnknownValue { kind: ComponentKind, value: String },
    #[error("scene field {0} is empty")]
    EmptyField(ComponentKind),
    #[error("reading sidecar {path}: {source}")]
    Sidecar {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parsing sidecar {path}: {source}")]
    SidecarParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("encoding png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, Deserialize)]
pub struct ColorEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, Deserialize)]
pub struct BackgroundEntry {
    pub name: String,
    pub rgb: [u8; 3],
    pub accent: [u8; 3],
    pub pattern: String,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Vocabulary {
    pub version: u32,
    pub adjectives: Vec<ColorEntry>,
    pub subjects: Vec<String>,
    pub backgrounds: Vec<BackgroundEntry>,
    pub objects: Vec<ColorEntry>,
    pub domains: Vec<ColorEntry>,
}

impl Vocabulary {
    /// The checked-in vocabulary.
    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| serde_json::from_str(VOCABULARY_JSON).expect("bundled vocabulary parses"))
    }

    /// Allowed values for a component, in file order.
    pub fn values(&self, kind: ComponentKind) -> Vec<&str> {
        match kind {
            ComponentKind::Adjective => self.adjectives.iter().map(|e| e.name.as_str()).collect(),
            ComponentKind::Subject => self.subjects.iter().map(String::as_str).collect(),
            ComponentKind::Background => self.backgrounds.iter().map(|e| e.name.as_str()).collect(),
            ComponentKind::Object => self.objects.iter().map(|e| e.name.as_str()).collect(),
            ComponentKind::Domain => self.domains.iter().map(|e| e.name.as_str()).collect(),
        }
    }

    pub fn contains(&self, kind: ComponentKind, value: &str) -> bool {
        self.values(kind).contains(&value)
    }

    /// Which component a vocabulary value belongs to, if any.
    pub fn kind_of(&self, value: &str) -> Option<ComponentKind> {
        ComponentKind::ALL.into_iter().find(|&k| self.contains(k, value))
    }

    fn color(entries: &[ColorEntry], name: &str) -> [u8; 3] {
        entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.rgb)
            .unwrap_or([128, 128, 128])
    }

    /// Stable fingerprint of the vocabulary contents.
    pub fn fingerprint(&self) -> u64 {
        stable_hash(&[VOCABULARY_JSON.as_bytes()])
    }
}

/// Visual content of one toy image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneMeta {
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    pub adjective: String,
    pub background: String,
    pub domain: String,
}

impl SceneMeta {
    pub fn value(&self, kind: ComponentKind) -> Option<&str> {
        match kind {
            ComponentKind::Subject => Some(&self.subject),
            ComponentKind::Object => self.object.as_deref(),
            ComponentKind::Adjective => Some(&self.adjective),
            ComponentKind::Background => Some(&self.background),
            ComponentKind::Domain => Some(&self.domain),
        }
    }

    pub fn with_value(&self, kind: ComponentKind, value: &str) -> SceneMeta {
        let mut next = self.clone();
        let value = value.to_string();
        match kind {
            ComponentKind::Subject => next.subject = value,
            ComponentKind::Object => next.object = Some(value),
            ComponentKind::Adjective => next.adjective = value,
            ComponentKind::Background => next.background = value,
            ComponentKind::Domain => next.domain = value,
        }
        next
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), ToyError> {
        for kind in ComponentKind::ALL {
            let Some(value) = self.value(kind) else { continue };
            if value.trim().is_empty() {
                return Err(ToyError::EmptyField(kind));
            }
            if !vocab.contains(kind, value) {
                return Err(ToyError::UnknownValue {
                    kind,
                    value: value.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Component kinds whose value differs between two scenes.
    pub fn differences(&self, other: &SceneMeta) -> Vec<ComponentKind> {
        ComponentKind::ALL
            .into_iter()
            .filter(|&k| self.value(k) != other.value(k))
            .collect()
    }

    /// Bag of normalized attribute words.
    pub fn words(&self) -> Vec<String> {
        ComponentKind::ALL
            .into_iter()
            .filter_map(|k| self.value(k))
            .flat_map(crate::types::tokenize)
            .collect()
    }

    pub fn read_sidecar(path: &Path) -> Result<SceneMeta, ToyError> {
        let text = fs::read_to_string(path).map_err(|source| ToyError::Sidecar {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ToyError::SidecarParse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_sidecar_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("scene serializes");
        text.push('\n');
        text
    }
}

/// Caption text and component spans for a scene:
/// `a {domain} of a {adjective} {subject}[ with a {object}] on a {background} background`.
pub fn caption_for(scene: &SceneMeta) -> (String, BTreeMap<ComponentKind, TokenSpan>) {
    let mut words: Vec<String> = Vec::new();
    let mut spans = BTreeMap::new();
    let mut push = |words: &mut Vec<String>, text: &str, kind: Option<ComponentKind>| {
        let start = words.len();
        words.extend(text.split_whitespace().map(str::to_string));
        if let Some(kind) = kind {
            spans.insert(kind, TokenSpan::new(start, words.len()));
        }
    };
    push(&mut words, "a", None);
    push(&mut words, &scene.domain, Some(ComponentKind::Domain));
    push(&mut words, "of a", None);
    push(&mut words, &scene.adjective, Some(ComponentKind::Adjective));
    push(&mut words, &scene.subject, Some(ComponentKind::Subject));
    if let Some(object) = &scene.object {
        push(&mut words, "with a", None);
        push(&mut words, object, Some(ComponentKind::Object));
    }
    push(&mut words, "on a", None);
    push(&mut words, &scene.background, Some(ComponentKind::Background));
    push(&mut words, "background", None);
    (words.join(" "), spans)
}

fn in_box((x0, y0, x1, y1): (u32, u32, u32, u32), x: u32, y: u32) -> bool {
    (x0..x1).contains(&x) && (y0..y1).contains(&y)
}

/// Which component owns pixel `(x, y)` when rendering `scene`.
pub fn region_of(scene: &SceneMeta, x: u32, y: u32) -> ComponentKind {
    if x < BORDER || y < BORDER || x >= RASTER_SIZE - BORDER || y >= RASTER_SIZE - BORDER {
        ComponentKind::Domain
    } else if in_box(SUBJECT_BOX, x, y) {
        // The subject block is opaque: adjective fill plus subject glyph ink.
        if glyph_pixel(&scene.subject, x - SUBJECT_BOX.0, y - SUBJECT_BOX.1) {
            ComponentKind::Subject
        } else {
            ComponentKind::Adjective
        }
    } else if scene.object.is_some() && in_box(OBJECT_BOX, x, y) {
        ComponentKind::Object
    } else {
        ComponentKind::Background
    }
}

/// Pixels an edit of `kind` may touch: the union of that component's
/// region under the scene before and after the edit. Subject and adjective
/// share the opaque subject block.
pub fn edit_region(before: &SceneMeta, after: &SceneMeta, kind: ComponentKind, x: u32, y: u32) -> bool {
    match kind {
        ComponentKind::Subject | ComponentKind::Adjective => in_box(SUBJECT_BOX, x, y),
        _ => region_of(before, x, y) == kind || region_of(after, x, y) == kind,
    }
}

fn glyph_bits(subject: &str) -> u64 {
    // 4 distinct columns mirrored into a 7-wide glyph, at least a few cells set.
    let mut h = stable_hash(&[b"glyph", subject.as_bytes()]);
    loop {
        let bits = h & ((1 << 28) - 1);
        if bits.count_ones() >= 8 && bits.count_ones() <= 20 {
            return bits;
        }
        h = crate::hashing::splitmix64(&mut h);
    }
}

fn glyph_pixel(subject: &str, dx: u32, dy: u32) -> bool {
    let cell = (SUBJECT_BOX.2 - SUBJECT_BOX.0) / GLYPH_CELLS;
    let (cx, cy) = (dx / cell, dy / cell);
    let col = cx.min(GLYPH_CELLS - 1 - cx);
    let bits = glyph_bits(subject);
    (bits >> (cy * 4 + col)) & 1 == 1
}

fn background_accent(pattern: &str, x: u32, y: u32) -> bool {
    match pattern {
        "waves" => ((x + (y / 2)) / 5).is_multiple_of(2),
        "blocks" => ((x / 8) + (y / 8)).is_multiple_of(2),
        "grid" => x.is_multiple_of(8) || y.is_multiple_of(8),
        "stripes" => (y / 4).is_multiple_of(2),
        "dots" => x.is_multiple_of(6) && y.is_multiple_of(6),
        "diagonal" => ((x + y) / 4).is_multiple_of(2),
        _ => false,
    }
}

/// Renders a scene. Pure function of the scene and vocabulary.
pub fn render(scene: &SceneMeta, vocab: &Vocabulary) -> RgbImage {
    let background = vocab
        .backgrounds
        .iter()
        .find(|b| b.name == scene.background);
    let adjective = Vocabulary::color(&vocab.adjectives, &scene.adjective);
    let domain = Vocabulary::color(&vocab.domains, &scene.domain);
    let object = scene
        .object
        .as_deref()
        .map(|o| Vocabulary::color(&vocab.objects, o));

    RgbImage::from_fn(RASTER_SIZE, RASTER_SIZE, |x, y| {
        let rgb = match region_of(scene, x, y) {
            ComponentKind::Domain => domain,
            ComponentKind::Subject => INK,
            ComponentKind::Adjective => adjective,
            ComponentKind::Object => object.unwrap_or_default(),
            ComponentKind::Background => match background {
                Some(b) if background_accent(&b.pattern, x, y) => b.accent,
                Some(b) => b.rgb,
                None => [128, 128, 128],
            },
        };
        Rgb(rgb)
    })
}

pub fn encode_png(raster: &RgbImage) -> Result<Vec<u8>, ToyError> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes).write_image(
        raster.as_raw(),
        raster.width(),
        raster.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ToyError> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8())
}

/// Every valid scene, in a fixed order.
pub fn all_scenes(vocab: &Vocabulary) -> Vec<SceneMeta> {
    let mut objects: Vec<Option<&str>> = vec![None];
    objects.extend(vocab.values(ComponentKind::Object).into_iter().map(Some));
    let mut out = Vec::new();
    for domain in vocab.values(ComponentKind::Domain) {
        for adjective in vocab.values(ComponentKind::Adjective) {
            for subject in vocab.values(ComponentKind::Subject) {
                for object in &objects {
                    for background in vocab.values(ComponentKind::Background) {
                        out.push(SceneMeta {
                            subject: subject.into(),
                            object: object.map(str::to_string),
                            adjective: adjective.into(),
                            background: background.into(),
                            domain: domain.into(),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Writes `{dir}/{id}.png` and `{dir}/{id}.json`; returns the relative file names.
pub fn write_scene_files(
    media_root: &Path,
    subdir: &str,
    id: &str,
    scene: &SceneMeta,
    vocab: &Vocabulary,
) -> Result<(String, String), ToyError> {
    let dir = media_root.join(subdir);
    fs::create_dir_all(&dir)?;
    let png = encode_png(&render(scene, vocab))?;
    fs::write(dir.join(format!("{id}.png")), png)?;
    fs::write(dir.join(format!("{id}.json")), scene.to_sidecar_json())?;
    Ok((format!("{subdir}/{id}.png"), format!("{subdir}/{id}.json")))
}

/// Modification text for a substitution.
pub fn substitution_text(old: &str, new: &str) -> String {
    format!("replace the {old} with {new}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub max_train_triplets: usize,
    pub max_test_triplets: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            train_scenes: 1000,
            test_scenes: 1200,
            max_train_triplets: 1500,
            max_test_triplets: 400,
        }
    }
}

/// Ordered pairs of scenes that differ by exactly one substituted component.
fn single_edit_pairs(scenes: &[SceneMeta]) -> Vec<(usize, usize, ComponentKind)> {
    let mut pairs = Vec::new();
    for (i, a) in scenes.iter().enumerate() {
        for (j, b) in scenes.iter().enumerate() {
            if i == j {
                continue;
            }
            if let [kind] = a.differences(b)[..] {
                if a.value(kind).is_some() && b.value(kind).is_some() {
                    pairs.push((i, j, kind));
                }
            }
        }
    }
    pairs
}

/// Builds a toy dataset: disjoint train and test scene pools with "manual"
/// triplets between existing images that differ in one component.
pub fn build_world(
    media_root: &Path,
    root_label: &str,
    config: &WorldConfig,
    seed: u64,
) -> Result<DatasetManifest, ToyError> {
    let vocab = Vocabulary::builtin();
    let mut scenes = all_scenes(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let train_end = config.train_scenes.min(scenes.len());
    let test_end = (train_end + config.test_scenes).min(scenes.len());

    let mut manifest = DatasetManifest::new("toy-world", root_label);
    for (split, pool, cap) in [
        (Split::Train, &scenes[..train_end], config.max_train_triplets),
        (Split::Test, &scenes[train_end..test_end], config.max_test_triplets),
    ] {
        let ids: Vec<String> = (0..pool.len())
            .map(|i| format!("toy-{split}-{i:05}"))
            .collect();
        for (id, scene) in ids.iter().zip(pool) {
            let (uri, sidecar) = write_scene_files(media_root, "orig", id, scene, vocab)?;
            manifest.images.push(ImageRecord {
                image_id: id.clone(),
                uri,
                split,
                source: Source::Original,
                sidecar: Some(sidecar),
            });
        }
        let mut pairs = single_edit_pairs(pool);
        pairs.shuffle(&mut rng);
        pairs.truncate(cap);
        for (n, (i, j, kind)) in pairs.into_iter().enumerate() {
            let old = pool[i].value(kind).unwrap_or_default();
            let new = pool[j].value(kind).unwrap_or_default();
            manifest.triplets.push(Triplet::manual(
                format!("manual-{split}-{n:05}"),
                ids[i].clone(),
                substitution_text(old, new),
                ids[j].clone(),
            ));
        }
    }
    Ok(manifest)
}
