//! A small trainable composed retrieval model for the toy world: hashed
//! bag-of-attribute image features, hashed text features in the same space, and
//! one affine fusion layer trained with an in-batch contrastive loss.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{BoxError, CirModel, EmbeddingVector};
use crate::hashing::{hashed_vector, seeded_hash};
use crate::manifest::DatasetManifest;
use crate::toyworld::SceneMeta;
use crate::types::{tokenize, ImageRecord, Triplet};

pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_HASH_SEED: u64 = 0x70c1_5eed;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FORGECIR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("image `{image}` has no toy sidecar")]
    MissingSidecar { image: String },
    #[error("image `{image}`: {message}")]
    Feature { image: String, message: String },
    #[error("triplet `{triplet}` references unknown image `{image}`")]
    UnknownImage { triplet: String, image: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch_index} (triplets {batch:?})")]
    NonFinite {
        epoch: usize,
        batch_index: usize,
        batch: Vec<String>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Hashed feature of one word, or of a word sequence when `words.len() > 1`.
pub fn feature(hash_seed: u64, words: &[&str], dim: usize) -> Vec<f64> {
    hashed_vector(seeded_hash(hash_seed, words), dim)
}

pub fn featurize_scene(scene: &SceneMeta, hash_seed: u64, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for word in scene.words() {
        add_into(&mut acc, &feature(hash_seed, &[&word], dim));
    }
    normalized(acc)
}

/// Unigrams share the image word space; bigrams carry word order
/// ("the white ... with red" vs "the red ... with white").
pub fn featurize_text(text: &str, hash_seed: u64, dim: usize) -> Vec<f64> {
    let tokens = tokenize(text);
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        add_into(&mut acc, &feature(hash_seed, &[t], dim));
    }
    for pair in tokens.windows(2) {
        add_into(&mut acc, &feature(hash_seed, &[&pair[0], &pair[1]], dim));
    }
    normalized(acc)
}

/// Image embedding from the record's scene sidecar.
pub fn featurize_toy_image(
    record: &ImageRecord,
    manifest: &DatasetManifest,
    hash_seed: u64,
    dim: usize,
) -> Result<Vec<f64>, TrainError> {
    let sidecar = record.sidecar.as_deref().ok_or_else(|| TrainError::MissingSidecar {
        image: record.image_id.clone(),
    })?;
    let scene = SceneMeta::read_sidecar(&manifest.resolve(sidecar)).map_err(|e| TrainError::Feature {
        image: record.image_id.clone(),
        message: e.to_string(),
    })?;
    Ok(featurize_scene(&scene, hash_seed, dim))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2.0,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// `q = normalize(W [image; text] + b)` with `W` of shape `dim x 2 dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCirModel {
    dim: usize,
    hash_seed: u64,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// One training example as feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub reference: Vec<f64>,
    pub text: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyCirModel {
    /// Identity-initialized fusion: queries start as the reference embedding.
    pub fn new(dim: usize, hash_seed: u64) -> Self {
        let mut weights = vec![0.0; dim * 2 * dim];
        for i in 0..dim {
            weights[i * 2 * dim + i] = 1.0;
        }
        ToyCirModel {
            dim,
            hash_seed,
            weights,
            bias: vec![0.0; dim],
        }
    }

    /// Identity plus uniform noise in `[-scale, scale)` on every parameter.
    pub fn random(dim: usize, hash_seed: u64, seed: u64, scale: f64) -> Self {
        let mut model = ToyCirModel::new(dim, hash_seed);
        let mut params = model.params();
        let noise = hashed_vector(seed, params.len());
        params.iter_mut().zip(noise).for_each(|(p, n)| *p += scale * n);
        model.set_params(&params);
        model
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Flat parameter vector: weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter length");
        let (w, b) = params.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    pub fn scene_embedding(&self, scene: &SceneMeta) -> Vec<f64> {
        featurize_scene(scene, self.hash_seed, self.dim)
    }

    pub fn text_features(&self, text: &str) -> Vec<f64> {
        featurize_text(text, self.hash_seed, self.dim)
    }

    fn fuse(&self, image: &[f64], text: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|r| {
                let row = &self.weights[r * 2 * d..(r + 1) * 2 * d];
                let a: f64 = row[..d].iter().zip(image).map(|(w, x)| w * x).sum();
                let b: f64 = row[d..].iter().zip(text).map(|(w, x)| w * x).sum();
                a + b + self.bias[r]
            })
            .collect()
    }

    pub fn compose_features(&self, image: &[f64], text: &[f64]) -> Vec<f64> {
        normalized(self.fuse(image, text))
    }

    /// Mean in-batch contrastive loss and, optionally, its parameter gradient.
    pub fn batch_loss(&self, batch: &[TrainItem], temperature: f64, with_grad: bool) -> (f64, Option<Gradient>) {
        let d = self.dim;
        let n = batch.len();
        let mut loss = 0.0;
        let mut grad = with_grad.then(|| Gradient {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; d],
        });
        let us: Vec<Vec<f64>> = batch.iter().map(|it| self.fuse(&it.reference, &it.text)).collect();
        for (i, u) in us.iter().enumerate() {
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let q: Vec<f64> = u.iter().map(|x| x / norm).collect();
            let logits: Vec<f64> = batch
                .iter()
                .map(|it| q.iter().zip(&it.target).map(|(a, b)| a * b).sum::<f64>() / temperature)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|s| (s - m).exp()).sum();
            loss += m + z.ln() - logits[i];

            let Some(g) = grad.as_mut() else { continue };
            // dL/dq = sum_j (p_j - [i == j]) g_j / (tau n)
            let mut dq = vec![0.0; d];
            for (j, it) in batch.iter().enumerate() {
                let coef = (((logits[j] - m).exp() / z) - if i == j { 1.0 } else { 0.0 }) / (temperature * n as f64);
                dq.iter_mut().zip(&it.target).for_each(|(a, t)| *a += coef * t);
            }
            let qdq: f64 = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
            let du: Vec<f64> = dq.iter().zip(&q).map(|(a, qv)| (a - qv * qdq) / norm).collect();
            let item = &batch[i];
            for (r, &dur) in du.iter().enumerate() {
                if dur == 0.0 {
                    continue;
                }
                let row = &mut g.weights[r * 2 * d..(r + 1) * 2 * d];
                row[..d].iter_mut().zip(&item.reference).for_each(|(w, x)| *w += dur * x);
                row[d..].iter_mut().zip(&item.text).for_each(|(w, x)| *w += dur * x);
                g.bias[r] += dur;
            }
        }
        (loss / n as f64, grad)
    }

    fn step(&mut self, grad: &Gradient, lr: f64) {
        self.weights.iter_mut().zip(&grad.weights).for_each(|(w, g)| *w -= lr * g);
        self.bias.iter_mut().zip(&grad.bias).for_each(|(b, g)| *b -= lr * g);
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            dim: self.dim,
            hash_seed: self.hash_seed,
            num_params: self.num_params(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes = Vec::with_capacity(16 + header.len() + 8 * self.num_params());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for p in self.params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let err = |e: std::io::Error| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let fail = |message: String| TrainError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| fail(e.to_string()))?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_end = 16 + header_len;
        let header: CheckpointHeader = bytes
            .get(16..header_end)
            .ok_or_else(|| fail("truncated header".into()))
            .and_then(|h| serde_json::from_slice(h).map_err(|e| fail(e.to_string())))?;
        let mut model = ToyCirModel::new(header.dim, header.hash_seed);
        if header.num_params != model.num_params() || bytes.len() != header_end + 8 * header.num_params {
            return Err(fail("parameter block does not match header".into()));
        }
        let params: Vec<f64> = bytes[header_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(fail("non-finite parameter".into()));
        }
        model.set_params(&params);
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dim: usize,
    hash_seed: u64,
    num_params: usize,
}

impl CirModel for ToyCirModel {
    fn image_embed(&self, record: &ImageRecord, manifest: &DatasetManifest) -> Result<EmbeddingVector, BoxError> {
        let v = featurize_toy_image(record, manifest, self.hash_seed, self.dim)?;
        Ok(EmbeddingVector::new(v)?)
    }

    fn text_embed(&self, text: &str) -> EmbeddingVector {
        EmbeddingVector::new(self.text_features(text)).expect("hashed features are finite")
    }

    fn compose(&self, image: &EmbeddingVector, text: &EmbeddingVector) -> EmbeddingVector {
        EmbeddingVector::new(self.compose_features(image.values(), text.values())).expect("finite parameters")
    }
}

/// Feature vectors for every triplet, reading each sidecar once.
pub fn train_items(
    model: &ToyCirModel,
    triplets: &[&Triplet],
    manifest: &DatasetManifest,
) -> Result<Vec<TrainItem>, TrainError> {
    let index = manifest.image_index();
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut embed = |triplet: &Triplet, id: &str| -> Result<Vec<f64>, TrainError> {
        if let Some(v) = cache.get(id) {
            return Ok(v.clone());
        }
        let (&key, record) = index.get_key_value(id).ok_or_else(|| TrainError::UnknownImage {
            triplet: triplet.id.clone(),
            image: id.to_string(),
        })?;
        let v = featurize_toy_image(record, manifest, model.hash_seed, model.dim)?;
        cache.insert(key, v.clone());
        Ok(v)
    };
    triplets
        .iter()
        .map(|t| {
            Ok(TrainItem {
                reference: embed(t, &t.reference_image_id)?,
                text: model.text_features(&t.modification_text),
                target: embed(t, &t.target_image_id)?,
            })
        })
        .collect()
}

/// Plain SGD on the in-batch contrastive loss. Returns the trained model and
/// the mean per-triplet loss of every epoch. Batches larger than the data are
/// clamped to the number of triplets.
pub fn train(
    model: &ToyCirModel,
    triplets: &[&Triplet],
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(ToyCirModel, Vec<f64>), TrainError> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(TrainError::Config("no training triplets".into()));
    }
    let items = train_items(model, triplets, manifest)?;
    let (model, trace) = train_on_items(model, &items, config, |i| triplets[i].id.clone())?;
    Ok((model, trace))
}

pub fn train_on_items(
    model: &ToyCirModel,
    items: &[TrainItem],
    config: &TrainConfig,
    name_of: impl Fn(usize) -> String,
) -> Result<(ToyCirModel, Vec<f64>), TrainError> {
    config.validate()?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let batch_size = config.batch_size.min(items.len()).max(1);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_index, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, grad) = model.batch_loss(&batch, config.temperature, true);
            let grad = grad.expect("gradient requested");
            let finite = loss.is_finite() && grad.weights.iter().chain(&grad.bias).all(|g| g.is_finite());
            if !finite {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch_index,
                    batch: chunk.iter().map(|&i| name_of(i)).collect(),
                });
            }
            total += loss * batch.len() as f64;
            model.step(&grad, config.learning_rate);
        }
        trace.push(total / items.len() as f64);
    }
    Ok((model, trace))
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-6)` between the analytic
/// gradient and central finite differences over all parameters.
pub fn finite_difference_check(model: &ToyCirModel, batch: &[TrainItem], temperature: f64, epsilon: f64) -> f64 {
    let (_, grad) = model.batch_loss(batch, temperature, true);
    let grad = grad.expect("gradient requested");
    let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
    let base = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + epsilon;
        probe.set_params(&p);
        let plus = probe.batch_loss(batch, temperature, false).0;
        p[i] = base[i] - epsilon;
        probe.set_params(&p);
        let minus = probe.batch_loss(batch, temperature, false).0;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
