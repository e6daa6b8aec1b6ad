//! Caption, perturb and generate: turning a pool of reference images into
//! synthetic triplets, with per-item seeds, deduplicated edits, retry budgets
//! and a replayable call log for external backends.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::Backends;
use super::PipelineError;
use crate::captioner::{generate_caption, CaptionError, CaptionerBackend};
use crate::cfgen::{generate_target, GenerationConfig, Generated, GeneratorBackend, MediaWriter};
use crate::hashing::{seeded_hash, stable_hash};
use crate::manifest::{validate_manifest, DatasetManifest};
use crate::perturber::{
    parse_components, perturb_caption_excluding, sample_kind, validate_edit, DedupRegistry, PerturbError,
    PerturberBackend,
};
use crate::types::{Caption, CaptionEdit, ComponentKind, ImageRecord, Source, Split, Triplet};

pub const SYNTHETIC_SUBDIR: &str = "synthetic";

/// Seed of one (reference, attempt) item; independent of processing order.
pub fn item_seed(run_seed: u64, reference_id: &str, attempt: u32) -> u64 {
    seeded_hash(run_seed, &[reference_id, &attempt.to_string()])
}

pub fn synthetic_image_id(n: u64) -> String {
    format!("syn-{n:06}")
}

/// Append-only JSONL log of completed backend calls, keyed by request.
/// Replaying it lets an interrupted run resume without repeating calls.
#[derive(Debug, Default)]
pub struct CallLog {
    entries: Mutex<HashMap<String, Value>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    key: String,
    value: Value,
}

impl CallLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file. A torn final line from a crash is ignored.
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let io = |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path).map_err(io)?).lines() {
                let line = line.map_err(io)?;
                if let Ok(entry) = serde_json::from_str::<LogLine>(&line) {
                    entries.insert(entry.key, entry.value);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(CallLog {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let entries = self.entries.lock().expect("log lock");
        entries.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<(), PipelineError> {
        let value = serde_json::to_value(value).expect("log value serializes");
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&LogLine {
                key: key.to_string(),
                value: value.clone(),
            })
            .expect("log line serializes");
            line.push('\n');
            let mut file = file.lock().expect("log file lock");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| PipelineError::Io {
                    path: self.path.clone().unwrap_or_default(),
                    source,
                })?;
        }
        self.entries.lock().expect("log lock").insert(key.to_string(), value);
        Ok(())
    }
}

fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

fn stage_err(stage: &str, item: &str, cause: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.to_string(),
        item: Some(item.to_string()),
        cause: cause.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaptionOutcome {
    Captioned { caption: Caption },
    Failed { reason: String },
}

/// Captions every image; per-image failures other than a backend outage are
/// reported, not fatal. External results are recorded in `log`.
pub fn caption_images(
    images: &[&ImageRecord],
    media_root: &Path,
    backend: &CaptionerBackend,
    workers: usize,
    log: &CallLog,
) -> Result<Vec<CaptionOutcome>, PipelineError> {
    let external = matches!(backend, CaptionerBackend::ExternalService { .. });
    let results: Vec<Result<CaptionOutcome, PipelineError>> = thread_pool(workers).install(|| {
        images
            .par_iter()
            .map(|image| {
                let key = if external {
                    let bytes = fs::read(media_root.join(&image.uri)).unwrap_or_default();
                    format!("caption|{}|{:016x}", image.image_id, stable_hash(&[&bytes]))
                } else {
                    String::new()
                };
                if external {
                    if let Some(hit) = log.get::<CaptionOutcome>(&key) {
                        return Ok(hit);
                    }
                }
                let outcome = match generate_caption(image, media_root, backend) {
                    Ok(caption) => CaptionOutcome::Captioned { caption },
                    Err(e @ CaptionError::Backend { .. }) => return Err(stage_err("caption", &image.image_id, e)),
                    Err(e) => CaptionOutcome::Failed { reason: e.to_string() },
                };
                if external {
                    log.put(&key, &outcome)?;
                }
                Ok(outcome)
            })
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum PerturbOutcome {
    Edit { edit: CaptionEdit },
    Exhausted,
    Rejected { reason: String },
}

fn perturb_logged(
    caption: &Caption,
    kind: ComponentKind,
    seed: u64,
    backend: &PerturberBackend,
    exclude: &BTreeSet<String>,
    log: &CallLog,
) -> Result<PerturbOutcome, PipelineError> {
    let external = matches!(backend, PerturberBackend::ExternalLlm { .. });
    let key = format!(
        "perturb|{}|{:016x}|{kind}|{seed}|{exclude:?}",
        caption.image_id,
        stable_hash(&[caption.text.as_bytes()])
    );
    if external {
        if let Some(hit) = log.get(&key) {
            return Ok(hit);
        }
    }
    let outcome = match perturb_caption_excluding(caption, kind, seed, backend, exclude) {
        Ok(edit) => PerturbOutcome::Edit { edit },
        Err(PerturbError::Exhausted { .. } | PerturbError::Unperturbable { .. }) => PerturbOutcome::Exhausted,
        Err(e) if e.is_skippable() => PerturbOutcome::Rejected { reason: e.to_string() },
        Err(e) => return Err(stage_err("perturb", &caption.image_id, e)),
    };
    if external {
        log.put(&key, &outcome)?;
    }
    Ok(outcome)
}

/// One planned synthetic item, as written to the edits file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedEdit {
    pub reference_image_id: String,
    pub attempt: u32,
    pub seed: u64,
    pub target_image_id: String,
    pub edit: CaptionEdit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ItemOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ItemOutcome {
    Generated,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum GenOutcome {
    Target { record: ImageRecord, triplet: Triplet },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub requested: usize,
    pub produced: usize,
    /// References whose edit space ran out.
    pub exhausted_references: usize,
    /// References dropped after exhausting their retry budget.
    pub failed_references: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub manifest: DatasetManifest,
    pub captions: Vec<Caption>,
    pub plan: Vec<PlannedEdit>,
    pub shortfall: Option<Shortfall>,
}

#[derive(Default)]
struct RefState {
    attempts: u32,
    failures: u32,
    exhausted: BTreeSet<ComponentKind>,
    dead: bool,
    edit_space_exhausted: bool,
}

enum Plan {
    Edit(CaptionEdit, u32, u64),
    Exhausted,
    /// Rejected or duplicate edit; counts against the retry budget.
    Failed,
}

struct Planner<'a> {
    captions: HashMap<&'a str, Caption>,
    backend: &'a PerturberBackend,
    run_seed: u64,
    registry: DedupRegistry,
    log: &'a CallLog,
}

impl Planner<'_> {
    fn plan(&self, reference: &str, state: &mut RefState) -> Result<Plan, PipelineError> {
        let caption = &self.captions[reference];
        let attempt = state.attempts;
        state.attempts += 1;
        let seed = item_seed(self.run_seed, reference, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let available: Vec<ComponentKind> = ComponentKind::ALL
                .into_iter()
                .filter(|k| !state.exhausted.contains(k))
                .filter(|&k| caption.span(k).is_some_and(|s| !s.is_empty()))
                .collect();
            let Some(kind) = sample_kind(self.backend.kind_weights(), &available, &mut rng) else {
                return Ok(Plan::Exhausted);
            };
            let exclude = self.registry.used(reference, kind);
            match perturb_logged(caption, kind, seed, self.backend, &exclude, self.log)? {
                PerturbOutcome::Edit { edit } => {
                    if !self.registry.insert(reference, kind, &edit.new_value()) {
                        return Ok(Plan::Failed);
                    }
                    return Ok(Plan::Edit(edit, attempt, seed));
                }
                PerturbOutcome::Exhausted => {
                    state.exhausted.insert(kind);
                }
                PerturbOutcome::Rejected { .. } => return Ok(Plan::Failed),
            }
        }
    }
}

fn generate_logged(
    image: &ImageRecord,
    planned: &PlannedEdit,
    media_root: &Path,
    config: &GenerationConfig,
    backend: &GeneratorBackend,
    writer: &MediaWriter,
    log: &CallLog,
) -> Result<GenOutcome, PipelineError> {
    let external = matches!(backend, GeneratorBackend::ExternalDiffusion { .. });
    let config = GenerationConfig {
        seed: planned.seed,
        ..config.clone()
    };
    let settings = serde_json::to_string(&config).expect("config serializes");
    // Everything the service sees, so a stale entry can never answer a different request.
    let key = format!(
        "generate|{}|{}|{:016x}",
        planned.target_image_id,
        planned.reference_image_id,
        stable_hash(&[planned.edit.counterfactual_caption.text.as_bytes(), settings.as_bytes()])
    );
    if external {
        if let Some(hit) = log.get(&key) {
            return Ok(hit);
        }
    }
    let outcome = match generate_target(
        image,
        &planned.edit,
        media_root,
        &config,
        backend,
        writer,
        &planned.target_image_id,
    ) {
        Ok(Generated::Target { record, triplet }) => GenOutcome::Target { record, triplet },
        Ok(Generated::Skipped { reason }) => GenOutcome::Failed { reason },
        Err(e) if e.is_skippable() => GenOutcome::Failed { reason: e.to_string() },
        Err(e) => return Err(stage_err("generate", &planned.target_image_id, e)),
    };
    if external {
        log.put(&key, &outcome)?;
    }
    Ok(outcome)
}

/// Train-split original images of `manifest`, uniformly sampled down to `count` with `seed`.
pub fn select_sources(manifest: &DatasetManifest, count: Option<usize>, seed: u64) -> DatasetManifest {
    use rand::seq::index::sample;
    let train: Vec<&ImageRecord> = manifest
        .images_in(Split::Train)
        .filter(|r| r.source == Source::Original)
        .collect();
    let keep: Vec<usize> = match count {
        Some(c) if c < train.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(seed, &["sources"]));
            let mut idx = sample(&mut rng, train.len(), c).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..train.len()).collect(),
    };
    DatasetManifest {
        name: format!("{}-sources", manifest.name),
        root: manifest.root.clone(),
        images: keep.into_iter().map(|i| train[i].clone()).collect(),
        triplets: Vec::new(),
        base_dir: manifest.base_dir.clone(),
    }
}

/// `n` synthetic triplets from the pool's train images with in-memory bookkeeping.
pub fn synthesize_triplets(
    pool: &DatasetManifest,
    n: usize,
    backends: &Backends,
    config: &GenerationConfig,
    seed: u64,
) -> Result<Synthesis, PipelineError> {
    synthesize_with_log(pool, n, backends, config, seed, &CallLog::in_memory())
}

/// References are visited round-robin (with reuse) until `n` targets exist or
/// every reference is exhausted or out of retries. Target ids are reserved in
/// plan order, so the output does not depend on worker scheduling.
pub fn synthesize_with_log(
    pool: &DatasetManifest,
    n: usize,
    backends: &Backends,
    config: &GenerationConfig,
    seed: u64,
    log: &CallLog,
) -> Result<Synthesis, PipelineError> {
    config.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    backends
        .perturber
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let media_root = pool.media_root();
    let mut manifest = DatasetManifest {
        name: format!("{}-synthetic", pool.name.trim_end_matches("-sources")),
        root: pool.root.clone(),
        images: Vec::new(),
        triplets: Vec::new(),
        base_dir: pool.base_dir.clone(),
    };
    let references: Vec<&ImageRecord> = pool
        .images_in(Split::Train)
        .filter(|r| r.source == Source::Original)
        .collect();
    if n == 0 || references.is_empty() {
        return Ok(Synthesis {
            manifest,
            captions: Vec::new(),
            plan: Vec::new(),
            shortfall: (n > 0).then_some(Shortfall {
                requested: n,
                produced: 0,
                exhausted_references: 0,
                failed_references: 0,
            }),
        });
    }

    let outcomes = caption_images(&references, &media_root, &backends.captioner, backends.workers, log)?;
    let mut states: Vec<RefState> = references.iter().map(|_| RefState::default()).collect();
    let mut captions = Vec::new();
    let mut caption_map = HashMap::new();
    for ((reference, outcome), state) in references.iter().zip(outcomes).zip(states.iter_mut()) {
        match outcome {
            CaptionOutcome::Captioned { caption } => {
                let caption = parse_components(&caption);
                captions.push(caption.clone());
                caption_map.insert(reference.image_id.as_str(), caption);
            }
            CaptionOutcome::Failed { .. } => state.dead = true,
        }
    }
    let planner = Planner {
        captions: caption_map,
        backend: &backends.perturber,
        run_seed: seed,
        registry: DedupRegistry::new(),
        log,
    };
    let writer = MediaWriter::new(&media_root, SYNTHETIC_SUBDIR, 0);
    let pool_threads = thread_pool(backends.workers);

    let mut next_id = 0u64;
    let mut cursor = 0usize;
    let mut plan: Vec<PlannedEdit> = Vec::new();
    let mut generated: Vec<(ImageRecord, Triplet)> = Vec::new();
    while generated.len() < n {
        let want = n - generated.len();
        let mut round: Vec<(usize, PlannedEdit)> = Vec::new();
        while round.len() < want && states.iter().any(|s| !s.dead) {
            let r = cursor % references.len();
            cursor += 1;
            if states[r].dead {
                continue;
            }
            let state = &mut states[r];
            match planner.plan(&references[r].image_id, state)? {
                Plan::Edit(edit, attempt, item) => {
                    round.push((
                        r,
                        PlannedEdit {
                            reference_image_id: references[r].image_id.clone(),
                            attempt,
                            seed: item,
                            target_image_id: synthetic_image_id(next_id),
                            edit,
                            outcome: None,
                        },
                    ));
                    next_id += 1;
                }
                Plan::Exhausted => {
                    state.dead = true;
                    state.edit_space_exhausted = true;
                }
                Plan::Failed => {
                    state.failures += 1;
                    state.dead = state.failures >= config.retry_budget;
                }
            }
        }
        if round.is_empty() {
            break;
        }
        let results: Vec<Result<GenOutcome, PipelineError>> = pool_threads.install(|| {
            round
                .par_iter()
                .map(|(r, planned)| {
                    generate_logged(references[*r], planned, &media_root, config, &backends.generator, &writer, log)
                })
                .collect()
        });
        for ((r, mut planned), result) in round.into_iter().zip(results) {
            match result? {
                GenOutcome::Target { record, triplet } => {
                    planned.outcome = Some(ItemOutcome::Generated);
                    generated.push((record, triplet));
                }
                GenOutcome::Failed { reason } => {
                    planned.outcome = Some(ItemOutcome::Failed { reason });
                    let state = &mut states[r];
                    state.failures += 1;
                    state.dead = state.dead || state.failures >= config.retry_budget;
                }
            }
            plan.push(planned);
        }
    }

    let used: BTreeSet<&str> = generated.iter().map(|(_, t)| t.reference_image_id.as_str()).collect();
    manifest.images = references
        .iter()
        .filter(|r| used.contains(r.image_id.as_str()))
        .map(|r| (*r).clone())
        .collect();
    for (record, triplet) in generated {
        manifest.images.push(record);
        manifest.triplets.push(triplet);
    }
    check_synthetic(&manifest)?;
    let produced = manifest.triplets.len();
    let shortfall = (produced < n).then(|| Shortfall {
        requested: n,
        produced,
        exhausted_references: states.iter().filter(|s| s.edit_space_exhausted).count(),
        failed_references: states
            .iter()
            .filter(|s| s.dead && !s.edit_space_exhausted)
            .count(),
    });
    Ok(Synthesis {
        manifest,
        captions,
        plan,
        shortfall,
    })
}

fn check_synthetic(manifest: &DatasetManifest) -> Result<(), PipelineError> {
    if let Some(v) = validate_manifest(manifest).into_iter().next() {
        return Err(stage_err("assemble", &v.id.clone(), v));
    }
    for t in &manifest.triplets {
        if let Some(edit) = &t.edit {
            if let Some(v) = validate_edit(edit).into_iter().next() {
                return Err(stage_err("assemble", &t.id, format!("{v:?}")));
            }
        }
    }
    Ok(())
}

/// Generates targets for an already planned edit list without drawing replacements.
pub fn generate_planned(
    pool: &DatasetManifest,
    plan: &[PlannedEdit],
    backends: &Backends,
    config: &GenerationConfig,
    log: &CallLog,
) -> Result<(DatasetManifest, Vec<PlannedEdit>), PipelineError> {
    config.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let media_root = pool.media_root();
    let index = pool.image_index();
    let writer = MediaWriter::new(&media_root, SYNTHETIC_SUBDIR, 0);
    let results: Vec<Result<GenOutcome, PipelineError>> = thread_pool(backends.workers).install(|| {
        plan.par_iter()
            .map(|p| {
                let image = index
                    .get(p.reference_image_id.as_str())
                    .ok_or_else(|| stage_err("generate", &p.reference_image_id, "reference not in pool"))?;
                generate_logged(image, p, &media_root, config, &backends.generator, &writer, log)
            })
            .collect()
    });
    let mut manifest = DatasetManifest {
        name: format!("{}-synthetic", pool.name.trim_end_matches("-sources")),
        root: pool.root.clone(),
        images: Vec::new(),
        triplets: Vec::new(),
        base_dir: pool.base_dir.clone(),
    };
    let mut annotated = Vec::with_capacity(plan.len());
    let mut generated = Vec::new();
    for (p, result) in plan.iter().zip(results) {
        let mut p = p.clone();
        match result? {
            GenOutcome::Target { record, triplet } => {
                p.outcome = Some(ItemOutcome::Generated);
                generated.push((record, triplet));
            }
            GenOutcome::Failed { reason } => p.outcome = Some(ItemOutcome::Failed { reason }),
        }
        annotated.push(p);
    }
    let used: BTreeSet<&str> = generated.iter().map(|(_, t)| t.reference_image_id.as_str()).collect();
    manifest.images = pool
        .images
        .iter()
        .filter(|r| used.contains(r.image_id.as_str()))
        .cloned()
        .collect();
    for (record, triplet) in generated {
        manifest.images.push(record);
        manifest.triplets.push(triplet);
    }
    check_synthetic(&manifest)?;
    Ok((manifest, annotated))
}

/// Plans `n` edits (no generation), round-robin over the pool like synthesis.
pub fn plan_edits(
    pool: &DatasetManifest,
    captions: &[Caption],
    n: usize,
    backend: &PerturberBackend,
    seed: u64,
    retry_budget: u32,
    log: &CallLog,
) -> Result<Vec<PlannedEdit>, PipelineError> {
    backend.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let references: Vec<&ImageRecord> = pool
        .images_in(Split::Train)
        .filter(|r| r.source == Source::Original)
        .collect();
    let by_id: HashMap<&str, &Caption> = captions.iter().map(|c| (c.image_id.as_str(), c)).collect();
    let mut states: Vec<RefState> = references
        .iter()
        .map(|r| RefState {
            dead: !by_id.contains_key(r.image_id.as_str()),
            ..RefState::default()
        })
        .collect();
    let planner = Planner {
        captions: by_id
            .iter()
            .map(|(&id, &c)| (id, parse_components(c)))
            .collect(),
        backend,
        run_seed: seed,
        registry: DedupRegistry::new(),
        log,
    };
    let mut plan = Vec::new();
    let mut cursor = 0usize;
    while plan.len() < n && states.iter().any(|s| !s.dead) {
        let r = cursor % references.len();
        cursor += 1;
        if states[r].dead {
            continue;
        }
        match planner.plan(&references[r].image_id, &mut states[r])? {
            Plan::Edit(edit, attempt, item) => plan.push(PlannedEdit {
                reference_image_id: references[r].image_id.clone(),
                attempt,
                seed: item,
                target_image_id: synthetic_image_id(plan.len() as u64),
                edit,
                outcome: None,
            }),
            Plan::Exhausted => states[r].dead = true,
            Plan::Failed => {
                states[r].failures += 1;
                states[r].dead = states[r].failures >= retry_budget;
            }
        }
    }
    Ok(plan)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("item serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
