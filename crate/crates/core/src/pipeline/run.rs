//! Report bundles: every stage reads its inputs from, and writes its outputs
//! to, one output directory, so stages can run separately or all at once.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{Backends, DatasetKind, PipelineConfig};
use super::synth::{
    caption_images, generate_planned, plan_edits, read_jsonl, select_sources, synthesize_with_log, write_jsonl,
    CallLog, CaptionOutcome, PlannedEdit, Shortfall,
};
use super::PipelineError;
use crate::dataset;
use crate::evalkit::{self, Arm, EvalResult};
use crate::hashing::{seeded_hash, stable_hash};
use crate::manifest::{DatasetManifest, StatsTable};
use crate::toycir::{self, ToyCirModel};
use crate::toyworld::{self, Vocabulary};
use crate::transport::Transport;
use crate::types::{Caption, Provenance, Split};

pub const MEDIA_DIR: &str = "media";
pub const ORIGINAL_MANIFEST: &str = "manifest.original.json";
pub const SUBSET_MANIFEST: &str = "manifest.subset.json";
pub const SYNTHETIC_MANIFEST: &str = "manifest.synthetic.json";
pub const MERGED_MANIFEST: &str = "manifest.merged.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const EDITS_FILE: &str = "edits.jsonl";
pub const CALL_LOG: &str = "calls.jsonl";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_WIDE_CSV: &str = "results_wide.csv";
pub const RESULTS_TABLE: &str = "results.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const RUN_LOG: &str = "run_log.json";
pub const SUMMARY_FILE: &str = "summary.json";
/// Canonical form of the configuration the bundle's artifacts belong to.
pub const CONFIG_FILE: &str = "config.json";

const ARTIFACTS: [&str; 14] = [
    ORIGINAL_MANIFEST,
    SUBSET_MANIFEST,
    SYNTHETIC_MANIFEST,
    MERGED_MANIFEST,
    CAPTIONS_FILE,
    EDITS_FILE,
    CALL_LOG,
    RESULTS_CSV,
    RESULTS_WIDE_CSV,
    RESULTS_TABLE,
    ABLATION_CSV,
    RUN_LOG,
    SUMMARY_FILE,
    CONFIG_FILE,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub item: Option<String>,
    pub cause: String,
}

/// Machine-readable outcome of a run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    pub stages: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall: Option<Shortfall>,
    pub results: BTreeMap<Arm, EvalResult>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RunLog {
    name: String,
    run_seed: u64,
    seeds: BTreeMap<String, String>,
    backends: BTreeMap<String, String>,
    vocabulary_fingerprint: String,
    config: serde_json::Value,
    stages: Vec<String>,
    loss_traces: BTreeMap<String, Vec<f64>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn checkpoint_path(out: &Path, arm: Arm) -> PathBuf {
    out.join(format!("model.{arm}.ckpt"))
}

/// Makes `out` hold artifacts of `config` only: artifacts written under a
/// different configuration are removed, including the call log.
fn claim(out: &Path, config: &str) -> Result<(), PipelineError> {
    let marker = out.join(CONFIG_FILE);
    let previous = fs::read_to_string(&marker).ok();
    if previous.as_deref() == Some(config) {
        return Ok(());
    }
    if previous.is_some() || out.join(SUMMARY_FILE).exists() {
        for name in ARTIFACTS {
            let path = out.join(name);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        for arm in Arm::BOTH {
            let path = checkpoint_path(out, arm);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        let media = out.join(MEDIA_DIR);
        if media.exists() {
            fs::remove_dir_all(&media).map_err(io_err(&media))?;
        }
    }
    write_text(&marker, config)
}

fn in_stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::stage(stage, e)
}

pub struct Bundle {
    pub config: PipelineConfig,
    pub out: PathBuf,
    backends: Backends,
    log: CallLog,
    run_log: RunLog,
    shortfall: Option<Shortfall>,
}

impl Bundle {
    pub fn new(config: PipelineConfig, out: &Path) -> Result<Self, PipelineError> {
        let backends = Backends::from_config(&config.backends);
        Self::with_backends(config, out, backends)
    }

    /// A bundle whose external backends talk through `transport`.
    pub fn with_transport(config: PipelineConfig, out: &Path, transport: Arc<dyn Transport>) -> Result<Self, PipelineError> {
        let backends = Backends::with_transport(&config.backends, Some(transport));
        Self::with_backends(config, out, backends)
    }

    pub fn with_backends(config: PipelineConfig, out: &Path, backends: Backends) -> Result<Self, PipelineError> {
        config.validate()?;
        fs::create_dir_all(out).map_err(io_err(out))?;
        claim(out, &config.canonical_json())?;
        let log = CallLog::open(&out.join(CALL_LOG))?;
        let mut run_log = RunLog {
            name: config.name.clone(),
            run_seed: config.seed,
            vocabulary_fingerprint: format!("{:016x}", Vocabulary::builtin().fingerprint()),
            config: serde_json::to_value(&config).expect("config serializes"),
            ..RunLog::default()
        };
        run_log.backends = backends.versions().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let seed = config.seed;
        for (name, value) in [
            ("world", seed.to_string()),
            ("subsample", seed.to_string()),
            ("sources", format!("{:016x}", seeded_hash(seed, &["sources"]))),
            ("train", Self::train_seed_of(seed).to_string()),
            ("items", format!("hash({seed}, reference_image_id, attempt)")),
        ] {
            run_log.seeds.insert(name.to_string(), value);
        }
        Ok(Bundle {
            config,
            out: out.to_path_buf(),
            backends,
            log,
            run_log,
            shortfall: None,
        })
    }

    fn train_seed_of(seed: u64) -> u64 {
        seeded_hash(seed, &["train"])
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn config_hash(&self) -> String {
        format!("{:016x}", stable_hash(&[self.config.canonical_json().as_bytes()]))
    }

    fn done(&mut self, stage: &str) {
        if !self.run_log.stages.iter().any(|s| s == stage) {
            self.run_log.stages.push(stage.to_string());
        }
    }

    fn load_manifest(&self, name: &str) -> Result<Option<DatasetManifest>, PipelineError> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(None);
        }
        DatasetManifest::load(&path).map(Some).map_err(in_stage("load"))
    }

    fn save_manifest(&self, name: &str, manifest: &DatasetManifest) -> Result<(), PipelineError> {
        manifest.save(self.path(name)).map_err(in_stage("save"))
    }

    /// The full original dataset, built or loaded once.
    pub fn original(&mut self) -> Result<DatasetManifest, PipelineError> {
        if let Some(m) = self.load_manifest(ORIGINAL_MANIFEST)? {
            return Ok(m);
        }
        let d = &self.config.dataset;
        let split_of = |files: &[PathBuf]| files.to_vec();
        let manifest = match d.kind {
            DatasetKind::Toy => {
                toyworld::build_world(&self.out.join(MEDIA_DIR), MEDIA_DIR, &d.world, self.config.seed)
                    .map_err(in_stage("dataset"))?
            }
            DatasetKind::Manifest => {
                let path = d.root.clone().expect("validated");
                let mut m = DatasetManifest::load(&path).map_err(in_stage("dataset"))?;
                // Re-anchor the root so the copy in the bundle resolves to the same media.
                m.root = m.media_root().canonicalize().unwrap_or(m.media_root()).display().to_string();
                m
            }
            DatasetKind::Cirr => {
                let root = d.root.clone().expect("validated");
                let mut m = dataset::load_cirr(&d.train_captions[0], &d.train_splits[0], &root, Split::Train)
                    .map_err(in_stage("dataset"))?;
                if let (Some(c), Some(s)) = (d.test_captions.first(), d.test_splits.first()) {
                    let test = dataset::load_cirr(c, s, &root, Split::Test).map_err(in_stage("dataset"))?;
                    m = dataset::merge(&m, &test).map_err(in_stage("dataset"))?;
                }
                m.name = "cirr".into();
                m
            }
            DatasetKind::Fashioniq => {
                let root = d.root.clone().expect("validated");
                let mut m = dataset::load_fashioniq(&d.train_captions, &split_of(&d.train_splits), &root, Split::Train)
                    .map_err(in_stage("dataset"))?;
                if !d.test_captions.is_empty() {
                    let val = dataset::load_fashioniq(&d.test_captions, &split_of(&d.test_splits), &root, Split::Val)
                        .map_err(in_stage("dataset"))?;
                    let shared: std::collections::HashSet<String> =
                        m.images.iter().map(|r| r.image_id.clone()).collect();
                    let mut val = val;
                    val.images.retain(|r| !shared.contains(&r.image_id));
                    m = dataset::merge(&m, &val).map_err(in_stage("dataset"))?;
                }
                m.name = "fashioniq".into();
                m
            }
        };
        let manifest = manifest.with_base_dir(&self.out);
        self.save_manifest(ORIGINAL_MANIFEST, &manifest)?;
        self.done("dataset");
        Ok(manifest)
    }

    /// Originals with the train split subsampled to `dataset.fraction`.
    pub fn subset(&mut self) -> Result<DatasetManifest, PipelineError> {
        if let Some(m) = self.load_manifest(SUBSET_MANIFEST)? {
            return Ok(m);
        }
        let original = self.original()?;
        let subset = dataset::subsample_images(&original, self.config.dataset.fraction, self.config.seed)
            .map_err(in_stage("subsample"))?;
        self.save_manifest(SUBSET_MANIFEST, &subset)?;
        self.done("subsample");
        Ok(subset)
    }

    /// Number of synthetic triplets to produce for `subset`.
    pub fn synthetic_count(&self, subset: &DatasetManifest) -> usize {
        let d = &self.config.dataset;
        d.synthetic_count.unwrap_or_else(|| {
            let manual = subset
                .triplets_in(Split::Train)
                .into_iter()
                .filter(|t| t.provenance == Provenance::Manual)
                .count();
            (d.synthetic_multiplier * manual as f64).round() as usize
        })
    }

    pub fn sources(&mut self) -> Result<DatasetManifest, PipelineError> {
        let subset = self.subset()?;
        Ok(select_sources(&subset, self.config.dataset.source_images, self.config.seed))
    }

    pub fn caption_stage(&mut self) -> Result<Vec<Caption>, PipelineError> {
        let pool = self.sources()?;
        let images: Vec<_> = pool.images.iter().collect();
        let outcomes = caption_images(
            &images,
            &pool.media_root(),
            &self.backends.captioner,
            self.backends.workers,
            &self.log,
        )?;
        let captions: Vec<Caption> = outcomes
            .into_iter()
            .filter_map(|o| match o {
                CaptionOutcome::Captioned { caption } => Some(caption),
                CaptionOutcome::Failed { .. } => None,
            })
            .collect();
        write_json(&self.path(CAPTIONS_FILE), &captions)?;
        self.done("caption");
        Ok(captions)
    }

    fn captions(&mut self) -> Result<Vec<Caption>, PipelineError> {
        let path = self.path(CAPTIONS_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            return serde_json::from_str(&text).map_err(in_stage("caption"));
        }
        self.caption_stage()
    }

    /// Plans the configured number of edits without generating targets.
    pub fn perturb_stage(&mut self) -> Result<Vec<PlannedEdit>, PipelineError> {
        let captions = self.captions()?;
        let pool = self.sources()?;
        let subset = self.subset()?;
        let n = self.synthetic_count(&subset);
        let plan = plan_edits(
            &pool,
            &captions,
            n,
            &self.backends.perturber,
            self.config.seed,
            self.config.generation.retry_budget,
            &self.log,
        )?;
        write_jsonl(&self.path(EDITS_FILE), &plan)?;
        self.done("perturb");
        Ok(plan)
    }

    /// Generates the targets of the planned edits, without replacing failures.
    pub fn generate_stage(&mut self) -> Result<DatasetManifest, PipelineError> {
        let path = self.path(EDITS_FILE);
        let plan: Vec<PlannedEdit> = if path.exists() {
            read_jsonl(&path)?
        } else {
            self.perturb_stage()?
        };
        let pool = self.sources()?;
        let (manifest, annotated) =
            generate_planned(&pool, &plan, &self.backends, &self.config.generation, &self.log)?;
        write_jsonl(&path, &annotated)?;
        self.save_manifest(SYNTHETIC_MANIFEST, &manifest)?;
        self.done("generate");
        Ok(manifest)
    }

    /// Caption, perturb and generate with replacement of failed items.
    pub fn synth_stage(&mut self) -> Result<DatasetManifest, PipelineError> {
        let subset = self.subset()?;
        let n = self.synthetic_count(&subset);
        let pool = self.sources()?;
        let synthesis = synthesize_with_log(
            &pool,
            n,
            &self.backends,
            &self.config.generation,
            self.config.seed,
            &self.log,
        )?;
        write_json(&self.path(CAPTIONS_FILE), &synthesis.captions)?;
        write_jsonl(&self.path(EDITS_FILE), &synthesis.plan)?;
        self.save_manifest(SYNTHETIC_MANIFEST, &synthesis.manifest)?;
        self.shortfall = synthesis.shortfall;
        self.done("synthesize");
        Ok(synthesis.manifest)
    }

    pub fn synthetic(&mut self) -> Result<DatasetManifest, PipelineError> {
        match self.load_manifest(SYNTHETIC_MANIFEST)? {
            Some(m) => Ok(m),
            None => self.synth_stage(),
        }
    }

    pub fn arm_manifest(&mut self, arm: Arm) -> Result<DatasetManifest, PipelineError> {
        let subset = self.subset()?;
        match arm {
            Arm::WithoutSynthetic => Ok(subset),
            Arm::WithSynthetic => {
                if let Some(m) = self.load_manifest(MERGED_MANIFEST)? {
                    return Ok(m);
                }
                let synthetic = self.synthetic()?;
                let mut merged = dataset::merge(&subset, &synthetic).map_err(in_stage("assemble"))?;
                merged.name = format!("{}+synthetic", subset.name);
                self.save_manifest(MERGED_MANIFEST, &merged)?;
                self.done("assemble");
                Ok(merged)
            }
        }
    }

    pub fn checkpoint_path(&self, arm: Arm) -> PathBuf {
        checkpoint_path(&self.out, arm)
    }

    fn fresh_model(&self) -> ToyCirModel {
        ToyCirModel::new(self.config.train.dim, self.config.train.hash_seed)
    }

    fn train_on(&self, data: &DatasetManifest) -> Result<(ToyCirModel, Vec<f64>), PipelineError> {
        let triplets = data.triplets_in(Split::Train);
        let config = self.config.train.train_config(Self::train_seed_of(self.config.seed));
        toycir::train(&self.fresh_model(), &triplets, data, &config).map_err(in_stage("train"))
    }

    pub fn train_stage(&mut self) -> Result<BTreeMap<Arm, ToyCirModel>, PipelineError> {
        let mut models = BTreeMap::new();
        for arm in Arm::BOTH {
            let data = self.arm_manifest(arm)?;
            let (model, trace) = self.train_on(&data)?;
            model.save(&self.checkpoint_path(arm)).map_err(in_stage("train"))?;
            self.run_log.loss_traces.insert(arm.to_string(), trace);
            models.insert(arm, model);
        }
        self.done("train");
        Ok(models)
    }

    /// Evaluation split: test when it has queries, otherwise validation.
    pub fn eval_split(manifest: &DatasetManifest) -> Split {
        if manifest.triplets_in(Split::Test).is_empty() {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn eval_stage(&mut self) -> Result<BTreeMap<Arm, EvalResult>, PipelineError> {
        let eval = self.config.eval.eval_config();
        let mut results = BTreeMap::new();
        let mut models = BTreeMap::new();
        for arm in Arm::BOTH {
            let path = self.checkpoint_path(arm);
            if path.exists() {
                models.insert(arm, ToyCirModel::load(&path).map_err(in_stage("eval"))?);
            }
        }
        if models.len() < Arm::BOTH.len() {
            models = self.train_stage()?;
        }
        for arm in Arm::BOTH {
            let data = self.arm_manifest(arm)?;
            let split = Self::eval_split(&data);
            let result = evalkit::evaluate(&models[&arm], &data, split, &eval).map_err(in_stage("eval"))?;
            results.insert(arm, result);
        }
        let rows: Vec<(String, EvalResult)> = results.iter().map(|(a, r)| (a.to_string(), r.clone())).collect();
        let table = evalkit::render_results_table(&rows).map_err(in_stage("eval"))?;
        write_text(&self.path(RESULTS_TABLE), &table.text)?;
        write_text(&self.path(RESULTS_WIDE_CSV), &table.csv)?;
        write_text(
            &self.path(RESULTS_CSV),
            &evalkit::results_csv(&rows).map_err(in_stage("eval"))?,
        )?;
        self.done("eval");
        Ok(results)
    }

    pub fn ablation_stage(&mut self) -> Result<evalkit::AblationTable, PipelineError> {
        let original = self.original()?;
        let synthetic = self.synthetic()?;
        let eval = self.config.eval.eval_config();
        let fractions = self.config.ablation.fractions.clone();
        let bundle = &*self;
        let table = evalkit::run_ablation(
            &original,
            &fractions,
            &synthetic,
            |data, _, _| bundle.train_on(data).map(|(m, _)| m).map_err(Into::into),
            &eval,
            self.config.seed,
        )
        .map_err(in_stage("ablation"))?;
        write_text(&self.path(ABLATION_CSV), &table.to_csv().map_err(in_stage("ablation"))?)?;
        self.done("ablation");
        Ok(table)
    }

    pub fn stats(&mut self) -> Result<BTreeMap<String, StatsTable>, PipelineError> {
        let mut out = BTreeMap::new();
        for name in [ORIGINAL_MANIFEST, SUBSET_MANIFEST, SYNTHETIC_MANIFEST, MERGED_MANIFEST] {
            if let Some(m) = self.load_manifest(name)? {
                out.insert(name.to_string(), m.stats().map_err(in_stage("stats"))?);
            }
        }
        Ok(out)
    }

    fn write_run_log(&self) -> Result<(), PipelineError> {
        write_json(&self.path(RUN_LOG), &self.run_log)
    }

    fn summary(&self, status: RunStatus, failure: Option<Failure>, results: BTreeMap<Arm, EvalResult>) -> Summary {
        let mut counts = BTreeMap::new();
        if let Ok(Some(m)) = self.load_manifest(ORIGINAL_MANIFEST) {
            counts.insert("original_train_images".into(), m.images_in(Split::Train).count());
        }
        if let Ok(Some(m)) = self.load_manifest(SUBSET_MANIFEST) {
            counts.insert("subset_train_images".into(), m.images_in(Split::Train).count());
            counts.insert("manual_train_triplets".into(), m.triplets_in(Split::Train).len());
            counts.insert("eval_queries".into(), m.triplets_in(Self::eval_split(&m)).len());
        }
        if let Ok(Some(m)) = self.load_manifest(SYNTHETIC_MANIFEST) {
            counts.insert("synthetic_triplets".into(), m.triplets.len());
        }
        Summary {
            name: self.config.name.clone(),
            seed: self.config.seed,
            config_hash: self.config_hash(),
            status,
            failure,
            stages: self.run_log.stages.clone(),
            counts,
            shortfall: self.shortfall.clone(),
            results,
        }
    }

    /// Completed summary of an identical earlier run in this directory, if any.
    pub fn completed_summary(&self) -> Option<Summary> {
        let text = fs::read_to_string(self.path(SUMMARY_FILE)).ok()?;
        let summary: Summary = serde_json::from_str(&text).ok()?;
        (summary.status == RunStatus::Complete && summary.config_hash == self.config_hash()).then_some(summary)
    }

    fn run_stages(&mut self) -> Result<BTreeMap<Arm, EvalResult>, PipelineError> {
        self.original()?;
        self.subset()?;
        self.synth_stage()?;
        if !self.config.train.enabled {
            return Ok(BTreeMap::new());
        }
        self.arm_manifest(Arm::WithSynthetic)?;
        self.train_stage()?;
        let results = self.eval_stage()?;
        if self.config.ablation.enabled {
            self.ablation_stage()?;
        }
        Ok(results)
    }

    /// Runs every configured stage. A completed bundle with the same
    /// configuration is left untouched and its summary returned.
    pub fn run(&mut self) -> Result<Summary, PipelineError> {
        if let Some(summary) = self.completed_summary() {
            return Ok(summary);
        }
        // Derived artifacts are rebuilt; the call log keeps external work.
        for name in [MERGED_MANIFEST, SYNTHETIC_MANIFEST] {
            let path = self.path(name);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        match self.run_stages() {
            Ok(results) => {
                let summary = self.summary(RunStatus::Complete, None, results);
                self.write_run_log()?;
                write_json(&self.path(SUMMARY_FILE), &summary)?;
                Ok(summary)
            }
            Err(e) => {
                let failure = match &e {
                    PipelineError::Stage { stage, item, cause } => Failure {
                        stage: stage.clone(),
                        item: item.clone(),
                        cause: cause.clone(),
                    },
                    other => Failure {
                        stage: other.stage_name().to_string(),
                        item: None,
                        cause: other.to_string(),
                    },
                };
                let summary = self.summary(RunStatus::Failed, Some(failure), BTreeMap::new());
                self.write_run_log()?;
                write_json(&self.path(SUMMARY_FILE), &summary)?;
                Err(e)
            }
        }
    }
}

/// Loads `config_file` and runs it into `out`.
pub fn run_experiment(config_file: &Path, out: &Path) -> Result<Summary, PipelineError> {
    let config = PipelineConfig::load(config_file)?;
    Bundle::new(config, out)?.run()
}
