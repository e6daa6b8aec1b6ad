//! Experiment configuration, read from one TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::captioner::{CaptionerBackend, TOY_TEMPLATE};
use crate::cfgen::{GenerationConfig, GeneratorBackend};
use crate::evalkit::EvalConfig;
use crate::perturber::{uniform_weights, KindWeights, PerturberBackend};
use crate::toycir::{TrainConfig, DEFAULT_DIM, DEFAULT_HASH_SEED};
use crate::toyworld::{Vocabulary, WorldConfig};
use crate::transport::{HttpTransport, Transport, TransportConfig};
use crate::types::ComponentKind;

/// Configuration bundled for the desk-scale end-to-end toy run.
pub const TOY_E2E_CONFIG: &str = include_str!("../../assets/toy-e2e.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Toy,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturberKind {
    RuleBased,
    ExternalLlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub captioner: ServiceKind,
    pub captioner_endpoint: Option<String>,
    pub caption_template: String,
    pub perturber: PerturberKind,
    pub perturber_endpoint: Option<String>,
    pub generator: ServiceKind,
    pub generator_endpoint: Option<String>,
    /// Relative weight of each perturbation kind; missing kinds weigh 0.
    pub kind_weights: BTreeMap<ComponentKind, f64>,
    /// Worker threads for per-item stage work.
    pub workers: usize,
    pub transport: TransportConfig,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            captioner: ServiceKind::Toy,
            captioner_endpoint: None,
            caption_template: TOY_TEMPLATE.to_string(),
            perturber: PerturberKind::RuleBased,
            perturber_endpoint: None,
            generator: ServiceKind::Toy,
            generator_endpoint: None,
            kind_weights: uniform_weights(),
            workers: 1,
            transport: TransportConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Toy,
    Cirr,
    Fashioniq,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Fraction of train images kept before synthesis (data-scarce arm).
    pub fraction: f64,
    /// Number of synthetic triplets; overrides `synthetic_multiplier`.
    pub synthetic_count: Option<usize>,
    /// Synthetic triplets per surviving manual train triplet.
    pub synthetic_multiplier: f64,
    /// Reference images sampled from the kept train images; all when unset.
    pub source_images: Option<usize>,
    pub world: WorldConfig,
    /// Media root for `cirr` / `fashioniq`, or the manifest file for `manifest`.
    pub root: Option<PathBuf>,
    pub train_captions: Vec<PathBuf>,
    pub train_splits: Vec<PathBuf>,
    pub test_captions: Vec<PathBuf>,
    pub test_splits: Vec<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Toy,
            fraction: 0.3,
            synthetic_count: None,
            synthetic_multiplier: 5.0,
            source_images: None,
            world: WorldConfig::default(),
            root: None,
            train_captions: Vec::new(),
            train_splits: Vec::new(),
            test_captions: Vec::new(),
            test_splits: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub enabled: bool,
    pub dim: usize,
    pub hash_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            enabled: true,
            dim: DEFAULT_DIM,
            hash_seed: DEFAULT_HASH_SEED,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            temperature: t.temperature,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            temperature: self.temperature,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub exclude_reference: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            ks: e.ks,
            exclude_reference: e.exclude_reference,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.ks.clone(),
            exclude_reference: self.exclude_reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub enabled: bool,
    pub fractions: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            enabled: false,
            fractions: vec![0.1, 0.3, 0.6, 1.0],
        }
    }
}

fn fraction_ok(f: f64) -> bool {
    f > 0.0 && f <= 1.0
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        // Dataset paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut config.dataset;
        if let Some(root) = d.root.as_mut() {
            rebase(root);
        }
        d.train_captions
            .iter_mut()
            .chain(d.train_splits.iter_mut())
            .chain(d.test_captions.iter_mut())
            .chain(d.test_splits.iter_mut())
            .for_each(rebase);
        Ok(config)
    }

    pub fn toy_e2e() -> Self {
        Self::parse(TOY_E2E_CONFIG).expect("bundled config is valid")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        let d = &self.dataset;
        if !fraction_ok(d.fraction) {
            return bad(format!("dataset.fraction must be in (0, 1], got {}", d.fraction));
        }
        if !(d.synthetic_multiplier >= 0.0 && d.synthetic_multiplier.is_finite()) {
            return bad("dataset.synthetic_multiplier must be finite and non-negative".into());
        }
        if d.source_images == Some(0) {
            return bad("dataset.source_images must be positive".into());
        }
        match d.kind {
            DatasetKind::Toy => {}
            DatasetKind::Manifest if d.root.is_none() => return bad("dataset.root must name the manifest file".into()),
            DatasetKind::Cirr | DatasetKind::Fashioniq if d.root.is_none() || d.train_captions.is_empty() => {
                return bad("dataset.root and dataset.train_captions are required".into())
            }
            DatasetKind::Cirr if d.train_splits.len() != 1 || d.test_captions.len() != d.test_splits.len() || d.test_captions.len() > 1 => {
                return bad("cirr needs one train split file and at most one test caption/split pair".into())
            }
            _ => {}
        }
        if let Some(&f) = self.ablation.fractions.iter().find(|f| !fraction_ok(**f)) {
            return bad(format!("ablation fraction {f} is outside (0, 1]"));
        }
        if self.ablation.enabled && self.ablation.fractions.is_empty() {
            return bad("ablation.fractions must not be empty".into());
        }
        if self.backends.workers == 0 {
            return bad("backends.workers must be positive".into());
        }
        if self.backends.kind_weights.values().any(|w| !w.is_finite() || *w < 0.0)
            || self.backends.kind_weights.values().sum::<f64>() <= 0.0
        {
            return bad("backends.kind_weights must be non-negative with a positive sum".into());
        }
        for (kind, endpoint) in [
            (self.backends.captioner == ServiceKind::External, &self.backends.captioner_endpoint),
            (self.backends.perturber == PerturberKind::ExternalLlm, &self.backends.perturber_endpoint),
            (self.backends.generator == ServiceKind::External, &self.backends.generator_endpoint),
        ] {
            if kind && endpoint.is_none() {
                return bad("external backends need an endpoint".into());
            }
        }
        if self.train.dim == 0 {
            return bad("train.dim must be positive".into());
        }
        self.train
            .train_config(self.seed)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.generation
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.eval
            .eval_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical JSON form, used to recognise an already completed bundle.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Instantiated backends for one run.
#[derive(Clone, Debug)]
pub struct Backends {
    pub captioner: CaptionerBackend,
    pub perturber: PerturberBackend,
    pub generator: GeneratorBackend,
    pub workers: usize,
}

impl Backends {
    pub fn toy() -> Self {
        Backends {
            captioner: CaptionerBackend::toy(),
            perturber: PerturberBackend::rule_based(),
            generator: GeneratorBackend::Toy,
            workers: 1,
        }
    }

    pub fn from_config(config: &BackendsConfig) -> Self {
        Self::with_transport(config, None)
    }

    /// Like [`Backends::from_config`], sending external requests through `transport`
    /// instead of a fresh HTTP client.
    pub fn with_transport(config: &BackendsConfig, transport: Option<Arc<dyn Transport>>) -> Self {
        let transport =
            transport.unwrap_or_else(|| Arc::new(HttpTransport::new(&config.transport)) as Arc<dyn Transport>);
        let endpoint = |e: &Option<String>| e.clone().unwrap_or_default();
        let weights: KindWeights = ComponentKind::ALL
            .into_iter()
            .map(|k| (k, config.kind_weights.get(&k).copied().unwrap_or(0.0)))
            .collect();
        Backends {
            captioner: match config.captioner {
                ServiceKind::Toy => CaptionerBackend::Toy {
                    template: config.caption_template.clone(),
                },
                ServiceKind::External => CaptionerBackend::ExternalService {
                    endpoint: endpoint(&config.captioner_endpoint),
                    transport: transport.clone(),
                },
            },
            perturber: match config.perturber {
                PerturberKind::RuleBased => PerturberBackend::RuleBased {
                    vocabulary: Vocabulary::builtin(),
                    kind_weights: weights,
                },
                PerturberKind::ExternalLlm => PerturberBackend::ExternalLlm {
                    endpoint: endpoint(&config.perturber_endpoint),
                    transport: transport.clone(),
                    kind_weights: weights,
                },
            },
            generator: match config.generator {
                ServiceKind::Toy => GeneratorBackend::Toy,
                ServiceKind::External => GeneratorBackend::ExternalDiffusion {
                    endpoint: endpoint(&config.generator_endpoint),
                    transport,
                },
            },
            workers: config.workers,
        }
    }

    /// Identifiers of the backend implementations, for the run log.
    pub fn versions(&self) -> BTreeMap<&'static str, String> {
        let mut v = BTreeMap::new();
        v.insert(
            "captioner",
            match &self.captioner {
                CaptionerBackend::Toy { .. } => "toy-template-v1".to_string(),
                CaptionerBackend::ExternalService { endpoint, .. } => format!("external:{endpoint}"),
            },
        );
        v.insert(
            "perturber",
            match &self.perturber {
                PerturberBackend::RuleBased { vocabulary, .. } => {
                    format!("rule-based-v1 (vocabulary {:016x})", vocabulary.fingerprint())
                }
                PerturberBackend::ExternalLlm { endpoint, .. } => {
                    format!("external:{endpoint} ({})", crate::perturber::PROMPT_VERSION)
                }
            },
        );
        v.insert(
            "generator",
            match &self.generator {
                GeneratorBackend::Toy => "toy-render-v1".to_string(),
                GeneratorBackend::ExternalDiffusion { endpoint, .. } => format!("external:{endpoint}"),
            },
        );
        v
    }
}
