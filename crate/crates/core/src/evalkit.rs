//! Composed-query retrieval evaluation: gallery ranking, Recall@k, result tables
//! and the data-fraction ablation harness.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError};
use crate::manifest::DatasetManifest;
use crate::types::{ImageRecord, Split, Triplet};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding entries must be finite and non-empty")]
    InvalidEmbedding,
    #[error("dimension mismatch: {expected} vs {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("recall is undefined for an empty query set")]
    NoQueries,
    #[error("rank positions are 1-based; got {0}")]
    BadPosition(usize),
    #[error("ks must be non-empty, positive and strictly ascending; got {0:?}")]
    BadKs(Vec<usize>),
    #[error("rows do not share ks: `{label}` has {actual:?}, expected {expected:?}")]
    MismatchedKs {
        label: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("triplet `{triplet}`: target `{target}` is not in the gallery")]
    MissingTarget { triplet: String, target: String },
    #[error("triplet `{triplet}`: reference `{reference}` is not in the manifest")]
    MissingReference { triplet: String, reference: String },
    #[error("embedding image `{image}`: {source}")]
    Embed {
        image: String,
        #[source]
        source: BoxError,
    },
    #[error("fraction {fraction}, arm {arm}: {source}")]
    Arm {
        fraction: f64,
        arm: Arm,
        #[source]
        source: BoxError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EvalError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::InvalidEmbedding);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// Unit-L2 copy. The zero vector stays zero.
    pub fn normalize(&self) -> EmbeddingVector {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        EmbeddingVector {
            values: self.values.iter().map(|v| v / n).collect(),
        }
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<String, EvalError> {
    let bytes = writer.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub exclude_reference: bool,
}

impl EvalConfig {
    /// CIRR protocol: the reference image is removed from its own gallery.
    pub fn cirr() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10, 50],
            exclude_reference: true,
        }
    }

    pub fn fashioniq() -> Self {
        EvalConfig {
            ks: vec![10, 50],
            exclude_reference: false,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        validate_ks(&self.ks)
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig::cirr()
    }
}

fn validate_ks(ks: &[usize]) -> Result<(), EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadKs(ks.to_vec()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

impl EvalResult {
    pub fn ks(&self) -> Vec<usize> {
        self.recall_at.keys().copied().collect()
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `recall_at[k] = 100 * |{p <= k}| / n`, rounded to 2 decimals.
pub fn recall_at_k(positions: &[usize], ks: &[usize]) -> Result<EvalResult, EvalError> {
    validate_ks(ks)?;
    if positions.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if let Some(&p) = positions.iter().find(|&&p| p == 0) {
        return Err(EvalError::BadPosition(p));
    }
    let n = positions.len();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = positions.iter().filter(|&&p| p <= k).count();
            (k, round2(100.0 * hits as f64 / n as f64))
        })
        .collect();
    Ok(EvalResult {
        recall_at,
        num_queries: n,
    })
}

fn check_dims(query: &EmbeddingVector, gallery: &[(String, EmbeddingVector)]) -> Result<(), EvalError> {
    match gallery.iter().find(|(_, v)| v.dim() != query.dim()) {
        Some((_, v)) => Err(EvalError::DimMismatch {
            expected: query.dim(),
            actual: v.dim(),
        }),
        None => Ok(()),
    }
}

fn better(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Gallery ids by descending cosine similarity, ties by ascending id.
pub fn rank_gallery(
    query: &EmbeddingVector,
    gallery: &[(String, EmbeddingVector)],
    exclude_id: Option<&str>,
) -> Result<Vec<String>, EvalError> {
    check_dims(query, gallery)?;
    let mut scored: Vec<(f64, &str)> = gallery
        .iter()
        .filter(|(id, _)| Some(id.as_str()) != exclude_id)
        .map(|(id, v)| (query.cosine(v), id.as_str()))
        .collect();
    scored.sort_by(|a, b| better(*a, *b));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

/// 1-based position `target` would get in `rank_gallery`, without sorting.
pub fn rank_of(
    query: &EmbeddingVector,
    gallery: &[(String, EmbeddingVector)],
    exclude_id: Option<&str>,
    target: &str,
) -> Result<Option<usize>, EvalError> {
    check_dims(query, gallery)?;
    if Some(target) == exclude_id {
        return Ok(None);
    }
    let Some((_, t)) = gallery.iter().find(|(id, _)| id == target) else {
        return Ok(None);
    };
    let key = (query.cosine(t), target);
    let ahead = gallery
        .iter()
        .filter(|(id, _)| Some(id.as_str()) != exclude_id && id != target)
        .filter(|(id, v)| better((query.cosine(v), id.as_str()), key) == Ordering::Less)
        .count();
    Ok(Some(ahead + 1))
}

/// A composed image retrieval model as seen by the evaluator.
pub trait CirModel: Sync {
    fn image_embed(&self, record: &ImageRecord, manifest: &DatasetManifest) -> Result<EmbeddingVector, BoxError>;
    fn text_embed(&self, text: &str) -> EmbeddingVector;
    fn compose(&self, image: &EmbeddingVector, text: &EmbeddingVector) -> EmbeddingVector;

    /// Query for one triplet given its reference embedding.
    fn query(&self, triplet: &Triplet, reference: &EmbeddingVector) -> EmbeddingVector {
        self.compose(reference, &self.text_embed(&triplet.modification_text))
    }
}

pub fn embed_gallery<M: CirModel + ?Sized>(
    model: &M,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<(String, EmbeddingVector)>, EvalError> {
    let records: Vec<&ImageRecord> = manifest.images_in(split).collect();
    records
        .par_iter()
        .map(|r| {
            model
                .image_embed(r, manifest)
                .map(|v| (r.image_id.clone(), v))
                .map_err(|source| EvalError::Embed {
                    image: r.image_id.clone(),
                    source,
                })
        })
        .collect()
}

/// Per-query 1-based target positions over the split's gallery.
pub fn target_positions<M: CirModel + ?Sized>(
    model: &M,
    manifest: &DatasetManifest,
    split: Split,
    config: &EvalConfig,
) -> Result<Vec<usize>, EvalError> {
    config.validate()?;
    let gallery = embed_gallery(model, manifest, split)?;
    let by_id: BTreeMap<&str, &EmbeddingVector> = gallery.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let triplets = manifest.triplets_in(split);
    triplets
        .par_iter()
        .map(|t| {
            let reference = by_id.get(t.reference_image_id.as_str()).ok_or_else(|| EvalError::MissingReference {
                triplet: t.id.clone(),
                reference: t.reference_image_id.clone(),
            })?;
            let query = model.query(t, reference);
            let exclude = config.exclude_reference.then_some(t.reference_image_id.as_str());
            rank_of(&query, &gallery, exclude, &t.target_image_id)?.ok_or_else(|| EvalError::MissingTarget {
                triplet: t.id.clone(),
                target: t.target_image_id.clone(),
            })
        })
        .collect()
}

/// Recall@k of `model` on the triplets whose reference lies in `split`,
/// ranking every image of that split.
pub fn evaluate<M: CirModel + ?Sized>(
    model: &M,
    manifest: &DatasetManifest,
    split: Split,
    config: &EvalConfig,
) -> Result<EvalResult, EvalError> {
    let positions = target_positions(model, manifest, split, config)?;
    recall_at_k(&positions, &config.ks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
}

fn shared_ks(rows: &[(String, EvalResult)]) -> Result<Vec<usize>, EvalError> {
    let Some((_, first)) = rows.first() else {
        return Ok(Vec::new());
    };
    let expected = first.ks();
    for (label, result) in rows {
        let actual = result.ks();
        if actual != expected {
            return Err(EvalError::MismatchedKs {
                label: label.clone(),
                expected,
                actual,
            });
        }
    }
    Ok(expected)
}

/// Fixed-width text table plus a CSV with one column per k.
pub fn render_results_table(rows: &[(String, EvalResult)]) -> Result<RenderedTable, EvalError> {
    let ks = shared_ks(rows)?;
    let mut header = vec!["label".to_string()];
    header.extend(ks.iter().map(|k| format!("R@{k}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut cells = vec![label.clone()];
            cells.extend(ks.iter().map(|k| format!("{:.2}", r.recall_at[k])));
            cells
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        text.push_str(line.trim_end());
        text.push('\n');
    }

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&header)?;
    for row in &body {
        writer.write_record(row)?;
    }
    let csv = finish(writer)?;
    Ok(RenderedTable { text, csv })
}

/// Long-format results CSV: `label,k,recall`.
pub fn results_csv(rows: &[(String, EvalResult)]) -> Result<String, EvalError> {
    let ks = shared_ks(rows)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["label", "k", "recall"])?;
    for (label, r) in rows {
        for k in &ks {
            writer.write_record([label.clone(), k.to_string(), format!("{:.2}", r.recall_at[k])])?;
        }
    }
    finish(writer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    WithoutSynthetic,
    WithSynthetic,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::WithoutSynthetic, Arm::WithSynthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::WithoutSynthetic => "without_synthetic",
            Arm::WithSynthetic => "with_synthetic",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub arm: Arm,
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn recall(&self, fraction: f64, arm: Arm, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.fraction == fraction && r.arm == arm && r.k == k)
            .map(|r| r.recall)
    }

    /// `fraction,arm,k,recall`, numbers to 2 decimals.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["fraction", "arm", "k", "recall"])?;
        for r in &self.rows {
            writer.write_record([
                format!("{:.2}", r.fraction),
                r.arm.as_str().to_string(),
                r.k.to_string(),
                format!("{:.2}", r.recall),
            ])?;
        }
        finish(writer)
    }
}

/// For each fraction and arm: subsample the originals, add the synthetic
/// manifest for the with-synthetic arm, train, and evaluate on the test split.
/// Arms run sequentially so training stays deterministic.
pub fn run_ablation<M, F>(
    manifest: &DatasetManifest,
    fractions: &[f64],
    synthetic: &DatasetManifest,
    mut train_fn: F,
    config: &EvalConfig,
    seed: u64,
) -> Result<AblationTable, EvalError>
where
    M: CirModel,
    F: FnMut(&DatasetManifest, f64, Arm) -> Result<M, BoxError>,
{
    config.validate()?;
    let mut table = AblationTable::default();
    for &fraction in fractions {
        let subset = dataset::subsample_images(manifest, fraction, seed)?;
        for arm in Arm::BOTH {
            let data = match arm {
                Arm::WithoutSynthetic => subset.clone(),
                Arm::WithSynthetic => dataset::merge(&subset, synthetic)?,
            };
            let wrap = |source: BoxError| EvalError::Arm { fraction, arm, source };
            let model = train_fn(&data, fraction, arm).map_err(wrap)?;
            let result = evaluate(&model, &data, Split::Test, config).map_err(|e| wrap(Box::new(e)))?;
            for (&k, &recall) in &result.recall_at {
                table.rows.push(AblationRow {
                    fraction,
                    arm,
                    k,
                    recall,
                });
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn recall_examples() {
        let r = recall_at_k(&[1], &[1]).unwrap();
        assert_eq!(r.recall(1), Some(100.0));
        let r = recall_at_k(&[1, 4, 2], &[1, 5]).unwrap();
        assert_eq!(r.recall(1), Some(33.33));
        assert_eq!(r.recall(5), Some(100.0));
        assert_eq!(recall_at_k(&[6, 7], &[5]).unwrap().recall(5), Some(0.0));
        assert!(matches!(recall_at_k(&[], &[1]), Err(EvalError::NoQueries)));
        assert!(recall_at_k(&[0], &[1]).is_err());
        assert!(recall_at_k(&[1], &[5, 1]).is_err());
    }

    #[test]
    fn singleton_and_exact_match() {
        let g = vec![("only".to_string(), ev(&[0.3, -0.2]))];
        assert_eq!(rank_gallery(&ev(&[1.0, 0.0]), &g, None).unwrap(), ["only"]);

        let g: Vec<_> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                (format!("e{i}"), ev(&v))
            })
            .collect();
        let q = ev(&[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rank_gallery(&q, &g, None).unwrap()[0], "e2");
        assert_eq!(q.cosine(&g[2].1), 1.0);
        assert_eq!(rank_of(&q, &g, None, "e2").unwrap(), Some(1));
    }

    #[test]
    fn ties_break_by_id_and_exclusion() {
        let g = vec![
            ("b".to_string(), ev(&[1.0, 0.0])),
            ("a".to_string(), ev(&[2.0, 0.0])),
            ("c".to_string(), ev(&[0.0, 1.0])),
        ];
        let q = ev(&[1.0, 0.0]);
        assert_eq!(rank_gallery(&q, &g, None).unwrap(), ["a", "b", "c"]);
        assert_eq!(rank_gallery(&q, &g, Some("a")).unwrap(), ["b", "c"]);
        assert_eq!(rank_of(&q, &g, Some("a"), "c").unwrap(), Some(2));
        assert_eq!(rank_of(&q, &g, Some("a"), "a").unwrap(), None);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let g = vec![("a".to_string(), ev(&[1.0, 0.0, 0.0]))];
        assert!(matches!(
            rank_gallery(&ev(&[1.0, 0.0]), &g, None),
            Err(EvalError::DimMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn row_renders_verbatim() {
        let result = EvalResult {
            recall_at: [(1, 40.75), (5, 69.83), (10, 81.04), (50, 94.80)].into_iter().collect(),
            num_queries: 4148,
        };
        let table = render_results_table(&[("toy + synthetic".into(), result)]).unwrap();
        assert!(table.text.lines().nth(1).unwrap().contains("40.75  69.83  81.04  94.80"));
        assert_eq!(table.csv, "label,R@1,R@5,R@10,R@50\ntoy + synthetic,40.75,69.83,81.04,94.80\n");
    }

    #[test]
    fn minimal_tables() {
        let empty = render_results_table(&[]).unwrap();
        assert_eq!(empty.text, "label\n");
        assert_eq!(empty.csv, "label\n");
        let one = EvalResult {
            recall_at: [(10, 5.0)].into_iter().collect(),
            num_queries: 1,
        };
        let t = render_results_table(&[("x".into(), one.clone())]).unwrap();
        assert_eq!(t.csv, "label,R@10\nx,5.00\n");
        assert_eq!(results_csv(&[("x".into(), one.clone())]).unwrap(), "label,k,recall\nx,10,5.00\n");
        let other = EvalResult {
            recall_at: [(5, 5.0)].into_iter().collect(),
            num_queries: 1,
        };
        assert!(render_results_table(&[("x".into(), one), ("y".into(), other)]).is_err());
    }

    #[test]
    fn ablation_csv_format() {
        let table = AblationTable {
            rows: vec![AblationRow {
                fraction: 0.3,
                arm: Arm::WithSynthetic,
                k: 10,
                recall: 12.5,
            }],
        };
        assert_eq!(table.to_csv().unwrap(), "fraction,arm,k,recall\n0.30,with_synthetic,10,12.50\n");
    }
}
