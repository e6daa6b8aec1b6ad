//! The dataset manifest: images, triplets, derived statistics and integrity checks.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ImageRecord, Provenance, Source, Split, Triplet};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("triplet `{triplet}` references unknown image `{image}`")]
    Integrity { triplet: String, image: String },
    #[error("reading manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Images and triplets of one dataset. Media `uri`s are relative to `root`,
/// and a relative `root` is relative to the directory the manifest file lives in.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub root: String,
    pub images: Vec<ImageRecord>,
    pub triplets: Vec<Triplet>,
    /// Directory the manifest was loaded from; never serialized.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.root == other.root
            && self.images == other.images
            && self.triplets == other.triplets
    }
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            root: root.into(),
            ..Default::default()
        }
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn media_root(&self) -> PathBuf {
        let root = Path::new(&self.root);
        match &self.base_dir {
            Some(base) if root.is_relative() => base.join(root),
            _ => root.to_path_buf(),
        }
    }

    pub fn resolve(&self, uri: &str) -> PathBuf {
        self.media_root().join(uri)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.image_id == id)
    }

    pub fn image_index(&self) -> HashMap<&str, &ImageRecord> {
        self.images.iter().map(|r| (r.image_id.as_str(), r)).collect()
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |r| r.split == split)
    }

    /// Triplets whose reference image lies in `split`.
    pub fn triplets_in(&self, split: Split) -> Vec<&Triplet> {
        let index = self.image_index();
        self.triplets
            .iter()
            .filter(|t| {
                index
                    .get(t.reference_image_id.as_str())
                    .is_some_and(|r| r.split == split)
            })
            .collect()
    }

    pub fn stats(&self) -> Result<StatsTable, ManifestError> {
        compute_stats(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        manifest.base_dir = Some(
            path.parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        );
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Counts in the layout of a dataset statistics table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsTable {
    pub images: usize,
    pub triplets: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub original_images: usize,
    pub synthetic_images: usize,
    /// Manual triplets whose reference is a train image.
    pub train_triplets: usize,
    pub synthetic_triplets: usize,
    pub val_triplets: usize,
    pub test_triplets: usize,
}

impl fmt::Display for StatsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>10}", "images", self.images)?;
        writeln!(f, "{:<22}{:>10}", "  train", self.train_images)?;
        writeln!(f, "{:<22}{:>10}", "  val", self.val_images)?;
        writeln!(f, "{:<22}{:>10}", "  test", self.test_images)?;
        writeln!(f, "{:<22}{:>10}", "  synthetic", self.synthetic_images)?;
        writeln!(f, "{:<22}{:>10}", "triplets", self.triplets)?;
        writeln!(f, "{:<22}{:>10}", "  train (manual)", self.train_triplets)?;
        writeln!(f, "{:<22}{:>10}", "  synthetic", self.synthetic_triplets)?;
        writeln!(f, "{:<22}{:>10}", "  val", self.val_triplets)?;
        write!(f, "{:<22}{:>10}", "  test", self.test_triplets)
    }
}

pub fn compute_stats(manifest: &DatasetManifest) -> Result<StatsTable, ManifestError> {
    let index = manifest.image_index();
    let mut stats = StatsTable {
        images: manifest.images.len(),
        triplets: manifest.triplets.len(),
        ..Default::default()
    };
    for record in &manifest.images {
        match record.split {
            Split::Train => stats.train_images += 1,
            Split::Val => stats.val_images += 1,
            Split::Test => stats.test_images += 1,
        }
        match record.source {
            Source::Original => stats.original_images += 1,
            Source::Synthetic => stats.synthetic_images += 1,
        }
    }
    for triplet in &manifest.triplets {
        let endpoint = |id: &str| {
            index.get(id).copied().ok_or_else(|| ManifestError::Integrity {
                triplet: triplet.id.clone(),
                image: id.to_string(),
            })
        };
        let reference = endpoint(&triplet.reference_image_id)?;
        endpoint(&triplet.target_image_id)?;
        match (triplet.provenance, reference.split) {
            (Provenance::Synthetic, _) => stats.synthetic_triplets += 1,
            (Provenance::Manual, Split::Train) => stats.train_triplets += 1,
            (Provenance::Manual, Split::Val) => stats.val_triplets += 1,
            (Provenance::Manual, Split::Test) => stats.test_triplets += 1,
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    DuplicateImageId,
    DuplicateTripletId,
    DanglingReference,
    SelfPair,
    MissingEdit,
    EditTextMismatch,
    EmptyModificationText,
    OrphanSyntheticImage,
    InvalidSpan,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::DuplicateImageId => "duplicate_image_id",
            ViolationCode::DuplicateTripletId => "duplicate_triplet_id",
            ViolationCode::DanglingReference => "dangling_reference",
            ViolationCode::SelfPair => "self_pair",
            ViolationCode::MissingEdit => "missing_edit",
            ViolationCode::EditTextMismatch => "edit_text_mismatch",
            ViolationCode::EmptyModificationText => "empty_modification_text",
            ViolationCode::OrphanSyntheticImage => "orphan_synthetic_image",
            ViolationCode::InvalidSpan => "invalid_span",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// The offending image or triplet id.
    pub id: String,
    pub detail: String,
}

impl Violation {
    fn new(code: ViolationCode, id: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            code,
            id: id.into(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(\"{}\")", self.code.as_str(), self.id)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    use ViolationCode::*;

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for record in &manifest.images {
        if !seen.insert(record.image_id.as_str()) {
            out.push(Violation::new(DuplicateImageId, &record.image_id, ""));
        }
    }

    let mut seen_triplets = HashSet::new();
    let mut synthetic_targets = HashSet::new();
    for triplet in &manifest.triplets {
        if !seen_triplets.insert(triplet.id.as_str()) {
            out.push(Violation::new(DuplicateTripletId, &triplet.id, ""));
        }
        for endpoint in [&triplet.reference_image_id, &triplet.target_image_id] {
            if !seen.contains(endpoint.as_str()) {
                out.push(Violation::new(
                    DanglingReference,
                    endpoint,
                    format!("in triplet {}", triplet.id),
                ));
            }
        }
        if triplet.reference_image_id == triplet.target_image_id {
            out.push(Violation::new(
                SelfPair,
                &triplet.id,
                format!("reference and target are both {}", triplet.reference_image_id),
            ));
        }
        if triplet.modification_text.trim().is_empty() {
            out.push(Violation::new(EmptyModificationText, &triplet.id, ""));
        }
        if triplet.provenance == Provenance::Synthetic {
            synthetic_targets.insert(triplet.target_image_id.as_str());
            match &triplet.edit {
                None => out.push(Violation::new(MissingEdit, &triplet.id, "")),
                Some(edit) => {
                    if edit.modification_text != triplet.modification_text {
                        out.push(Violation::new(EditTextMismatch, &triplet.id, ""));
                    }
                    for caption in [&edit.reference_caption, &edit.counterfactual_caption] {
                        for problem in caption.span_problems() {
                            out.push(Violation::new(InvalidSpan, &triplet.id, problem));
                        }
                    }
                }
            }
        }
    }

    for record in &manifest.images {
        if record.source == Source::Synthetic && !synthetic_targets.contains(record.image_id.as_str())
        {
            out.push(Violation::new(
                OrphanSyntheticImage,
                &record.image_id,
                "synthetic image is not the target of any synthetic triplet",
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            uri: format!("{id}.png"),
            split: Split::Train,
            source: Source::Original,
            sidecar: None,
        }
    }

    fn small() -> DatasetManifest {
        let mut m = DatasetManifest::new("small", "media");
        m.images = vec![record("a"), record("b"), record("c")];
        m.triplets = vec![
            Triplet::manual("t0", "a", "make it blue", "b"),
            Triplet::manual("t1", "b", "make it red", "c"),
        ];
        m
    }

    #[test]
    fn empty_manifest_has_zero_counts() {
        let stats = compute_stats(&DatasetManifest::default()).unwrap();
        assert_eq!(stats, StatsTable::default());
    }

    #[test]
    fn small_manifest_counts_by_enumeration() {
        let m = small();
        let stats = compute_stats(&m).unwrap();
        let images = m.images.len();
        let triplets = m.triplets.len();
        assert_eq!((stats.images, stats.triplets), (images, triplets));
        assert_eq!((stats.images, stats.triplets), (3, 2));
        assert_eq!(stats.train_triplets, 2);
    }

    #[test]
    fn dangling_endpoint_is_an_integrity_error() {
        let mut m = small();
        m.triplets.push(Triplet::manual("t9", "a", "x", "x9"));
        match compute_stats(&m) {
            Err(ManifestError::Integrity { triplet, image }) => {
                assert_eq!(triplet, "t9");
                assert_eq!(image, "x9");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn well_formed_manifest_has_no_violations() {
        assert!(validate_manifest(&small()).is_empty());
    }

    #[test]
    fn unknown_image_is_a_dangling_reference() {
        let mut m = small();
        m.triplets.push(Triplet::manual("t2", "a", "x", "x9"));
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::DanglingReference);
        assert_eq!(v[0].id, "x9");
        assert!(v[0].to_string().starts_with("dangling_reference(\"x9\")"));
    }

    #[test]
    fn self_pair_is_reported() {
        let mut m = small();
        m.triplets.push(Triplet::manual("t2", "a", "x", "a"));
        let codes: Vec<_> = validate_manifest(&m).into_iter().map(|v| v.code).collect();
        assert_eq!(codes, [ViolationCode::SelfPair]);
    }

    #[test]
    fn synthetic_triplet_without_edit_and_orphan_image() {
        let mut m = small();
        m.images.push(ImageRecord {
            source: Source::Synthetic,
            ..record("s0")
        });
        m.images.push(ImageRecord {
            source: Source::Synthetic,
            ..record("s1")
        });
        let mut t = Triplet::manual("t2", "a", "x", "s0");
        t.provenance = Provenance::Synthetic;
        m.triplets.push(t);
        let codes: Vec<_> = validate_manifest(&m).into_iter().map(|v| v.code).collect();
        assert_eq!(
            codes,
            [ViolationCode::MissingEdit, ViolationCode::OrphanSyntheticImage]
        );
    }

    #[test]
    fn relative_root_resolves_against_base_dir() {
        let m = small().with_base_dir("/data/run");
        assert_eq!(m.resolve("a.png"), PathBuf::from("/data/run/media/a.png"));
    }
}
