//! CIRR and FashionIQ triplet files, data-scarcity subsampling, and merging
//! manual with synthetic triplets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::manifest::DatasetManifest;
use crate::types::{ImageRecord, Provenance, Source, Split, Triplet};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {index}{label}: {message}")]
    Schema {
        path: PathBuf,
        index: usize,
        label: String,
        message: String,
    },
    #[error("fraction {0} is outside (0, 1]")]
    Fraction(f64),
    #[error("merge conflict on {what} `{id}`")]
    Conflict { what: &'static str, id: String },
    #[error("cannot merge manifests with different media roots ({0} vs {1})")]
    RootMismatch(String, String),
}

/// One entry of a CIRR caption file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirrRecord {
    pub pairid: i64,
    pub reference: String,
    pub target_hard: String,
    pub caption: String,
}

/// One entry of a FashionIQ caption file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FashionIqRecord {
    pub candidate: String,
    pub target: String,
    pub captions: Vec<String>,
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        path: path.to_path_buf(),
        index: 0,
        label: String::new(),
        message: format!("not valid JSON: {e}"),
    })
}

fn records<T: for<'de> Deserialize<'de>>(
    path: &Path,
    label_key: &str,
) -> Result<Vec<T>, DatasetError> {
    let value = read_json(path)?;
    let Value::Array(items) = value else {
        return Err(DatasetError::Schema {
            path: path.to_path_buf(),
            index: 0,
            label: String::new(),
            message: "expected a JSON array of records".into(),
        });
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            let label = item
                .get(label_key)
                .map(|v| format!(" ({label_key}={v})"))
                .unwrap_or_default();
            serde_json::from_value(item).map_err(|e| DatasetError::Schema {
                path: path.to_path_buf(),
                index,
                label,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn cirr_triplet_id(pairid: i64) -> String {
    format!("cirr-{pairid}")
}

/// Loads a CIRR split: `split_file` maps image names to paths under `root`,
/// `captions_file` holds one triplet per record.
pub fn load_cirr(
    captions_file: &Path,
    split_file: &Path,
    root: &Path,
    split: Split,
) -> Result<DatasetManifest, DatasetError> {
    let names = read_json(split_file)?;
    let Value::Object(names) = names else {
        return Err(DatasetError::Schema {
            path: split_file.to_path_buf(),
            index: 0,
            label: String::new(),
            message: "expected an object mapping image names to paths".into(),
        });
    };
    let mut manifest = DatasetManifest::new(format!("cirr-{split}"), root.display().to_string());
    for (index, (name, path)) in names.into_iter().enumerate() {
        let Value::String(path) = path else {
            return Err(DatasetError::Schema {
                path: split_file.to_path_buf(),
                index,
                label: format!(" ({name})"),
                message: "image path must be a string".into(),
            });
        };
        manifest.images.push(ImageRecord {
            image_id: name,
            uri: path.trim_start_matches("./").to_string(),
            split,
            source: Source::Original,
            sidecar: None,
        });
    }
    for record in records::<CirrRecord>(captions_file, "pairid")? {
        manifest.triplets.push(Triplet::manual(
            cirr_triplet_id(record.pairid),
            record.reference,
            record.caption,
            record.target_hard,
        ));
    }
    Ok(manifest)
}

/// Joins the annotator captions of one pair into a single modification text.
pub fn join_captions(captions: &[String]) -> String {
    captions
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .collect::<Vec<_>>()
        .join(" and ")
}

pub fn fashioniq_image_uri(name: &str) -> String {
    format!("images/{name}.png")
}

fn category_of(path: &Path) -> String {
    // cap.dress.train.json -> dress
    let stem = path.file_name().and_then(|s| s.to_str()).unwrap_or("fiq");
    let parts: Vec<&str> = stem.split('.').collect();
    match parts.as_slice() {
        ["cap", category, ..] => category.to_string(),
        [first, ..] => first.to_string(),
        [] => "fiq".into(),
    }
}

/// Loads FashionIQ caption files. Images come from `split_files` (JSON lists of
/// names) when given, otherwise from the triplet endpoints in order of appearance.
pub fn load_fashioniq(
    captions_files: &[PathBuf],
    split_files: &[PathBuf],
    root: &Path,
    split: Split,
) -> Result<DatasetManifest, DatasetError> {
    let mut manifest = DatasetManifest::new(format!("fashioniq-{split}"), root.display().to_string());
    let mut seen = HashSet::new();
    let mut add_image = |manifest: &mut DatasetManifest, name: &str| {
        if seen.insert(name.to_string()) {
            manifest.images.push(ImageRecord {
                image_id: name.to_string(),
                uri: fashioniq_image_uri(name),
                split,
                source: Source::Original,
                sidecar: None,
            });
        }
    };
    for path in split_files {
        let names: Vec<String> = serde_json::from_value(read_json(path)?).map_err(|e| DatasetError::Schema {
            path: path.clone(),
            index: 0,
            label: String::new(),
            message: format!("expected a list of image names: {e}"),
        })?;
        for name in &names {
            add_image(&mut manifest, name);
        }
    }
    for path in captions_files {
        let category = category_of(path);
        for (index, record) in records::<FashionIqRecord>(path, "candidate")?.into_iter().enumerate() {
            let text = join_captions(&record.captions);
            if text.is_empty() {
                return Err(DatasetError::Schema {
                    path: path.clone(),
                    index,
                    label: format!(" (candidate={})", record.candidate),
                    message: "captions must contain at least one non-empty string".into(),
                });
            }
            if split_files.is_empty() {
                add_image(&mut manifest, &record.candidate);
                add_image(&mut manifest, &record.target);
            }
            let mut triplet = Triplet::manual(
                format!("fiq-{category}-{index}"),
                record.candidate,
                text,
                record.target,
            );
            if record.captions.len() > 1 {
                triplet.source_captions = record.captions;
            }
            manifest.triplets.push(triplet);
        }
    }
    Ok(manifest)
}

/// `round_half_up(fraction * n)`, robust to representation error in `fraction`.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let snapped = (exact * 1e9).round() / 1e9;
    ((snapped + 0.5).floor() as usize).min(n)
}

/// Train image ids in the seeded permutation order that subsampling takes prefixes of.
pub fn subsample_order(manifest: &DatasetManifest, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = manifest
        .images_in(Split::Train)
        .map(|r| r.image_id.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids
}

/// Keeps `round_half_up(fraction * |train images|)` train images, a prefix of one
/// seeded permutation, and the triplets whose endpoints both survive.
/// Val and test images are never dropped.
pub fn subsample_images(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::Fraction(fraction));
    }
    let order = subsample_order(manifest, seed);
    let keep_n = kept_count(order.len(), fraction);
    let kept: HashSet<&str> = order[..keep_n].iter().map(String::as_str).collect();
    let survives = |r: &ImageRecord| r.split != Split::Train || kept.contains(r.image_id.as_str());

    let images: Vec<ImageRecord> = manifest.images.iter().filter(|r| survives(r)).cloned().collect();
    let alive: HashSet<&str> = images.iter().map(|r| r.image_id.as_str()).collect();
    let triplets = manifest
        .triplets
        .iter()
        .filter(|t| alive.contains(t.reference_image_id.as_str()) && alive.contains(t.target_image_id.as_str()))
        .cloned()
        .collect();
    Ok(DatasetManifest {
        name: manifest.name.clone(),
        root: manifest.root.clone(),
        images,
        triplets,
        base_dir: manifest.base_dir.clone(),
    })
}

/// Union of two manifests. Records present in both must be identical.
pub fn merge(manual: &DatasetManifest, synthetic: &DatasetManifest) -> Result<DatasetManifest, DatasetError> {
    if !synthetic.images.is_empty() && manual.media_root() != synthetic.media_root() {
        return Err(DatasetError::RootMismatch(
            manual.media_root().display().to_string(),
            synthetic.media_root().display().to_string(),
        ));
    }
    let mut out = manual.clone();
    let images: HashMap<String, usize> = out
        .images
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.clone(), i))
        .collect();
    for record in &synthetic.images {
        match images.get(&record.image_id) {
            Some(&i) if out.images[i] == *record => {}
            Some(_) => {
                return Err(DatasetError::Conflict {
                    what: "image",
                    id: record.image_id.clone(),
                })
            }
            None => out.images.push(record.clone()),
        }
    }
    let triplets: HashMap<String, usize> = out
        .triplets
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.clone(), i))
        .collect();
    for triplet in &synthetic.triplets {
        match triplets.get(&triplet.id) {
            Some(&i) if out.triplets[i] == *triplet => {}
            Some(_) => {
                return Err(DatasetError::Conflict {
                    what: "triplet",
                    id: triplet.id.clone(),
                })
            }
            None => out.triplets.push(triplet.clone()),
        }
    }
    Ok(out)
}

/// CIRR-schema export of the manifest's triplets plus its image split map.
/// Triplets named `cirr-{n}` keep `n` as their pair id; others are numbered after the largest.
pub fn export_cirr(manifest: &DatasetManifest) -> (Vec<CirrRecord>, BTreeMap<String, String>) {
    let mut next = manifest
        .triplets
        .iter()
        .filter_map(|t| t.id.strip_prefix("cirr-")?.parse::<i64>().ok())
        .max()
        .map_or(0, |m| m + 1);
    let records = manifest
        .triplets
        .iter()
        .map(|t| {
            let pairid = t
                .id
                .strip_prefix("cirr-")
                .and_then(|n| n.parse().ok())
                .unwrap_or_else(|| {
                    next += 1;
                    next - 1
                });
            CirrRecord {
                pairid,
                reference: t.reference_image_id.clone(),
                target_hard: t.target_image_id.clone(),
                caption: t.modification_text.clone(),
            }
        })
        .collect();
    let split = manifest
        .images
        .iter()
        .map(|r| (r.image_id.clone(), format!("./{}", r.uri)))
        .collect();
    (records, split)
}

pub fn export_fashioniq(manifest: &DatasetManifest) -> Vec<FashionIqRecord> {
    manifest
        .triplets
        .iter()
        .map(|t| FashionIqRecord {
            candidate: t.reference_image_id.clone(),
            target: t.target_image_id.clone(),
            captions: if t.source_captions.is_empty() {
                vec![t.modification_text.clone()]
            } else {
                t.source_captions.clone()
            },
        })
        .collect()
}

/// Writes `cap.{name}.json` and `split.{name}.json` in CIRR layout.
pub fn write_cirr_files(manifest: &DatasetManifest, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf), DatasetError> {
    let (records, split) = export_cirr(manifest);
    let captions = dir.join(format!("cap.{name}.json"));
    let split_path = dir.join(format!("split.{name}.json"));
    for (path, value) in [
        (&captions, serde_json::to_value(records).expect("records serialize")),
        (&split_path, serde_json::to_value(split).expect("split serializes")),
    ] {
        let mut text = serde_json::to_string_pretty(&value).expect("json");
        text.push('\n');
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok((captions, split_path))
}

pub fn count_by_provenance(manifest: &DatasetManifest, provenance: Provenance) -> usize {
    manifest.triplets.iter().filter(|t| t.provenance == provenance).count()
}
