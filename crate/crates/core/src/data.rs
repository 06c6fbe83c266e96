//! Dataset manifests: the target subject's training images, the
//! subject-disjoint regularization set of captioned images, and deterministic
//! batching over both.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::AgeGroup;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPair {
    pub path: PathBuf,
    pub caption: AgeGroup,
    pub subject_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub training: SubjectRecord,
    pub regularization: Vec<RegularizationPair>,
}

/// Result of a disjointness check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisjointnessReport {
    pub shared_ids: Vec<String>,
}

impl DisjointnessReport {
    pub fn is_ok(&self) -> bool {
        self.shared_ids.is_empty()
    }
}

impl DatasetManifest {
    pub fn regularization_subject_ids(&self) -> BTreeSet<&str> {
        self.regularization.iter().map(|r| r.subject_id.as_str()).collect()
    }

    /// Number of regularization examples per age group (all six present).
    pub fn group_counts(&self) -> BTreeMap<AgeGroup, usize> {
        let mut counts: BTreeMap<AgeGroup, usize> = AgeGroup::ALL.iter().map(|g| (*g, 0)).collect();
        for r in &self.regularization {
            *counts.entry(r.caption).or_default() += 1;
        }
        counts
    }

    /// Turns relative paths into paths under `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.training.images.iter_mut().for_each(fix);
        self.regularization.iter_mut().for_each(|r| fix(&mut r.path));
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn validate_disjoint(m: &DatasetManifest) -> DisjointnessReport {
    let reg = m.regularization_subject_ids();
    let shared_ids = if reg.contains(m.training.subject_id.as_str()) {
        vec![m.training.subject_id.clone()]
    } else {
        Vec::new()
    };
    DisjointnessReport { shared_ids }
}

#[derive(Deserialize)]
struct RawPair {
    path: PathBuf,
    caption: String,
    subject_id: String,
}

#[derive(Deserialize)]
struct RawManifest {
    training: SubjectRecord,
    #[serde(default)]
    regularization: Vec<RawPair>,
}

/// Reads and validates a manifest. Relative paths resolve against the
/// manifest's directory; every referenced image must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let raw: RawManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(path, format!("malformed manifest: {e}")))?;
    if raw.training.subject_id.trim().is_empty() {
        return Err(Error::load(path, "training subject_id is empty"));
    }
    if raw.training.images.is_empty() {
        return Err(Error::load(path, "training subject has no images"));
    }
    let mut regularization = Vec::with_capacity(raw.regularization.len());
    for (i, r) in raw.regularization.into_iter().enumerate() {
        let caption: AgeGroup = r.caption.parse().map_err(|_| {
            Error::load(
                path,
                format!(
                    "regularization[{i}] ({}) has caption `{}` outside the age vocabulary",
                    r.path.display(),
                    r.caption
                ),
            )
        })?;
        if r.subject_id.trim().is_empty() {
            return Err(Error::load(path, format!("regularization[{i}] has an empty subject_id")));
        }
        regularization.push(RegularizationPair {
            path: r.path,
            caption,
            subject_id: r.subject_id,
        });
    }
    let mut m = DatasetManifest {
        training: raw.training,
        regularization,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    m.resolve_paths(base);
    for p in m
        .training
        .images
        .iter()
        .chain(m.regularization.iter().map(|r| &r.path))
    {
        if !p.is_file() {
            return Err(Error::load(p, "referenced image does not exist"));
        }
    }
    let report = validate_disjoint(&m);
    if !report.is_ok() {
        return Err(Error::Disjointness(report.shared_ids));
    }
    Ok(m)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e.to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Regularization files are named `<subject_id>_<anything>.png`; without an
/// underscore the whole stem is the subject id.
fn subject_from_filename(p: &Path) -> String {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.split_once('_') {
        Some((id, _)) if !id.is_empty() => id.to_string(),
        _ => stem,
    }
}

/// Builds a manifest from `root/subjects/<id>/*.png` and
/// `root/reg/<agegroup>/*.png`. Paths in the result are relative to `root`.
pub fn import_directory(root: &Path, subject_id: &str) -> Result<DatasetManifest> {
    let rel = |p: &Path| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let sdir = root.join("subjects").join(subject_id);
    let images: Vec<PathBuf> = sorted_pngs(&sdir)?.iter().map(|p| rel(p)).collect();
    if images.is_empty() {
        return Err(Error::load(&sdir, "no training images"));
    }
    let mut regularization = Vec::new();
    let reg_root = root.join("reg");
    if reg_root.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&reg_root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let caption: AgeGroup = name.parse().map_err(|_| {
                Error::load(&d, format!("`{name}` is not an age-group directory"))
            })?;
            for f in sorted_pngs(&d)? {
                regularization.push(RegularizationPair {
                    subject_id: subject_from_filename(&f),
                    path: rel(&f),
                    caption,
                });
            }
        }
    }
    let m = DatasetManifest {
        training: SubjectRecord {
            subject_id: subject_id.to_string(),
            images,
        },
        regularization,
    };
    let report = validate_disjoint(&m);
    if !report.is_ok() {
        return Err(Error::Disjointness(report.shared_ids));
    }
    Ok(m)
}

/// One training example paired with one prior-preservation example.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub training_index: usize,
    pub regularization_index: usize,
    pub training_path: PathBuf,
    pub regularization_path: PathBuf,
    pub caption: AgeGroup,
}

pub type Batch = Vec<BatchItem>;

/// Endless, seeded stream of batches. Each epoch visits every training image
/// once in a shuffled order; regularization pairs cycle through their own
/// shuffled order independently.
#[derive(Debug)]
pub struct BatchStream<'a> {
    manifest: &'a DatasetManifest,
    batch_size: usize,
    rng: ChaCha8Rng,
    train_order: Vec<usize>,
    train_pos: usize,
    reg_order: Vec<usize>,
    reg_pos: usize,
}

pub fn make_batches(m: &DatasetManifest, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    if m.regularization.is_empty() {
        return Err(Error::InvalidConfig(
            "batching needs at least one regularization pair".into(),
        ));
    }
    if m.training.images.is_empty() {
        return Err(Error::InvalidConfig("training subject has no images".into()));
    }
    Ok(BatchStream {
        manifest: m,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        train_order: Vec::new(),
        train_pos: 0,
        reg_order: Vec::new(),
        reg_pos: 0,
    })
}

impl BatchStream<'_> {
    fn next_reg(&mut self) -> usize {
        if self.reg_pos == self.reg_order.len() {
            self.reg_order = (0..self.manifest.regularization.len()).collect();
            self.reg_order.shuffle(&mut self.rng);
            self.reg_pos = 0;
        }
        self.reg_pos += 1;
        self.reg_order[self.reg_pos - 1]
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.train_pos == self.train_order.len() {
            self.train_order = (0..self.manifest.training.images.len()).collect();
            self.train_order.shuffle(&mut self.rng);
            self.train_pos = 0;
        }
        let end = (self.train_pos + self.batch_size).min(self.train_order.len());
        let picks: Vec<usize> = self.train_order[self.train_pos..end].to_vec();
        self.train_pos = end;
        let batch = picks
            .into_iter()
            .map(|ti| {
                let ri = self.next_reg();
                let reg = &self.manifest.regularization[ri];
                BatchItem {
                    training_index: ti,
                    regularization_index: ri,
                    training_path: self.manifest.training.images[ti].clone(),
                    regularization_path: reg.path.clone(),
                    caption: reg.caption,
                }
            })
            .collect();
        Some(batch)
    }
}

/// Decoded images of a manifest at model resolution.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub training: Vec<ImageTensor>,
    pub regularization: Vec<ImageTensor>,
    pub captions: Vec<AgeGroup>,
}

impl TrainingData {
    pub fn load(m: &DatasetManifest, resolution: usize) -> Result<Self> {
        let training = m
            .training
            .images
            .iter()
            .map(|p| ImageTensor::load(p, resolution))
            .collect::<Result<_>>()?;
        let regularization = m
            .regularization
            .iter()
            .map(|r| ImageTensor::load(&r.path, resolution))
            .collect::<Result<_>>()?;
        Ok(Self {
            training,
            regularization,
            captions: m.regularization.iter().map(|r| r.caption).collect(),
        })
    }

    pub fn all_images(&self) -> impl Iterator<Item = &ImageTensor> {
        self.training.iter().chain(&self.regularization)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(8, 8, image::Rgb([120, 80, 60]))
            .save(path)
            .unwrap();
    }

    fn manifest(n_train: usize, n_reg: usize) -> DatasetManifest {
        DatasetManifest {
            training: SubjectRecord {
                subject_id: "target".into(),
                images: (0..n_train).map(|i| PathBuf::from(format!("t{i}.png"))).collect(),
            },
            regularization: (0..n_reg)
                .map(|i| RegularizationPair {
                    path: PathBuf::from(format!("r{i}.png")),
                    caption: AgeGroup::ALL[i % 6],
                    subject_id: format!("R{}", i / 2),
                })
                .collect(),
        }
    }

    fn write_manifest_dir(dir: &Path, json: &str, images: &[&str]) -> PathBuf {
        for i in images {
            write_png(&dir.join(i));
        }
        let p = dir.join("manifest.json");
        fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn loads_twenty_training_images() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..20).map(|i| format!("s/{i}.png")).collect();
        let imgs: Vec<&str> = names.iter().map(String::as_str).chain(["reg/a.png"]).collect();
        let json = serde_json::json!({
            "training": {"subject_id": "S1", "images": names},
            "regularization": [{"path": "reg/a.png", "caption": "child", "subject_id": "R1"}]
        });
        let p = write_manifest_dir(dir.path(), &json.to_string(), &imgs);
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.training.images.len(), 20);
        assert!(m.training.images[0].is_absolute() || m.training.images[0].starts_with(dir.path()));
    }

    #[test]
    fn rejects_unknown_caption() {
        let dir = tempfile::tempdir().unwrap();
        let json = serde_json::json!({
            "training": {"subject_id": "S1", "images": ["a.png"]},
            "regularization": [{"path": "b.png", "caption": "kid", "subject_id": "R1"}]
        });
        let p = write_manifest_dir(dir.path(), &json.to_string(), &["a.png", "b.png"]);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("kid"), "{err}");
    }

    #[test]
    fn rejects_shared_subject() {
        let dir = tempfile::tempdir().unwrap();
        let json = serde_json::json!({
            "training": {"subject_id": "S7", "images": ["a.png"]},
            "regularization": [{"path": "b.png", "caption": "old", "subject_id": "S7"}]
        });
        let p = write_manifest_dir(dir.path(), &json.to_string(), &["a.png", "b.png"]);
        assert!(matches!(load_manifest(&p), Err(Error::Disjointness(ids)) if ids == vec!["S7"]));
    }

    #[test]
    fn missing_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let json = serde_json::json!({
            "training": {"subject_id": "S1", "images": ["missing.png"]},
            "regularization": []
        });
        let p = write_manifest_dir(dir.path(), &json.to_string(), &[]);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
    }

    #[test]
    fn malformed_manifest_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest_dir(dir.path(), "{\"training\": 3}", &[]);
        assert!(matches!(load_manifest(&p), Err(Error::Load { .. })));
    }

    #[test]
    fn disjointness_reports() {
        let mut m = manifest(2, 4);
        assert!(validate_disjoint(&m).is_ok());
        m.regularization[1].subject_id = "S7".into();
        m.training.subject_id = "S7".into();
        assert_eq!(validate_disjoint(&m).shared_ids, vec!["S7".to_string()]);
        let empty = manifest(2, 0);
        assert!(validate_disjoint(&empty).is_ok());
    }

    #[test]
    fn epoch_batch_sizes() {
        let m = manifest(20, 12);
        let sizes: Vec<usize> = make_batches(&m, 8, 1).unwrap().take(4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![8, 8, 4, 8]);
    }

    #[test]
    fn batches_cover_epoch_and_are_reproducible() {
        let m = manifest(20, 7);
        let a: Vec<Batch> = make_batches(&m, 8, 9).unwrap().take(6).collect();
        let b: Vec<Batch> = make_batches(&m, 8, 9).unwrap().take(6).collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = make_batches(&m, 8, 10).unwrap().take(6).collect();
        assert_ne!(a, c);
        let first_epoch: BTreeSet<usize> = a[..3].iter().flatten().map(|i| i.training_index).collect();
        assert_eq!(first_epoch.len(), 20);
        for item in a.iter().flatten() {
            assert_eq!(item.caption, m.regularization[item.regularization_index].caption);
            assert_eq!(item.caption.word().parse::<AgeGroup>().unwrap(), item.caption);
        }
        // Seven regularization pairs are all used before any repeats.
        let first_reg: BTreeSet<usize> = a.iter().flatten().take(7).map(|i| i.regularization_index).collect();
        assert_eq!(first_reg.len(), 7);
    }

    #[test]
    fn zero_batch_size_is_invalid() {
        let m = manifest(3, 3);
        assert!(matches!(make_batches(&m, 0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn import_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for p in ["subjects/T1/a.png", "subjects/T1/b.png", "reg/child/R1_0.png", "reg/old/R2_1.png"] {
            write_png(&dir.path().join(p));
        }
        let m = import_directory(dir.path(), "T1").unwrap();
        assert_eq!(m.training.images.len(), 2);
        assert_eq!(m.regularization.len(), 2);
        assert_eq!(m.regularization[0].subject_id, "R1");
        assert_eq!(m.regularization[1].caption, AgeGroup::Old);
        let counts = m.group_counts();
        assert_eq!(counts[&AgeGroup::Teenager], 0);
    }
}
