//! Face embedders and pairwise matching.
//!
//! Two embedder roles exist: the `loss` embedder supervises the biometric
//! training term, the `eval` embedder produces every reported score. They are
//! always distinct instances.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_archive, save_archive};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::nn::{adam, add_trunk, l2_normalize, linear, trunk_features, trunk_forward, ParamSet};
use crate::tensor::{stack_images, ImageTensor};

const MANIFEST_FORMAT: &str = "agedit-embedder/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderRole {
    Loss,
    Eval,
}

impl fmt::Display for EmbedderRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedderRole::Loss => "loss",
            EmbedderRole::Eval => "eval",
        })
    }
}

impl FromStr for EmbedderRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(EmbedderRole::Loss),
            "eval" => Ok(EmbedderRole::Eval),
            other => Err(Error::InvalidConfig(format!(
                "unknown embedder role `{other}` (expected loss or eval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub resolution: usize,
    pub channels: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 16,
            dim: 64,
            seed: 0,
        }
    }
}

/// Unit-norm face embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit L2 norm.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("embedding must be nonempty and finite".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Range("embedding has zero norm".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity in [-1, 1]; exactly symmetric in its arguments.
pub fn match_score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct EmbedderHandle {
    role: EmbedderRole,
    instance: String,
    config: EmbedderConfig,
    params: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedderManifest {
    format: String,
    role: EmbedderRole,
    instance: String,
    config: EmbedderConfig,
}

impl EmbedderHandle {
    pub fn init(role: EmbedderRole, config: EmbedderConfig) -> Result<Self> {
        if config.resolution == 0 || config.resolution % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedder resolution {} must be a positive multiple of 8",
                config.resolution
            )));
        }
        if config.dim == 0 || config.channels == 0 {
            return Err(Error::InvalidConfig("embedder dim and channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        add_trunk(&mut params, config.channels, &mut rng)?;
        params.add_linear(
            "head",
            trunk_features(config.resolution, config.channels),
            config.dim,
            1.0,
            &mut rng,
        )?;
        let instance = sha256_hex(format!("init:{role}:{}:{}", config.seed, config.dim).as_bytes())
            [..16]
            .to_string();
        Ok(Self {
            role,
            instance,
            config,
            params,
        })
    }

    pub fn role(&self) -> EmbedderRole {
        self.role
    }

    /// Identifier that differs between independently created or trained
    /// embedders.
    pub fn instance(&self) -> &str {
        &self.instance
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, images: &Tensor, trainable: bool) -> Result<Tensor> {
        let r = self.config.resolution;
        let d = images.dims();
        if d.len() != 4 || d[1] != 3 || d[2] != r || d[3] != r {
            return Err(Error::Shape(format!(
                "embedder expects (B, 3, {r}, {r}), got {d:?}"
            )));
        }
        let h = trunk_forward(&self.params, images, trainable)?;
        let e = linear(
            &h,
            &self.params.get("head.w", trainable)?,
            &self.params.get("head.b", trainable)?,
        )?;
        l2_normalize(&e)
    }

    /// Embeds a `(B, 3, R, R)` batch with frozen parameters; gradients still
    /// flow to the input images.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, false)
    }

    pub fn embed(&self, img: &ImageTensor) -> Result<EmbeddingVector> {
        let img = img.resized(self.config.resolution)?;
        let e = self.embed_batch(&img.tensor().unsqueeze(0)?)?;
        EmbeddingVector::new(e.squeeze(0)?.to_vec1::<f64>()?)
    }

    pub fn embed_all(&self, images: &[&ImageTensor]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let resized: Vec<ImageTensor> = chunk
                .iter()
                .map(|i| i.resized(self.config.resolution))
                .collect::<Result<_>>()?;
            let e = self.embed_batch(&stack_images(&resized)?)?;
            for row in e.to_vec2::<f64>()? {
                out.push(EmbeddingVector::new(row)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = EmbedderManifest {
            format: MANIFEST_FORMAT.to_string(),
            role: self.role,
            instance: self.instance.clone(),
            config: self.config.clone(),
        };
        save_archive(path, &self.params.to_tensors(), &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, manifest): (_, EmbedderManifest) = load_archive(path)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported embedder format `{}`",
                manifest.format
            )));
        }
        let mut h = Self::init(manifest.role, manifest.config)?;
        h.params.load_from(&tensors)?;
        h.instance = manifest.instance;
        Ok(h)
    }
}

/// Fails unless the two handles are distinct instances in the loss and eval
/// roles respectively.
pub fn ensure_distinct_roles(loss: &EmbedderHandle, eval: &EmbedderHandle) -> Result<()> {
    if loss.role != EmbedderRole::Loss || eval.role != EmbedderRole::Eval {
        return Err(Error::InvalidConfig(format!(
            "expected loss and eval embedders, got {} and {}",
            loss.role, eval.role
        )));
    }
    if loss.instance == eval.instance {
        return Err(Error::InvalidConfig(
            "loss and eval embedders must be distinct instances".into(),
        ));
    }
    Ok(())
}

/// An image tagged with its subject identity and a display name.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub subject_id: String,
    pub name: String,
    pub image: ImageTensor,
}

/// Loads `<dir>/<subject_id>/**/*.png` in sorted order; nested folders
/// (such as per-age-group output of generation) belong to the subject.
pub fn load_labeled_dir(dir: &Path, resolution: usize) -> Result<Vec<LabeledImage>> {
    let mut subjects: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e.to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subjects.sort();
    let mut out = Vec::new();
    for sdir in subjects {
        let subject_id = sdir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files = crate::io::find_pngs(&sdir)?;
        for f in files {
            let rel = f.strip_prefix(&sdir).unwrap_or(&f);
            let name = format!("{subject_id}/{}", rel.to_string_lossy());
            out.push(LabeledImage {
                subject_id: subject_id.clone(),
                name,
                image: ImageTensor::load(&f, resolution)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::load(dir, "no <subject>/*.png images found"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairType {
    Genuine,
    Impostor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_type: PairType,
    pub subject_a: String,
    pub subject_b: String,
    pub image_a: String,
    pub image_b: String,
    pub score: f64,
}

/// Genuine and impostor similarity scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.iter().chain(&impostor).any(|v| !v.is_finite()) {
            return Err(Error::Range("scores must be finite".into()));
        }
        Ok(Self { genuine, impostor })
    }

    pub fn from_pairs(pairs: &[ScoredPair]) -> Result<Self> {
        let mut s = ScoreSet::default();
        for p in pairs {
            match p.pair_type {
                PairType::Genuine => s.genuine.push(p.score),
                PairType::Impostor => s.impostor.push(p.score),
            }
        }
        Self::new(s.genuine, s.impostor)
    }
}

fn check_pair_counts(pairs: &[ScoredPair]) -> Result<()> {
    let g = pairs.iter().filter(|p| p.pair_type == PairType::Genuine).count();
    let i = pairs.len() - g;
    if g == 0 || i == 0 {
        return Err(Error::InsufficientPairs(format!(
            "need at least one genuine and one impostor pair, got {g} and {i}"
        )));
    }
    Ok(())
}

/// Scores every unordered pair within one labeled set.
pub fn score_pairs(h: &EmbedderHandle, images: &[LabeledImage]) -> Result<Vec<ScoredPair>> {
    let refs: Vec<&ImageTensor> = images.iter().map(|l| &l.image).collect();
    let emb = h.embed_all(&refs)?;
    let mut pairs = Vec::new();
    for i in 0..images.len() {
        for j in (i + 1)..images.len() {
            let (a, b) = (&images[i], &images[j]);
            pairs.push(ScoredPair {
                pair_type: if a.subject_id == b.subject_id {
                    PairType::Genuine
                } else {
                    PairType::Impostor
                },
                subject_a: a.subject_id.clone(),
                subject_b: b.subject_id.clone(),
                image_a: a.name.clone(),
                image_b: b.name.clone(),
                score: match_score(&emb[i], &emb[j])?,
            });
        }
    }
    check_pair_counts(&pairs)?;
    Ok(pairs)
}

/// Scores every pair `(a, b)` with `a` from `first` and `b` from `second`.
pub fn score_cross_pairs(
    h: &EmbedderHandle,
    first: &[LabeledImage],
    second: &[LabeledImage],
) -> Result<Vec<ScoredPair>> {
    let ea = h.embed_all(&first.iter().map(|l| &l.image).collect::<Vec<_>>())?;
    let eb = h.embed_all(&second.iter().map(|l| &l.image).collect::<Vec<_>>())?;
    let mut pairs = Vec::with_capacity(first.len() * second.len());
    for (a, va) in first.iter().zip(&ea) {
        for (b, vb) in second.iter().zip(&eb) {
            pairs.push(ScoredPair {
                pair_type: if a.subject_id == b.subject_id {
                    PairType::Genuine
                } else {
                    PairType::Impostor
                },
                subject_a: a.subject_id.clone(),
                subject_b: b.subject_id.clone(),
                image_a: a.name.clone(),
                image_b: b.name.clone(),
                score: match_score(va, vb)?,
            });
        }
    }
    check_pair_counts(&pairs)?;
    Ok(pairs)
}

pub fn write_scores_csv(path: &Path, pairs: &[ScoredPair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in pairs {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredPair>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::load(path, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Subjects per batch.
    pub subjects_per_batch: usize,
    /// Images drawn per subject in a batch.
    pub images_per_subject: usize,
    /// Impostor similarities above this value are penalized.
    pub margin: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 2e-3,
            subjects_per_batch: 8,
            images_per_subject: 4,
            margin: 0.2,
            seed: 0,
        }
    }
}

impl EmbedderTrainConfig {
    /// Settings for adapting an already trained matcher.
    pub fn fine_tune(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate: 1e-3,
            seed,
            ..Default::default()
        }
    }
}

/// Margin-based pairwise loss over a labeled batch: genuine pairs are pulled
/// to similarity 1, impostor pairs pushed below `margin`.
fn pairwise_margin_loss(emb: &Tensor, subjects: &[usize], margin: f64) -> Result<Tensor> {
    let n = subjects.len();
    let sims = emb.matmul(&emb.t()?)?;
    let mut gen_mask = vec![0.0f64; n * n];
    let mut imp_mask = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if subjects[i] == subjects[j] {
                gen_mask[i * n + j] = 1.0;
            } else {
                imp_mask[i * n + j] = 1.0;
            }
        }
    }
    let n_gen: f64 = gen_mask.iter().sum();
    let n_imp: f64 = imp_mask.iter().sum();
    let dev = emb.device();
    let gen_mask = Tensor::from_vec(gen_mask, (n, n), dev)?;
    let imp_mask = Tensor::from_vec(imp_mask, (n, n), dev)?;
    let mut loss = Tensor::zeros((), emb.dtype(), dev)?;
    if n_gen > 0.0 {
        let g = ((sims.clone() - 1.0)?.sqr()? * gen_mask)?.sum_all()?;
        loss = (loss + (g / n_gen)?)?;
    }
    if n_imp > 0.0 {
        let i = ((sims - margin)?.relu()?.sqr()? * imp_mask)?.sum_all()?;
        loss = (loss + (i / n_imp)?)?;
    }
    Ok(loss)
}

/// Metric-learning training; returns a new handle with the same role and a
/// new instance id. Deterministic given `cfg.seed`.
pub fn train_embedder(
    h: &EmbedderHandle,
    images: &[LabeledImage],
    cfg: &EmbedderTrainConfig,
) -> Result<EmbedderHandle> {
    if cfg.subjects_per_batch < 2 || cfg.images_per_subject < 1 {
        return Err(Error::InvalidConfig(
            "embedder batches need >= 2 subjects and >= 1 image per subject".into(),
        ));
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in images.iter().enumerate() {
        by_subject.entry(&l.subject_id).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::InsufficientData(
            "embedder training needs at least two subjects".into(),
        ));
    }
    let mut out = EmbedderHandle {
        role: h.role,
        instance: String::new(),
        config: h.config.clone(),
        params: h.params.deep_clone()?,
    };
    let resized: Vec<ImageTensor> = images
        .iter()
        .map(|l| l.image.resized(h.config.resolution))
        .collect::<Result<_>>()?;
    let groups: Vec<Vec<usize>> = by_subject.values().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = adam(out.params.vars(), cfg.learning_rate)?;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.subjects_per_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut idx = Vec::new();
            let mut labels = Vec::new();
            for &g in chunk {
                let mut members = groups[g].clone();
                members.shuffle(&mut rng);
                for &m in members.iter().take(cfg.images_per_subject) {
                    idx.push(m);
                    labels.push(g);
                }
            }
            let batch = stack_images(idx.iter().map(|&i| &resized[i]))?;
            let emb = out.forward(&batch, true)?;
            let loss = pairwise_margin_loss(&emb, &labels, cfg.margin)?;
            opt.backward_step(&loss)?;
        }
    }
    let digest = format!(
        "{}:{}:{:?}:{}",
        h.instance,
        images.len(),
        cfg,
        out.params.snapshot()?.iter().fold(0u64, |a, b| a.rotate_left(5) ^ b)
    );
    out.instance = sha256_hex(digest.as_bytes())[..16].to_string();
    Ok(out)
}

/// Fine-tunes an eval-role matcher on labeled (age-edited) images whose
/// subjects must not overlap `held_out_subjects`.
pub fn fine_tune_embedder(
    h: &EmbedderHandle,
    generated: &[LabeledImage],
    epochs: usize,
    seed: u64,
    held_out_subjects: &[String],
) -> Result<EmbedderHandle> {
    if h.role != EmbedderRole::Eval {
        return Err(Error::InvalidConfig(
            "only eval-role matchers are fine-tuned".into(),
        ));
    }
    let held: BTreeSet<&str> = held_out_subjects.iter().map(String::as_str).collect();
    let shared: BTreeSet<String> = generated
        .iter()
        .filter(|l| held.contains(l.subject_id.as_str()))
        .map(|l| l.subject_id.clone())
        .collect();
    if !shared.is_empty() {
        return Err(Error::Disjointness(shared.into_iter().collect()));
    }
    if epochs == 0 {
        return Ok(EmbedderHandle {
            role: h.role,
            instance: h.instance.clone(),
            config: h.config.clone(),
            params: h.params.deep_clone()?,
        });
    }
    train_embedder(h, generated, &EmbedderTrainConfig::fine_tune(epochs, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::device;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn flat(value: f64) -> ImageTensor {
        ImageTensor::new(Tensor::full(value, (3, 32, 32), &device()).unwrap()).unwrap()
    }

    fn striped() -> ImageTensor {
        let data: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i / 4) % 2) as f64).collect();
        ImageTensor::from_chw(data, 32, 32).unwrap()
    }

    #[test]
    fn match_score_examples() {
        let v = emb(&[0.3, -0.4, 0.5]);
        assert!((match_score(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(match_score(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let neg = emb(&[-0.3, 0.4, -0.5]);
        assert!((match_score(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(match_score(&v, &emb(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let h = EmbedderHandle::init(EmbedderRole::Eval, EmbedderConfig::default()).unwrap();
        let img = striped();
        let a = h.embed(&img).unwrap();
        let b = h.embed(&img).unwrap();
        assert_eq!(a, b);
        let norm = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.dim(), 64);
        let c = h.embed(&flat(0.2)).unwrap();
        assert!(match_score(&a, &c).unwrap() < 1.0);
    }

    #[test]
    fn embed_resizes_other_resolutions() {
        let h = EmbedderHandle::init(EmbedderRole::Eval, EmbedderConfig::default()).unwrap();
        let big = ImageTensor::new(Tensor::full(0.5, (3, 64, 64), &device()).unwrap()).unwrap();
        assert_eq!(h.embed(&big).unwrap().dim(), 64);
    }

    #[test]
    fn pair_counts_two_by_two() {
        let h = EmbedderHandle::init(EmbedderRole::Eval, EmbedderConfig::default()).unwrap();
        let imgs: Vec<LabeledImage> = [("a", 0.1), ("a", 0.2), ("b", 0.6), ("b", 0.9)]
            .iter()
            .enumerate()
            .map(|(i, (s, v))| LabeledImage {
                subject_id: s.to_string(),
                name: format!("{i}"),
                image: flat(*v),
            })
            .collect();
        let pairs = score_pairs(&h, &imgs).unwrap();
        let set = ScoreSet::from_pairs(&pairs).unwrap();
        assert_eq!(set.genuine.len(), 2);
        assert_eq!(set.impostor.len(), 4);
        assert!(set.genuine.iter().chain(&set.impostor).all(|s| (-1.0..=1.0).contains(s)));

        let single: Vec<LabeledImage> = imgs.iter().take(2).cloned().collect();
        assert!(matches!(score_pairs(&h, &single), Err(Error::InsufficientPairs(_))));
    }

    #[test]
    fn distinct_role_check() {
        let cfg = EmbedderConfig::default();
        let loss = EmbedderHandle::init(EmbedderRole::Loss, cfg.clone()).unwrap();
        let eval = EmbedderHandle::init(EmbedderRole::Eval, cfg).unwrap();
        ensure_distinct_roles(&loss, &eval).unwrap();
        assert!(ensure_distinct_roles(&eval, &loss).is_err());
    }

    #[test]
    fn fine_tune_guards() {
        let eval = EmbedderHandle::init(EmbedderRole::Eval, EmbedderConfig::default()).unwrap();
        let imgs = vec![
            LabeledImage { subject_id: "s1".into(), name: "0".into(), image: flat(0.1) },
            LabeledImage { subject_id: "s2".into(), name: "1".into(), image: flat(0.9) },
        ];
        let r = fine_tune_embedder(&eval, &imgs, 1, 0, &["s2".to_string()]);
        assert!(matches!(r, Err(Error::Disjointness(ids)) if ids == vec!["s2".to_string()]));

        let same = fine_tune_embedder(&eval, &imgs, 0, 0, &[]).unwrap();
        assert_eq!(same.params().snapshot().unwrap(), eval.params().snapshot().unwrap());
        assert_eq!(same.dim(), eval.dim());

        let loss = EmbedderHandle::init(EmbedderRole::Loss, EmbedderConfig::default()).unwrap();
        assert!(fine_tune_embedder(&loss, &imgs, 1, 0, &[]).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let pairs = vec![ScoredPair {
            pair_type: PairType::Impostor,
            subject_a: "a".into(),
            subject_b: "b".into(),
            image_a: "a/0.png".into(),
            image_b: "b/1.png".into(),
            score: -0.125,
        }];
        write_scores_csv(&p, &pairs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("pair_type,subject_a,subject_b,image_a,image_b,score\n"));
        assert_eq!(read_scores_csv(&p).unwrap(), pairs);
    }
}
