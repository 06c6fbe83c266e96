//! Age-group prediction for the dispersion statistic. The default predictor
//! is a small classifier trained on captioned regularization images.

use std::path::Path;

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_archive, save_archive};
use crate::error::{Error, Result};
use crate::evaluation::age_dispersion;
use crate::nn::{adam, add_trunk, linear, trunk_features, trunk_forward, ParamSet};
use crate::prompts::AgeGroup;
use crate::tensor::{device, stack_images, ImageTensor};

const MANIFEST_FORMAT: &str = "agedit-age/1";

pub trait AgePredictor {
    fn predict_group(&self, img: &ImageTensor) -> Result<AgeGroup>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgeClassifierConfig {
    pub resolution: usize,
    pub channels: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AgeClassifierConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 16,
            epochs: 40,
            learning_rate: 2e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgeClassifier {
    config: AgeClassifierConfig,
    params: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgeManifest {
    format: String,
    config: AgeClassifierConfig,
    classes: Vec<String>,
}

impl AgeClassifier {
    pub fn init(config: AgeClassifierConfig) -> Result<Self> {
        if config.resolution == 0 || config.resolution % 8 != 0 || config.channels == 0 {
            return Err(Error::InvalidConfig(
                "age classifier needs a positive multiple-of-8 resolution and channels".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        add_trunk(&mut params, config.channels, &mut rng)?;
        params.add_linear(
            "head",
            trunk_features(config.resolution, config.channels),
            AgeGroup::ALL.len(),
            1.0,
            &mut rng,
        )?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &AgeClassifierConfig {
        &self.config
    }

    fn logits(&self, images: &Tensor, trainable: bool) -> Result<Tensor> {
        let h = trunk_forward(&self.params, images, trainable)?;
        linear(
            &h,
            &self.params.get("head.w", trainable)?,
            &self.params.get("head.b", trainable)?,
        )
    }

    /// Cross-entropy training on `(image, group)` examples.
    pub fn train(examples: &[(ImageTensor, AgeGroup)], config: AgeClassifierConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InsufficientData("age classifier needs examples".into()));
        }
        if config.batch_size == 0 || !(config.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("batch_size and learning_rate must be positive".into()));
        }
        let model = Self::init(config)?;
        let res = model.config.resolution;
        let images: Vec<ImageTensor> = examples.iter().map(|(i, _)| i.resized(res)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0xa9e);
        let mut opt = adam(model.params.vars(), model.config.learning_rate)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for _ in 0..model.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(model.config.batch_size) {
                let x = stack_images(chunk.iter().map(|&i| &images[i]))?;
                let y: Vec<u32> = chunk.iter().map(|&i| examples[i].1.index() as u32).collect();
                let y = Tensor::from_vec(y, chunk.len(), &device())?;
                let loss = candle_nn::loss::cross_entropy(&model.logits(&x, true)?, &y)?;
                opt.backward_step(&loss)?;
            }
        }
        Ok(model)
    }

    pub fn predict_all(&self, images: &[ImageTensor]) -> Result<Vec<AgeGroup>> {
        let res = self.config.resolution;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let resized: Vec<ImageTensor> = chunk.iter().map(|i| i.resized(res)).collect::<Result<_>>()?;
            let logits = self.logits(&stack_images(&resized)?, false)?;
            for row in logits.argmax(1)?.to_vec1::<u32>()? {
                out.push(AgeGroup::from_index(row as usize).expect("six classes"));
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, examples: &[(ImageTensor, AgeGroup)]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::InsufficientData("accuracy of an empty set".into()));
        }
        let images: Vec<ImageTensor> = examples.iter().map(|(i, _)| i.clone()).collect();
        let pred = self.predict_all(&images)?;
        let hits = pred.iter().zip(examples).filter(|(p, (_, g))| *p == g).count();
        Ok(hits as f64 / examples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = AgeManifest {
            format: MANIFEST_FORMAT.into(),
            config: self.config.clone(),
            classes: AgeGroup::ALL.iter().map(|g| g.word().to_string()).collect(),
        };
        save_archive(path, &self.params.to_tensors(), &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, manifest): (_, AgeManifest) = load_archive(path)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported age model format `{}`", manifest.format)));
        }
        let mut model = Self::init(manifest.config)?;
        model.params.load_from(&tensors)?;
        Ok(model)
    }
}

impl AgePredictor for AgeClassifier {
    fn predict_group(&self, img: &ImageTensor) -> Result<AgeGroup> {
        Ok(self.predict_all(std::slice::from_ref(img))?[0])
    }
}

/// Dispersion of predicted group indices over a set of images.
pub fn predicted_dispersion(predictor: &dyn AgePredictor, images: &[ImageTensor]) -> Result<f64> {
    let idx = images
        .iter()
        .map(|i| Ok(predictor.predict_group(i)?.index() as f64))
        .collect::<Result<Vec<_>>>()?;
    age_dispersion(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_age, FaceIdentity};

    fn examples(n_ids: usize, seed: u64) -> Vec<(ImageTensor, AgeGroup)> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..n_ids {
            let id = FaceIdentity::random(&mut r);
            for g in [AgeGroup::Child, AgeGroup::Old] {
                let a = sample_age(g, &mut r);
                out.push((id.render(a, 32, &mut r), g));
            }
        }
        out
    }

    #[test]
    fn learns_child_versus_old() {
        let cfg = AgeClassifierConfig { epochs: 15, ..Default::default() };
        let clf = AgeClassifier::train(&examples(16, 1), cfg).unwrap();
        let acc = clf.accuracy(&examples(8, 2)).unwrap();
        assert!(acc >= 0.8, "held-out accuracy {acc}");
    }

    #[test]
    fn save_load_round_trip() {
        let clf = AgeClassifier::init(AgeClassifierConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("age.safetensors");
        clf.save(&p).unwrap();
        let back = AgeClassifier::load(&p).unwrap();
        let imgs: Vec<ImageTensor> = examples(2, 3).into_iter().map(|(i, _)| i).collect();
        assert_eq!(clf.predict_all(&imgs).unwrap(), back.predict_all(&imgs).unwrap());
    }
}
