//! Reverse diffusion from pure noise and the post-sampling quality gate.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{estimate_clean_batch, ModelParams};
use crate::prompts::{AgeGroup, PromptSpec, TokenRegistry};
use crate::tensor::{device, ImageTensor};

/// Maps an image to a quality value in [0, 1].
pub trait QualityScorer {
    fn score(&self, img: &ImageTensor) -> Result<f64>;
}

/// Deterministic stand-in for a face-quality network: luminance contrast
/// times a smoothness factor that drops towards 0 for noise-like images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastSmoothnessScorer {
    /// Luminance standard deviation that earns full contrast credit.
    pub full_contrast: f64,
}

impl Default for ContrastSmoothnessScorer {
    fn default() -> Self {
        Self { full_contrast: 0.12 }
    }
}

impl QualityScorer for ContrastSmoothnessScorer {
    fn score(&self, img: &ImageTensor) -> Result<f64> {
        let (h, w) = (img.height(), img.width());
        let v = img.to_vec()?;
        let lum: Vec<f64> = (0..h * w)
            .map(|i| 0.299 * v[i] + 0.587 * v[h * w + i] + 0.114 * v[2 * h * w + i])
            .collect();
        let mean = lum.iter().sum::<f64>() / lum.len() as f64;
        let std = (lum.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / lum.len() as f64).sqrt();
        if std < 1e-9 {
            return Ok(0.0);
        }
        let mut diff = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    diff += (lum[y * w + x] - lum[y * w + x + 1]).abs();
                    count += 1;
                }
                if y + 1 < h {
                    diff += (lum[y * w + x] - lum[(y + 1) * w + x]).abs();
                    count += 1;
                }
            }
        }
        // Independent pixels give E|a - b| = 2 std / sqrt(pi).
        let roughness = diff / count.max(1) as f64 / (2.0 * std / std::f64::consts::PI.sqrt());
        let smooth = (1.0 - roughness).clamp(0.0, 1.0);
        let contrast = (std / self.full_contrast).min(1.0);
        Ok((contrast * smooth).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityGateConfig {
    pub threshold: f64,
    pub n_generate: usize,
    pub max_keep: usize,
}

impl Default for QualityGateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.4,
            n_generate: 8,
            max_keep: 4,
        }
    }
}

impl QualityGateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!(
                "quality threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.max_keep < 1 || self.max_keep > self.n_generate {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= max_keep ({}) <= n_generate ({})",
                self.max_keep, self.n_generate
            )));
        }
        Ok(())
    }
}

/// Indices of scores strictly above `threshold`, best first (ties keep input
/// order), at most `max_keep` of them.
pub fn gate_indices(scores: &[f64], threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > threshold).collect();
    keep.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    keep.truncate(max_keep);
    keep
}

#[derive(Debug, Clone)]
pub struct ScoredImage {
    /// Position in the list that was gated.
    pub index: usize,
    pub score: f64,
    pub image: ImageTensor,
}

pub fn quality_gate(
    images: &[ImageTensor],
    cfg: &QualityGateConfig,
    scorer: &dyn QualityScorer,
) -> Result<Vec<ScoredImage>> {
    let scores = images.iter().map(|i| scorer.score(i)).collect::<Result<Vec<_>>>()?;
    Ok(gate_indices(&scores, cfg.threshold, cfg.max_keep)
        .into_iter()
        .map(|i| ScoredImage {
            index: i,
            score: scores[i],
            image: images[i].clone(),
        })
        .collect())
}

/// Descending timesteps `T = t_S > ... > t_1 >= 1` used for `steps` reverse
/// updates; the last update lands on t = 0.
pub fn timestep_sequence(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(total).max(1);
    let mut ts: Vec<usize> = (1..=steps).rev().map(|i| (i * total).div_ceil(steps)).collect();
    ts.dedup();
    ts
}

/// Ancestral sampling of `n` images for a prompt. Each reverse update from
/// `t` to `s < t` draws from the Gaussian posterior `q(z_s | z_t, z0_hat)`.
pub fn sample(
    params: &ModelParams,
    registry: &TokenRegistry,
    prompt: &PromptSpec,
    n: usize,
    inference_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageTensor>> {
    if inference_steps < 1 {
        return Err(Error::InvalidConfig("inference_steps must be >= 1".into()));
    }
    let text = registry.render_prompt(prompt)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = params.embed_prompt(&text)?;
    let cond = ModelParams::repeat_condition(&c, n)?;
    let cfg = params.config();
    let k = cfg.latent_size();
    let shape = (n, cfg.latent_channels, k, k);
    let schedule = params.schedule();
    let gaussian = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let data: Vec<f64> = (0..n * cfg.latent_channels * k * k)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Ok(Tensor::from_vec(data, shape, &device())?)
    };
    let mut z = gaussian(rng)?;
    let seq = timestep_sequence(schedule.steps(), inference_steps);
    for (i, &t) in seq.iter().enumerate() {
        let s = seq.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; n];
        let eps = params.predict_noise_batch(&z, &ts, &cond)?;
        let z0 = estimate_clean_batch(&z, &ts, &eps, schedule)?;
        let abar_t = schedule.alpha(t).powi(2);
        let abar_s = schedule.alpha(s).powi(2);
        let ratio = abar_t / abar_s;
        let denom = 1.0 - abar_t;
        let c0 = abar_s.sqrt() * (1.0 - ratio) / denom;
        let ct = ratio.sqrt() * (1.0 - abar_s) / denom;
        let mean = ((z0 * c0)? + (&z * ct)?)?;
        z = if s > 0 {
            let var = (1.0 - abar_s) / denom * (1.0 - ratio);
            (mean + (gaussian(rng)? * var.max(0.0).sqrt())?)?
        } else {
            mean
        };
    }
    let x = params.decode_batch(&z)?.clamp(0.0, 1.0)?;
    (0..n).map(|i| ImageTensor::new(x.get(i)?)).collect()
}

/// Everything produced for one age group.
#[derive(Debug, Clone)]
pub struct GroupSamples {
    pub images: Vec<ImageTensor>,
    pub scores: Vec<f64>,
    pub retained: Vec<ScoredImage>,
}

fn group_seed(seed: u64, group: AgeGroup) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (group.index() as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Samples `cfg.n_generate` images per requested group and gates them. Each
/// group uses its own random stream derived from `seed`, so results do not
/// depend on which other groups were requested.
#[allow(clippy::too_many_arguments)]
pub fn generate_aged(
    params: &ModelParams,
    registry: &TokenRegistry,
    token: &str,
    class_label: &str,
    groups: &[AgeGroup],
    cfg: &QualityGateConfig,
    scorer: &dyn QualityScorer,
    inference_steps: usize,
    seed: u64,
) -> Result<BTreeMap<AgeGroup, GroupSamples>> {
    cfg.validate()?;
    registry.check(token)?;
    let mut out = BTreeMap::new();
    for &group in groups {
        let spec = PromptSpec::new(token, class_label, group)?;
        let mut rng = ChaCha8Rng::seed_from_u64(group_seed(seed, group));
        let images = sample(params, registry, &spec, cfg.n_generate, inference_steps, &mut rng)?;
        let scores = images.iter().map(|i| scorer.score(i)).collect::<Result<Vec<_>>>()?;
        let retained = gate_indices(&scores, cfg.threshold, cfg.max_keep)
            .into_iter()
            .map(|i| ScoredImage {
                index: i,
                score: scores[i],
                image: images[i].clone(),
            })
            .collect();
        out.insert(group, GroupSamples { images, scores, retained });
    }
    Ok(out)
}

fn png_bytes(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.to_rgb()?
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Writes retained images to `out/<token>/<group>/<index>.png` and every
/// score to `out/<token>/scores.csv`.
pub fn write_generation(out: &Path, token: &str, results: &BTreeMap<AgeGroup, GroupSamples>) -> Result<()> {
    let root = out.join(token);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["agegroup", "index", "quality", "retained"])?;
    for (group, r) in results {
        let kept: Vec<usize> = r.retained.iter().map(|s| s.index).collect();
        for (i, q) in r.scores.iter().enumerate() {
            w.write_record([group.word().to_string(), i.to_string(), q.to_string(), kept.contains(&i).to_string()])?;
        }
        for s in &r.retained {
            write_atomic(&root.join(group.word()).join(format!("{}.png", s.index)), &png_bytes(&s.image)?)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&root.join("scores.csv"), &bytes)
}
