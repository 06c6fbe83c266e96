//! Subject fine-tuning: autoencoder warm-up, then the denoiser (and in
//! biometric mode the autoencoder) trained on the mode's combined objective.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::biometrics::{EmbedderHandle, EmbedderRole};
use crate::data::{make_batches, Batch, DatasetManifest, TrainingData};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{
    biometric_distance, combined_loss_tensor, nt_xent, weighted_squared_error, LossBreakdown, LossComponents,
    LossMode, LossWeights,
};
use crate::model::{estimate_clean_batch, ModelParams, SegmentKind};
use crate::nn::adam;
use crate::prompts::{class_prompt, TokenRegistry, DEFAULT_CLASS_LABEL};
use crate::tensor::{device, stack_images, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mode: LossMode,
    pub weights: LossWeights,
    pub seed: u64,
    pub resolution: usize,
    pub token: String,
    pub class_label: String,
    /// Std of Gaussian jitter added to both contrastive views; 0 disables.
    pub contrastive_jitter: f64,
    /// Reconstruction-only steps run on the autoencoder before fine-tuning.
    pub autoencoder_steps: usize,
    pub autoencoder_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            steps: 800,
            batch_size: 8,
            mode: LossMode::Baseline,
            weights: LossWeights::default(),
            seed: 0,
            resolution: 32,
            token: "sks".into(),
            class_label: DEFAULT_CLASS_LABEL.into(),
            contrastive_jitter: 0.0,
            autoencoder_steps: 200,
            autoencoder_lr: 2e-3,
        }
    }
}

impl TrainConfig {
    /// Settings for the randomly initialized toy model, which needs a much
    /// larger step size than fine-tuning a pretrained one.
    pub fn toy(mode: LossMode, seed: u64) -> Self {
        Self {
            learning_rate: 2e-3,
            mode,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("autoencoder_lr", self.autoencoder_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.contrastive_jitter.is_finite() && self.contrastive_jitter >= 0.0) {
            return Err(Error::InvalidConfig("contrastive_jitter must be >= 0".into()));
        }
        if self.class_label.trim().is_empty() {
            return Err(Error::InvalidConfig("class_label is empty".into()));
        }
        self.weights.validate()
    }

    pub fn subject_prompt(&self) -> String {
        format!("photo of a {} {}", self.token, self.class_label)
    }
}

/// Segments updated by each mode. The text embedder is never trained.
pub fn trainable_segments(mode: LossMode) -> &'static [SegmentKind] {
    match mode {
        LossMode::Baseline | LossMode::Contrastive => &[SegmentKind::Denoiser],
        LossMode::Biometric => &[SegmentKind::Denoiser, SegmentKind::VaeEncoder, SegmentKind::VaeDecoder],
    }
}

pub fn apply_freeze_map(params: &mut ModelParams, mode: LossMode) {
    for kind in [SegmentKind::VaeEncoder, SegmentKind::VaeDecoder, SegmentKind::Denoiser] {
        params.set_trainable(kind, trainable_segments(mode).contains(&kind));
    }
}

#[derive(Debug)]
pub struct TrainRecord {
    pub history: Vec<LossBreakdown>,
    pub params: ModelParams,
    pub duration: Duration,
}

impl TrainRecord {
    pub fn totals(&self) -> Vec<f64> {
        self.history.iter().map(|b| b.total).collect()
    }
}

/// Trains encoder and decoder on pixel reconstruction, then rescales the
/// latent space to unit standard deviation over `images`. Other segments'
/// trainable flags are restored afterwards.
pub fn pretrain_autoencoder(
    params: &mut ModelParams,
    images: &[ImageTensor],
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::InsufficientData("autoencoder warm-up needs images".into()));
    }
    let saved: Vec<(SegmentKind, bool)> = [SegmentKind::VaeEncoder, SegmentKind::VaeDecoder, SegmentKind::Denoiser]
        .iter()
        .map(|k| (*k, params.is_trainable(*k)))
        .collect();
    params.set_trainable(SegmentKind::VaeEncoder, true);
    params.set_trainable(SegmentKind::VaeDecoder, true);
    params.set_trainable(SegmentKind::Denoiser, false);
    let mut history = Vec::with_capacity(steps);
    let result = (|| -> Result<()> {
        let mut opt = adam(params.trainable_vars(), learning_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in 0..steps {
            let idx: Vec<usize> = (0..batch_size.min(images.len()))
                .map(|_| rng.random_range(0..images.len()))
                .collect();
            let x = stack_images(idx.iter().map(|&i| &images[i]))?;
            let y = params.decode_batch(&params.encode_batch(&x)?)?;
            let loss = (y - &x)?.sqr()?.mean_all()?;
            let v = loss.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::Divergence { step });
            }
            history.push(v);
            opt.backward_step(&loss)?;
        }
        Ok(())
    })();
    for (k, t) in saved {
        params.set_trainable(k, t);
    }
    result?;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(64) {
        let z = params.encode_batch(&stack_images(chunk)?)?.detach();
        sum_sq += z.sqr()?.sum_all()?.to_scalar::<f64>()?;
        count += z.elem_count();
    }
    let rms = (sum_sq / count as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        params.set_latent_scale(params.config().latent_scale / rms)?;
    }
    Ok(history)
}

/// Everything a training step needs besides the model.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub data: &'a TrainingData,
    pub embedder: Option<&'a EmbedderHandle>,
    /// Clean latents of every training and regularization image; only used
    /// while the encoder is frozen.
    pub cached: Option<(Tensor, Tensor)>,
    pub subject_cond: Tensor,
    pub class_cond: Tensor,
    /// One conditioning row per age group for regularization captions.
    pub caption_conds: Vec<Tensor>,
}

impl<'a> StepContext<'a> {
    pub fn new(
        params: &ModelParams,
        config: &'a TrainConfig,
        data: &'a TrainingData,
        embedder: Option<&'a EmbedderHandle>,
    ) -> Result<Self> {
        if config.mode == LossMode::Biometric {
            let e = embedder.ok_or(Error::MissingComponent {
                mode: config.mode.name(),
                component: "embedder",
            })?;
            if e.role() != EmbedderRole::Loss {
                return Err(Error::InvalidConfig("the biometric term needs a loss-role embedder".into()));
            }
        }
        let subject_cond = params.embed_prompt(&config.subject_prompt())?.tensor().clone();
        let class_cond = params
            .embed_prompt(&class_prompt(&config.class_label, None))?
            .tensor()
            .clone();
        let caption_conds = crate::prompts::AgeGroup::ALL
            .iter()
            .map(|g| Ok(params.embed_prompt(&class_prompt(&config.class_label, Some(*g)))?.tensor().clone()))
            .collect::<Result<_>>()?;
        let encoder_frozen = !params.is_trainable(SegmentKind::VaeEncoder);
        let cached = if encoder_frozen {
            let enc = |imgs: &[ImageTensor]| -> Result<Tensor> {
                let parts = imgs
                    .chunks(64)
                    .map(|c| Ok(params.encode_batch(&stack_images(c)?)?.detach()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&parts, 0)?)
            };
            Some((enc(&data.training)?, enc(&data.regularization)?))
        } else {
            None
        };
        Ok(Self {
            config,
            data,
            embedder,
            cached,
            subject_cond,
            class_cond,
            caption_conds,
        })
    }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

fn rows(cond: &Tensor, n: usize) -> Result<Tensor> {
    Ok(cond.unsqueeze(0)?.repeat((n, 1))?)
}

/// Computes the combined loss on one batch and applies a single update to the
/// trainable segments. Returns the pre-update breakdown.
pub fn train_step(
    params: &ModelParams,
    opt: &mut candle_nn::AdamW,
    batch: &Batch,
    ctx: &StepContext<'_>,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let cfg = ctx.config;
    let mode = cfg.mode;
    let schedule = params.schedule();
    let b = batch.len();
    if mode == LossMode::Contrastive && b < 2 {
        return Err(Error::InsufficientBatch(format!(
            "contrastive mode needs batches of at least 2, got {b}"
        )));
    }
    let ti: Vec<usize> = batch.iter().map(|i| i.training_index).collect();
    let ri: Vec<usize> = batch.iter().map(|i| i.regularization_index).collect();
    let x = stack_images(ti.iter().map(|&i| &ctx.data.training[i]))?;
    let x_reg = stack_images(ri.iter().map(|&i| &ctx.data.regularization[i]))?;
    let (z0, z0_reg) = match &ctx.cached {
        Some((zt, zr)) => {
            let idx = |v: &[usize]| Tensor::from_vec(v.iter().map(|&i| i as u32).collect::<Vec<_>>(), v.len(), &device());
            (zt.index_select(&idx(&ti)?, 0)?, zr.index_select(&idx(&ri)?, 0)?)
        }
        None => (params.encode_batch(&x)?, params.encode_batch(&x_reg)?),
    };

    let ts: Vec<usize> = (0..b).map(|_| schedule.sample_timestep(rng)).collect();
    let ts_prime: Vec<usize> = (0..b).map(|_| schedule.sample_timestep(rng)).collect();
    let noise = gaussian(z0.dims(), rng)?;
    let noise_prime = gaussian(z0_reg.dims(), rng)?;
    let z_t = schedule.diffuse_batch(&z0, &ts, &noise)?;
    let z_t_prime = schedule.diffuse_batch(&z0_reg, &ts_prime, &noise_prime)?;

    let cond = rows(&ctx.subject_cond, b)?;
    let cond_reg = Tensor::stack(
        &batch.iter().map(|i| &ctx.caption_conds[i.caption.index()]).collect::<Vec<_>>(),
        0,
    )?;
    let eps = params.predict_noise_batch(&z_t, &ts, &cond)?;
    let z0_hat = estimate_clean_batch(&z_t, &ts, &eps, schedule)?;
    let eps_prime = params.predict_noise_batch(&z_t_prime, &ts_prime, &cond_reg)?;
    let z0_reg_hat = estimate_clean_batch(&z_t_prime, &ts_prime, &eps_prime, schedule)?;
    let w: Vec<f64> = ts.iter().map(|&t| schedule.weight(t)).collect();
    let w_prime: Vec<f64> = ts_prime.iter().map(|&t| schedule.weight(t)).collect();

    let mut comps = LossComponents::<Tensor>::default();
    if params.is_trainable(SegmentKind::VaeDecoder) {
        // Pixel-space terms keep a trainable autoencoder from shrinking the
        // latent space to make the latent error vanish.
        comps.reconstruction = Some(weighted_squared_error(&x, &params.decode_batch(&z0_hat)?, &w)?);
        comps.prior = Some(weighted_squared_error(&x_reg, &params.decode_batch(&z0_reg_hat)?, &w_prime)?);
    } else {
        comps.reconstruction = Some(weighted_squared_error(&z0, &z0_hat, &w)?);
        comps.prior = Some(weighted_squared_error(&z0_reg, &z0_reg_hat, &w_prime)?);
    }
    match mode {
        LossMode::Baseline => {}
        LossMode::Biometric => {
            let e = ctx.embedder.ok_or(Error::MissingComponent {
                mode: mode.name(),
                component: "embedder",
            })?;
            let class_rows = rows(&ctx.class_cond, b)?;
            let eps_class = params.predict_noise_batch(&z_t, &ts, &class_rows)?;
            let z_class = estimate_clean_batch(&z_t, &ts, &eps_class, schedule)?;
            let generated = params.decode_batch(&z_class)?;
            let res = e.config().resolution;
            let (generated, truth) = if res == cfg.resolution {
                (generated, x.clone())
            } else {
                (
                    generated.upsample_nearest2d(res, res)?,
                    x.upsample_nearest2d(res, res)?,
                )
            };
            comps.biometric = Some(biometric_distance(&e.embed_batch(&generated)?, &e.embed_batch(&truth)?.detach())?);
        }
        LossMode::Contrastive => {
            let (mut a, mut p) = (z0_hat.clone(), z0.clone());
            if cfg.contrastive_jitter > 0.0 {
                a = (a + (gaussian(z0.dims(), rng)? * cfg.contrastive_jitter)?)?;
                p = (p + (gaussian(z0.dims(), rng)? * cfg.contrastive_jitter)?)?;
            }
            comps.contrastive = Some(nt_xent(&a, &p, cfg.weights.temperature)?);
        }
    }
    let (total, breakdown) = combined_loss_tensor(mode, &comps, &cfg.weights)?;
    if !breakdown.is_finite() {
        return Err(Error::Divergence { step });
    }
    opt.backward_step(&total)?;
    Ok(breakdown)
}

/// Runs `config.steps` updates on a copy of `params` after applying the
/// mode's freeze map. The input model is not modified.
pub fn fine_tune(
    params: &ModelParams,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    registry: &TokenRegistry,
    embedder: Option<&EmbedderHandle>,
) -> Result<TrainRecord> {
    let data = TrainingData::load(manifest, config.resolution)?;
    fine_tune_data(params, manifest, &data, config, registry, embedder)
}

/// [`fine_tune`] with images already decoded.
pub fn fine_tune_data(
    params: &ModelParams,
    manifest: &DatasetManifest,
    data: &TrainingData,
    config: &TrainConfig,
    registry: &TokenRegistry,
    embedder: Option<&EmbedderHandle>,
) -> Result<TrainRecord> {
    config.validate()?;
    registry.check(&config.token)?;
    if config.resolution != params.config().resolution {
        return Err(Error::InvalidConfig(format!(
            "training resolution {} differs from model resolution {}",
            config.resolution,
            params.config().resolution
        )));
    }
    let report = crate::data::validate_disjoint(manifest);
    if !report.is_ok() {
        return Err(Error::Disjointness(report.shared_ids));
    }
    let n = manifest.training.images.len();
    if config.mode == LossMode::Contrastive && (config.batch_size < 2 || (n % config.batch_size == 1 && n > 1) || n < 2) {
        return Err(Error::InvalidConfig(format!(
            "contrastive mode would produce a batch of one ({n} images, batch size {})",
            config.batch_size
        )));
    }
    let start = Instant::now();
    let mut model = params.deep_clone()?;
    apply_freeze_map(&mut model, config.mode);
    let ctx = StepContext::new(&model, config, data, embedder)?;
    let mut opt = adam(model.trainable_vars(), config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches = make_batches(manifest, config.batch_size, config.seed ^ 0x5eed_ba7c)?;
    let mut history = Vec::with_capacity(config.steps);
    for (step, batch) in batches.take(config.steps).enumerate() {
        let b = train_step(&model, &mut opt, &batch, &ctx, step, &mut rng)?;
        if step % 100 == 0 {
            log::debug!("step {step}: total {:.5}", b.total);
        }
        history.push(b);
    }
    Ok(TrainRecord {
        history,
        params: model,
        duration: start.elapsed(),
    })
}

pub fn loss_csv(history: &[LossBreakdown]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "reconstruction", "prior", "biometric", "contrastive", "total"])?;
    for (i, b) in history.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.reconstruction.to_string(),
            b.prior.to_string(),
            b.biometric.to_string(),
            b.contrastive.to_string(),
            b.total.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    write_atomic(path, &loss_csv(history)?)
}

/// Mean total of the first and last `window` steps.
pub fn loss_drop(history: &[LossBreakdown], window: usize) -> Option<(f64, f64)> {
    if history.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..window]), mean(&history[history.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biometrics::EmbedderConfig;
    use crate::data::load_manifest;
    use crate::model::ModelConfig;
    use crate::synth::{write_fixture, FixtureSpec};

    struct Setup {
        _dir: tempfile::TempDir,
        manifest: DatasetManifest,
        data: TrainingData,
        params: ModelParams,
    }

    fn setup() -> Setup {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            resolution: 16,
            target_images: 6,
            reg_subjects: 12,
            reg_per_group: 2,
            pretrain_subjects: 2,
            pretrain_images: 1,
            finetune_subjects: 2,
            finetune_per_group: 1,
            eval_subjects: 2,
            eval_ori: 1,
            eval_mod: 1,
            ..Default::default()
        };
        write_fixture(dir.path(), &spec).unwrap();
        let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
        let data = TrainingData::load(&manifest, 16).unwrap();
        let params = ModelParams::init(ModelConfig {
            resolution: 16,
            vae_channels: 4,
            denoiser_channels: 8,
            denoiser_global: 16,
            ..Default::default()
        })
        .unwrap();
        Setup { _dir: dir, manifest, data, params }
    }

    fn cfg(mode: LossMode, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            resolution: 16,
            ..TrainConfig::toy(mode, 3)
        }
    }

    fn loss_embedder() -> EmbedderHandle {
        EmbedderHandle::init(EmbedderRole::Loss, EmbedderConfig { resolution: 16, channels: 4, dim: 8, seed: 1 }).unwrap()
    }

    #[test]
    fn one_step_history_and_inactive_terms() {
        let s = setup();
        let r = fine_tune_data(&s.params, &s.manifest, &s.data, &cfg(LossMode::Baseline, 1), &TokenRegistry::default(), None)
            .unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.history[0].biometric, 0.0);
        assert_eq!(r.history[0].contrastive, 0.0);
        assert!(r.history[0].total > 0.0);
    }

    #[test]
    fn freeze_map_per_mode() {
        let s = setup();
        let e = loss_embedder();
        for mode in LossMode::ALL {
            let r = fine_tune_data(&s.params, &s.manifest, &s.data, &cfg(mode, 3), &TokenRegistry::default(), Some(&e))
                .unwrap();
            for kind in SegmentKind::ALL {
                let same = s.params.snapshot(kind).unwrap() == r.params.snapshot(kind).unwrap();
                let should_change = trainable_segments(mode).contains(&kind);
                assert_eq!(same, !should_change, "{mode} {kind}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = setup();
        let reg = TokenRegistry::default();
        let a = fine_tune_data(&s.params, &s.manifest, &s.data, &cfg(LossMode::Contrastive, 3), &reg, None).unwrap();
        let b = fine_tune_data(&s.params, &s.manifest, &s.data, &cfg(LossMode::Contrastive, 3), &reg, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
    }

    #[test]
    fn baseline_ignores_auxiliary_weights() {
        let s = setup();
        let reg = TokenRegistry::default();
        let mut c = cfg(LossMode::Baseline, 3);
        let a = fine_tune_data(&s.params, &s.manifest, &s.data, &c, &reg, None).unwrap();
        c.weights.lambda_b = 7.0;
        c.weights.lambda_s = 3.0;
        let b = fine_tune_data(&s.params, &s.manifest, &s.data, &c, &reg, None).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn configuration_errors() {
        let s = setup();
        let reg = TokenRegistry::default();
        let run = |c: &TrainConfig, e: Option<&EmbedderHandle>| fine_tune_data(&s.params, &s.manifest, &s.data, c, &reg, e);
        assert!(matches!(
            run(&cfg(LossMode::Biometric, 1), None),
            Err(Error::MissingComponent { component: "embedder", .. })
        ));
        let mut c = cfg(LossMode::Baseline, 1);
        c.token = "zzz".into();
        assert!(matches!(run(&c, None), Err(Error::UnknownToken(_))));
        let mut c = cfg(LossMode::Contrastive, 1);
        c.batch_size = 5;
        assert!(matches!(run(&c, None), Err(Error::InvalidConfig(_))));
        let mut c = cfg(LossMode::Baseline, 0);
        c.steps = 0;
        assert!(matches!(run(&c, None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let s = setup();
        let mut c = cfg(LossMode::Baseline, 5);
        c.learning_rate = 1e200;
        let r = fine_tune_data(&s.params, &s.manifest, &s.data, &c, &TokenRegistry::default(), None);
        assert!(matches!(r, Err(Error::Divergence { step }) if step >= 1), "{r:?}");
    }

    #[test]
    fn autoencoder_warmup_reduces_round_trip_error() {
        let s = setup();
        let mut p = s.params.deep_clone().unwrap();
        let imgs: Vec<ImageTensor> = s.data.all_images().cloned().collect();
        let before = crate::model::reconstruction_mse(&p, &imgs).unwrap();
        pretrain_autoencoder(&mut p, &imgs, 30, 2e-3, 8, 0).unwrap();
        let after = crate::model::reconstruction_mse(&p, &imgs).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(!p.is_trainable(SegmentKind::VaeEncoder));
        assert!(p.is_trainable(SegmentKind::Denoiser));
    }

    #[test]
    fn loss_csv_layout() {
        let b = LossBreakdown { reconstruction: 1.0, prior: 0.5, total: 1.5, ..Default::default() };
        let text = String::from_utf8(loss_csv(&[b]).unwrap()).unwrap();
        assert_eq!(text, "step,reconstruction,prior,biometric,contrastive,total\n0,1,0.5,0,0,1.5\n");
    }
}
