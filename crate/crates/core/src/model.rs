//! The toy latent diffusion stack: deterministic convolutional autoencoder,
//! FiLM-conditioned noise predictor and a frozen lookup text embedder.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_archive, load_archive, save_archive};
use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, ParamSet};
use crate::prompts::{AgeGroup, TokenRegistry, DEFAULT_CLASS_LABEL};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::{device, ConditionVector, ImageTensor, LatentTensor, IMAGE_CHANNELS};

const MANIFEST_FORMAT: &str = "agedit-model/1";
const TEMPLATE_WORDS: [&str; 5] = ["photo", "of", "a", "as", DEFAULT_CLASS_LABEL];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    VaeEncoder,
    VaeDecoder,
    Denoiser,
    TextEmbedder,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::VaeEncoder,
        SegmentKind::VaeDecoder,
        SegmentKind::Denoiser,
        SegmentKind::TextEmbedder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::VaeEncoder => "vae_encoder",
            SegmentKind::VaeDecoder => "vae_decoder",
            SegmentKind::Denoiser => "denoiser",
            SegmentKind::TextEmbedder => "text_embedder",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Spatial downsample factor of the autoencoder; a power of two.
    pub downsample: usize,
    pub latent_channels: usize,
    pub cond_dim: usize,
    pub vae_channels: usize,
    pub denoiser_channels: usize,
    pub denoiser_blocks: usize,
    /// Hidden width of a fully connected path over the whole latent that runs
    /// beside the convolutional blocks; 0 disables it.
    #[serde(default)]
    pub denoiser_global: usize,
    pub time_dim: usize,
    pub schedule: ScheduleConfig,
    /// Multiplier applied to encoder outputs so latents have roughly unit
    /// variance; the decoder divides it back out.
    pub latent_scale: f64,
    pub vocabulary: Vec<String>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(&TokenRegistry::default(), &[DEFAULT_CLASS_LABEL])
    }
}

impl ModelConfig {
    /// Desk-scale defaults with a vocabulary covering the prompt template,
    /// the six captions, the given class labels and every registered token.
    pub fn new(registry: &TokenRegistry, class_labels: &[&str]) -> Self {
        let mut vocabulary: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        vocabulary.extend(AgeGroup::ALL.iter().map(|g| g.word().to_string()));
        for label in class_labels {
            for w in label.split_whitespace() {
                if !vocabulary.iter().any(|v| v == w) {
                    vocabulary.push(w.to_string());
                }
            }
        }
        for t in registry.tokens() {
            if !vocabulary.iter().any(|v| v == t) {
                vocabulary.push(t.to_string());
            }
        }
        Self {
            resolution: 32,
            downsample: 4,
            latent_channels: 4,
            cond_dim: 32,
            vae_channels: 16,
            denoiser_channels: 32,
            denoiser_blocks: 3,
            denoiser_global: 256,
            time_dim: 16,
            schedule: ScheduleConfig::default(),
            latent_scale: 1.0,
            vocabulary,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::InvalidConfig(format!(
                "downsample factor {} is not a power of two >= 2",
                self.downsample
            )));
        }
        if self.resolution == 0 || self.resolution % self.downsample != 0 {
            return Err(Error::InvalidConfig(format!(
                "resolution {} is not divisible by downsample factor {}",
                self.resolution, self.downsample
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::InvalidConfig("time_dim must be a positive even number".into()));
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("cond_dim", self.cond_dim),
            ("vae_channels", self.vae_channels),
            ("denoiser_channels", self.denoiser_channels),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::InvalidConfig("latent_scale must be positive".into()));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::InvalidConfig("vocabulary is empty".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.resolution / self.downsample
    }

    fn down_levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
struct Segment {
    params: ParamSet,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentManifest {
    trainable: bool,
    shapes: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    config: ModelConfig,
    captions: Vec<String>,
    segments: BTreeMap<String, SegmentManifest>,
}

/// All parameters of the latent diffusion stack, split into four segments
/// with independent trainable flags.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    schedule: NoiseSchedule,
    segments: BTreeMap<SegmentKind, Segment>,
}

impl ModelParams {
    /// Random initialization, deterministic in `config.seed`. Every segment
    /// starts frozen except the denoiser.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.vae_channels;
        let c2 = 2 * c;
        let lc = config.latent_channels;
        let levels = config.down_levels();

        // The autoencoder works at half resolution after a space-to-depth
        // rearrangement of the pixels, so no convolution runs at full size.
        let mut enc = ParamSet::new();
        enc.add_conv("in", 4 * IMAGE_CHANNELS, c, 3, 1.0, &mut rng)?;
        for i in 0..levels - 1 {
            let cin = if i == 0 { c } else { c2 };
            enc.add_conv(&format!("down{i}"), cin, c2, 3, 1.0, &mut rng)?;
        }
        let last = if levels == 1 { c } else { c2 };
        enc.add_conv("out", last, lc, 1, 0.5, &mut rng)?;

        let mut dec = ParamSet::new();
        dec.add_conv("in", lc, c2, 1, 1.0, &mut rng)?;
        for i in 0..levels - 1 {
            dec.add_conv(&format!("up{i}"), c2, c2, 3, 1.0, &mut rng)?;
        }
        dec.add_conv("out", c2, 4 * IMAGE_CHANNELS, 3, 0.5, &mut rng)?;

        let dc = config.denoiser_channels;
        let nb = config.denoiser_blocks;
        let mut den = ParamSet::new();
        den.add_linear("cond0", config.time_dim + config.cond_dim, 4 * dc, 1.0, &mut rng)?;
        den.add_linear("cond1", 4 * dc, 2 * dc * nb.max(1), 0.5, &mut rng)?;
        den.add_conv("in", lc, dc, 3, 1.0, &mut rng)?;
        for i in 0..nb {
            den.add_conv(&format!("block{i}"), dc, dc, 3, 0.5, &mut rng)?;
        }
        den.add_conv("out", dc, lc, 3, 0.3, &mut rng)?;
        if config.denoiser_global > 0 {
            let flat = lc * config.latent_size() * config.latent_size();
            den.add_linear("global0", flat + 4 * dc, config.denoiser_global, 1.0, &mut rng)?;
            den.add_linear("global1", config.denoiser_global, flat, 0.3, &mut rng)?;
        }

        let mut txt = ParamSet::new();
        txt.add_normal("table", &[config.vocabulary.len(), config.cond_dim], 1.0, &mut rng)?;

        let mut segments = BTreeMap::new();
        segments.insert(SegmentKind::VaeEncoder, Segment { params: enc, trainable: false });
        segments.insert(SegmentKind::VaeDecoder, Segment { params: dec, trainable: false });
        segments.insert(SegmentKind::Denoiser, Segment { params: den, trainable: true });
        segments.insert(SegmentKind::TextEmbedder, Segment { params: txt, trainable: false });
        Ok(Self {
            config,
            schedule,
            segments,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample
    }

    pub(crate) fn set_latent_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("latent scale {scale} must be positive")));
        }
        self.config.latent_scale = scale;
        Ok(())
    }

    fn segment(&self, kind: SegmentKind) -> &Segment {
        &self.segments[&kind]
    }

    pub fn segment_params(&self, kind: SegmentKind) -> &ParamSet {
        &self.segment(kind).params
    }

    pub fn is_trainable(&self, kind: SegmentKind) -> bool {
        self.segment(kind).trainable
    }

    /// The text embedder stays frozen no matter what is requested.
    pub fn set_trainable(&mut self, kind: SegmentKind, trainable: bool) {
        let flag = trainable && kind != SegmentKind::TextEmbedder;
        if let Some(s) = self.segments.get_mut(&kind) {
            s.trainable = flag;
        }
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.segments
            .values()
            .filter(|s| s.trainable)
            .flat_map(|s| s.params.vars())
            .collect()
    }

    /// Exact bit-level snapshot of one segment.
    pub fn snapshot(&self, kind: SegmentKind) -> Result<Vec<u64>> {
        self.segment(kind).params.snapshot()
    }

    /// Copy whose parameters share no storage with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut segments = BTreeMap::new();
        for (k, s) in &self.segments {
            segments.insert(
                *k,
                Segment {
                    params: s.params.deep_clone()?,
                    trainable: s.trainable,
                },
            );
        }
        Ok(Self {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            segments,
        })
    }

    fn p(&self, kind: SegmentKind, name: &str) -> Result<Tensor> {
        let s = self.segment(kind);
        s.params.get(name, s.trainable)
    }

    fn conv(&self, kind: SegmentKind, name: &str, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        conv2d(
            x,
            &self.p(kind, &format!("{name}.w"))?,
            &self.p(kind, &format!("{name}.b"))?,
            stride,
            padding,
        )
    }

    /// Batched encoder over `(B, 3, H, W)`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let k = self.config.downsample;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("expected (B, 3, H, W), got {dims:?}")));
        }
        if dims[2] % k != 0 || dims[3] % k != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by downsample factor {k}",
                dims[2], dims[3]
            )));
        }
        let kind = SegmentKind::VaeEncoder;
        let x = ((images * 2.0)? - 1.0)?;
        let mut h = self.conv(kind, "in", &space_to_depth(&x)?, 1, 1)?.silu()?;
        for i in 0..self.config.down_levels() - 1 {
            h = self.conv(kind, &format!("down{i}"), &h, 2, 1)?.silu()?;
        }
        let z = self.conv(kind, "out", &h, 1, 0)?;
        Ok((z * self.config.latent_scale)?)
    }

    /// Batched decoder over `(B, C, h, w)`; outputs lie in (0, 1).
    pub fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let dims = latents.dims();
        let n = self.config.latent_size();
        if dims.len() != 4 || dims[1] != self.config.latent_channels || dims[2] != n || dims[3] != n {
            return Err(Error::Shape(format!(
                "expected (B, {}, {n}, {n}) latents, got {dims:?}",
                self.config.latent_channels
            )));
        }
        let kind = SegmentKind::VaeDecoder;
        let z = (latents / self.config.latent_scale)?;
        let mut h = self.conv(kind, "in", &z, 1, 0)?.silu()?;
        for i in 0..self.config.down_levels() - 1 {
            let (hh, ww) = (h.dims()[2], h.dims()[3]);
            h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            h = self.conv(kind, &format!("up{i}"), &h, 1, 1)?.silu()?;
        }
        let out = depth_to_space(&self.conv(kind, "out", &h, 1, 1)?)?;
        Ok(candle_nn::ops::sigmoid(&out)?)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LatentTensor> {
        let z = self.encode_batch(&img.tensor().unsqueeze(0)?)?;
        LatentTensor::new(z.squeeze(0)?)
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let x = self.decode_batch(&z.tensor().unsqueeze(0)?)?.squeeze(0)?;
        ImageTensor::new(x.clamp(0.0, 1.0)?)
    }

    fn token_ids(&self, prompt: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = prompt
            .split_whitespace()
            .map(|w| {
                self.config
                    .vocabulary
                    .iter()
                    .position(|v| v == w)
                    .map(|i| i as u32)
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::InvalidConfig("prompt is empty".into()));
        }
        Ok(ids)
    }

    /// Sum of token embeddings scaled by `1/sqrt(n)`. Always frozen.
    pub fn embed_prompt(&self, prompt: &str) -> Result<ConditionVector> {
        let ids = self.token_ids(prompt)?;
        let n = ids.len();
        let table = self
            .segment(SegmentKind::TextEmbedder)
            .params
            .get("table", false)?;
        let idx = Tensor::from_vec(ids, n, &device())?;
        let rows = table.index_select(&idx, 0)?;
        let pooled = (rows.sum(0)? / (n as f64).sqrt())?;
        ConditionVector::new(pooled)
    }

    fn time_features(&self, ts: &[usize]) -> Result<Tensor> {
        let half = self.config.time_dim / 2;
        let steps = self.schedule.steps() as f64;
        let mut data = Vec::with_capacity(ts.len() * self.config.time_dim);
        for &t in ts {
            let pos = 1000.0 * t as f64 / steps;
            let freqs: Vec<f64> = (0..half)
                .map(|k| pos * (-(10000f64.ln()) * k as f64 / half as f64).exp())
                .collect();
            data.extend(freqs.iter().map(|a| a.sin()));
            data.extend(freqs.iter().map(|a| a.cos()));
        }
        Ok(Tensor::from_vec(data, (ts.len(), self.config.time_dim), &device())?)
    }

    /// Batched noise prediction. The network output `v` is mapped to a noise
    /// estimate through `eps = sigma_t * z_t + alpha_t * v`, which keeps the
    /// implied clean estimate `alpha_t * z_t - sigma_t * v` bounded at every t.
    pub fn predict_noise_batch(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let dims = z_t.dims();
        let b = dims.first().copied().unwrap_or(0);
        if dims.len() != 4 || dims[1] != self.config.latent_channels || ts.len() != b {
            return Err(Error::Shape(format!(
                "expected (B, {}, h, w) latents with B timesteps, got {dims:?} and {} timesteps",
                self.config.latent_channels,
                ts.len()
            )));
        }
        if cond.dims() != [b, self.config.cond_dim] {
            return Err(Error::Shape(format!(
                "expected conditioning ({b}, {}), got {:?}",
                self.config.cond_dim,
                cond.dims()
            )));
        }
        let kind = SegmentKind::Denoiser;
        let dc = self.config.denoiser_channels;
        let temb = self.time_features(ts)?;
        let ctx = Tensor::cat(&[&temb, cond], 1)?;
        let ctx = linear(&ctx, &self.p(kind, "cond0.w")?, &self.p(kind, "cond0.b")?)?.silu()?;
        let film = linear(&ctx, &self.p(kind, "cond1.w")?, &self.p(kind, "cond1.b")?)?;

        let mut h = self.conv(kind, "in", z_t, 1, 1)?;
        for i in 0..self.config.denoiser_blocks {
            let gamma = film.narrow(1, 2 * i * dc, dc)?.reshape((b, dc, 1, 1))?;
            let beta = film.narrow(1, (2 * i + 1) * dc, dc)?.reshape((b, dc, 1, 1))?;
            let r = h.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(&beta)?.silu()?;
            let r = self.conv(kind, &format!("block{i}"), &r, 1, 1)?;
            h = (h + r)?;
        }
        let mut v = self.conv(kind, "out", &h.silu()?, 1, 1)?;
        if self.config.denoiser_global > 0 {
            let g = Tensor::cat(&[&z_t.flatten_from(1)?, &ctx], 1)?;
            let g = linear(&g, &self.p(kind, "global0.w")?, &self.p(kind, "global0.b")?)?.silu()?;
            let g = linear(&g, &self.p(kind, "global1.w")?, &self.p(kind, "global1.b")?)?;
            v = (v + g.reshape(z_t.dims())?)?;
        }
        let (alpha, sigma) = self.schedule.coefficient_tensors(ts)?;
        Ok((z_t.broadcast_mul(&sigma)? + v.broadcast_mul(&alpha)?)?)
    }

    pub fn predict_noise(&self, z_t: &LatentTensor, t: usize, c: &ConditionVector) -> Result<LatentTensor> {
        self.schedule.check_timestep(t)?;
        let eps = self.predict_noise_batch(
            &z_t.tensor().unsqueeze(0)?,
            &[t],
            &c.tensor().unsqueeze(0)?,
        )?;
        LatentTensor::new(eps.squeeze(0)?)
    }

    /// Stacks `n` copies of a condition vector into `(n, m)`.
    pub fn repeat_condition(c: &ConditionVector, n: usize) -> Result<Tensor> {
        Ok(c.tensor().unsqueeze(0)?.repeat((n, 1))?)
    }

    fn all_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (kind, seg) in &self.segments {
            for (name, t) in seg.params.to_tensors() {
                out.insert(format!("{}/{name}", kind.name()), t);
            }
        }
        out
    }

    fn manifest(&self) -> ModelManifest {
        ModelManifest {
            format: MANIFEST_FORMAT.to_string(),
            config: self.config.clone(),
            captions: AgeGroup::ALL.iter().map(|g| g.word().to_string()).collect(),
            segments: self
                .segments
                .iter()
                .map(|(k, s)| {
                    (
                        k.name().to_string(),
                        SegmentManifest {
                            trainable: s.trainable,
                            shapes: s.params.shapes(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_archive(&self.all_tensors(), &self.manifest())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_archive(path, &self.all_tensors(), &self.manifest())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, manifest): (_, ModelManifest) = load_archive(path)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported model format `{}`",
                manifest.format
            )));
        }
        let mut model = Self::init(manifest.config)?;
        for (name, seg_manifest) in &manifest.segments {
            let kind = SegmentKind::from_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown segment `{name}`")))?;
            let prefix = format!("{name}/");
            let subset: BTreeMap<String, Tensor> = tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
                .collect();
            let seg = model
                .segments
                .get_mut(&kind)
                .ok_or_else(|| Error::Checkpoint(format!("missing segment `{name}`")))?;
            seg.params.load_from(&subset)?;
            seg.trainable = seg_manifest.trainable && kind != SegmentKind::TextEmbedder;
        }
        Ok(model)
    }
}

/// `(B, C, H, W)` to `(B, 4C, H/2, W/2)`.
fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape(vec![b, c, h / 2, 2, w / 2, 2])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .reshape((b, 4 * c, h / 2, w / 2))?)
}

/// Inverse of [`space_to_depth`].
fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape(vec![b, c, 2, 2, h, w])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// `(z_t - sigma[t] * eps_hat) / alpha[t]`.
pub fn estimate_clean(
    z_t: &LatentTensor,
    t: usize,
    eps_hat: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::Shape(format!(
            "z_t {:?} and eps_hat {:?} differ",
            z_t.dims(),
            eps_hat.dims()
        )));
    }
    let z = estimate_clean_batch(
        &z_t.tensor().unsqueeze(0)?,
        &[t],
        &eps_hat.tensor().unsqueeze(0)?,
        schedule,
    )?;
    LatentTensor::new(z.squeeze(0)?)
}

/// Batched form of [`estimate_clean`] with one timestep per example.
pub fn estimate_clean_batch(
    z_t: &Tensor,
    ts: &[usize],
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    for &t in ts {
        schedule.check_timestep(t)?;
        if schedule.alpha(t) == 0.0 {
            return Err(Error::Singularity { t });
        }
    }
    let (alpha, sigma) = schedule.coefficient_tensors(ts)?;
    Ok((z_t - eps_hat.broadcast_mul(&sigma)?)?.broadcast_div(&alpha)?)
}

/// Mean squared round-trip error of the autoencoder on a set of images.
pub fn reconstruction_mse(params: &ModelParams, images: &[ImageTensor]) -> Result<f64> {
    let x = crate::tensor::stack_images(images)?;
    let y = params.decode_batch(&params.encode_batch(&x)?)?;
    Ok((y - x)?.sqr()?.mean_all()?.to_scalar::<f64>()?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            resolution: 8,
            vae_channels: 2,
            denoiser_channels: 4,
            denoiser_blocks: 1,
            denoiser_global: 8,
            cond_dim: 4,
            time_dim: 4,
            schedule: ScheduleConfig { steps: 50, family: ScheduleFamily::Cosine },
            ..Default::default()
        }
    }

    fn random_image(res: usize, seed: u64) -> ImageTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_chw((0..3 * res * res).map(|_| r.random()).collect(), res, res).unwrap()
    }

    fn random_latent(shape: (usize, usize, usize), seed: u64) -> LatentTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        LatentTensor::from_vec((0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(), shape).unwrap()
    }

    #[test]
    fn encode_decode_shapes() {
        let p = ModelParams::init(ModelConfig::default()).unwrap();
        let x = random_image(32, 0);
        let z = p.encode(&x).unwrap();
        assert_eq!(z.dims(), (4, 8, 8));
        assert_eq!(z.to_vec().unwrap(), p.encode(&x).unwrap().to_vec().unwrap());
        let y = p.decode(&z).unwrap();
        assert_eq!((y.height(), y.width()), (32, 32));
        let odd = ImageTensor::from_chw(vec![0.5; 3 * 33 * 32], 33, 32).unwrap();
        assert!(matches!(p.encode(&odd), Err(Error::Shape(_))));
        assert!(matches!(p.decode(&LatentTensor::full(0.0, (4, 7, 8)).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(tiny()).unwrap();
        let b = ModelParams::init(tiny()).unwrap();
        let c = ModelParams::init(ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn prompt_embedding() {
        let p = ModelParams::init(ModelConfig::default()).unwrap();
        let a = p.embed_prompt("photo of a sks person as child").unwrap().to_vec().unwrap();
        assert_eq!(a, p.embed_prompt("photo of a sks person as child").unwrap().to_vec().unwrap());
        let b = p.embed_prompt("photo of a sks person as old").unwrap().to_vec().unwrap();
        assert_ne!(a, b);
        assert!(matches!(p.embed_prompt("photo of a qqq person"), Err(Error::UnknownToken(t)) if t == "qqq"));
    }

    #[test]
    fn text_embedder_cannot_be_unfrozen() {
        let mut p = ModelParams::init(tiny()).unwrap();
        p.set_trainable(SegmentKind::TextEmbedder, true);
        assert!(!p.is_trainable(SegmentKind::TextEmbedder));
    }

    #[test]
    fn noise_prediction_depends_on_condition() {
        let p = ModelParams::init(ModelConfig::default()).unwrap();
        let z = random_latent((4, 8, 8), 1);
        let c1 = p.embed_prompt("photo of a sks person as child").unwrap();
        let c2 = p.embed_prompt("photo of a sks person as old").unwrap();
        let e1 = p.predict_noise(&z, 500, &c1).unwrap();
        assert_eq!(e1.dims(), z.dims());
        assert_eq!(e1.to_vec().unwrap(), p.predict_noise(&z, 500, &c1).unwrap().to_vec().unwrap());
        let e2 = p.predict_noise(&z, 500, &c2).unwrap();
        let diff: f64 = e1.to_vec().unwrap().iter().zip(e2.to_vec().unwrap()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
        assert!(matches!(p.predict_noise(&z, 1001, &c1), Err(Error::Range(_))));
    }

    #[test]
    fn estimate_clean_cases() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.8]).unwrap();
        let z = LatentTensor::full(1.1, (1, 1, 1)).unwrap();
        let e = LatentTensor::full(0.5, (1, 1, 1)).unwrap();
        let x = estimate_clean(&z, 1, &e, &s).unwrap().to_vec().unwrap()[0];
        assert!((x - 1.0).abs() < 1e-12);
        let s0 = NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.0]).unwrap();
        assert!(matches!(estimate_clean(&z, 2, &e, &s0), Err(Error::Singularity { t: 2 })));
        let sched = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        let z0 = random_latent((4, 8, 8), 2);
        let eta = random_latent((4, 8, 8), 3);
        let zt = sched.forward_diffuse(&z0, 700, &eta).unwrap();
        let back = estimate_clean(&zt, 700, &eta, &sched).unwrap().to_vec().unwrap();
        for (a, b) in back.iter().zip(z0.to_vec().unwrap()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Central finite differences of `sum(f(params) * r)` with respect to a
    /// handful of entries of one parameter.
    fn check_param_gradient(p: &ModelParams, kind: SegmentKind, name: &str, f: &dyn Fn(&ModelParams) -> Tensor) {
        let var = p.segment_params(kind).var(name).unwrap().clone();
        let out = f(p);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let weights: Vec<f64> = (0..out.elem_count()).map(|_| r.random::<f64>() - 0.5).collect();
        let wt = Tensor::from_vec(weights, out.dims(), &device()).unwrap();
        let objective = |p: &ModelParams| (f(p) * &wt).unwrap().sum_all().unwrap();
        let grads = objective(p).backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = var.as_tensor().dims().to_vec();
        let h = 1e-6;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for i in (0..base.len()).step_by((base.len() / 12).max(1)) {
            let mut v = base.clone();
            v[i] += h;
            var.set(&Tensor::from_vec(v.clone(), dims.as_slice(), &device()).unwrap()).unwrap();
            let plus = objective(p).to_scalar::<f64>().unwrap();
            v[i] -= 2.0 * h;
            var.set(&Tensor::from_vec(v, dims.as_slice(), &device()).unwrap()).unwrap();
            let minus = objective(p).to_scalar::<f64>().unwrap();
            num.push((plus - minus) / (2.0 * h));
            ana.push(analytic[i]);
        }
        var.set(&Tensor::from_vec(base, dims.as_slice(), &device()).unwrap()).unwrap();
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-3, "{name}: relative error {}", diff / scale);
    }

    #[test]
    fn decoder_and_denoiser_gradients() {
        let mut p = ModelParams::init(tiny()).unwrap();
        p.set_trainable(SegmentKind::VaeDecoder, true);
        let z = random_latent((4, 2, 2), 4).tensor().unsqueeze(0).unwrap();
        for name in ["in.w", "out.w", "up0.b"] {
            check_param_gradient(&p, SegmentKind::VaeDecoder, name, &|p| p.decode_batch(&z).unwrap());
        }
        let cond = p.embed_prompt("photo of a sks person").unwrap();
        let cond = ModelParams::repeat_condition(&cond, 2).unwrap();
        let zz = Tensor::cat(&[&z, &(&z * 0.5).unwrap()], 0).unwrap();
        for name in ["in.w", "block0.w", "cond1.w", "global0.w", "out.b"] {
            check_param_gradient(&p, SegmentKind::Denoiser, name, &|p| {
                p.predict_noise_batch(&zz, &[10, 40], &cond).unwrap()
            });
        }
    }

    #[test]
    fn frozen_segments_get_no_gradient() {
        let p = ModelParams::init(tiny()).unwrap();
        let z = random_latent((4, 2, 2), 4).tensor().unsqueeze(0).unwrap();
        let loss = p.decode_batch(&z).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let var = p.segment_params(SegmentKind::VaeDecoder).var("in.w").unwrap();
        assert!(grads.get(var.as_tensor()).is_none());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ModelParams::init(tiny()).unwrap();
        p.set_latent_scale(0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p.to_bytes().unwrap(), q.to_bytes().unwrap());
        assert_eq!(std::fs::read(&path).unwrap(), q.to_bytes().unwrap());
        for k in SegmentKind::ALL {
            assert_eq!(p.snapshot(k).unwrap(), q.snapshot(k).unwrap());
        }
        assert_eq!(q.config().latent_scale, 0.7);
    }
}
