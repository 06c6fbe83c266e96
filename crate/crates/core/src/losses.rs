//! Training objective terms: latent reconstruction, class prior preservation,
//! biometric L1 identity distance and the NT-Xent contrastive loss, plus the
//! mode-dependent weighted combination.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::biometrics::EmbedderHandle;
use crate::error::{Error, Result};
use crate::nn::l2_normalize;
use crate::tensor::{device, ImageTensor, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Reconstruction plus prior preservation.
    Baseline,
    /// Baseline plus the biometric identity term; the autoencoder trains too.
    Biometric,
    /// Baseline plus the contrastive latent term.
    Contrastive,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Baseline, LossMode::Biometric, LossMode::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::Biometric => "biometric",
            LossMode::Contrastive => "contrastive",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown loss mode `{s}` (expected baseline, biometric or contrastive)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_prior: f64,
    pub lambda_b: f64,
    pub lambda_s: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_prior: 1.0,
            lambda_b: 0.1,
            lambda_s: 0.1,
            temperature: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_prior", self.lambda_prior),
            ("lambda_b", self.lambda_b),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Coefficients of (reconstruction, prior, biometric, contrastive) in the
    /// total for `mode`; inactive terms get 0.
    pub fn coefficients(&self, mode: LossMode) -> [f64; 4] {
        match mode {
            LossMode::Baseline => [1.0, self.lambda_prior, 0.0, 0.0],
            LossMode::Biometric => [1.0, self.lambda_prior, self.lambda_b, 0.0],
            LossMode::Contrastive => [1.0, self.lambda_prior, 0.0, self.lambda_s],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub prior: f64,
    pub biometric: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.reconstruction, self.prior, self.biometric, self.contrastive, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss term values for one step. Terms not used by the mode may be absent.
#[derive(Debug, Clone)]
pub struct LossComponents<T> {
    pub reconstruction: Option<T>,
    pub prior: Option<T>,
    pub biometric: Option<T>,
    pub contrastive: Option<T>,
}

impl<T> Default for LossComponents<T> {
    fn default() -> Self {
        Self {
            reconstruction: None,
            prior: None,
            biometric: None,
            contrastive: None,
        }
    }
}

fn require<'a, T>(mode: LossMode, component: &'static str, v: &'a Option<T>) -> Result<&'a T> {
    v.as_ref().ok_or(Error::MissingComponent {
        mode: mode.name(),
        component,
    })
}

/// Weighted total of the terms active in `mode`. Inactive terms are reported
/// as exactly 0 even when supplied.
pub fn combined_loss(
    mode: LossMode,
    components: &LossComponents<f64>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let rec = *require(mode, "reconstruction", &components.reconstruction)?;
    let prior = *require(mode, "prior", &components.prior)?;
    let biometric = match mode {
        LossMode::Biometric => *require(mode, "biometric", &components.biometric)?,
        _ => 0.0,
    };
    let contrastive = match mode {
        LossMode::Contrastive => *require(mode, "contrastive", &components.contrastive)?,
        _ => 0.0,
    };
    let [a, b, c, d] = weights.coefficients(mode);
    Ok(LossBreakdown {
        reconstruction: rec,
        prior,
        biometric,
        contrastive,
        total: a * rec + b * prior + c * biometric + d * contrastive,
    })
}

/// Graph version of [`combined_loss`]: returns the differentiable total and
/// the scalar breakdown.
pub fn combined_loss_tensor(
    mode: LossMode,
    components: &LossComponents<Tensor>,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let scalar = |t: &Option<Tensor>| -> Result<Option<f64>> {
        t.as_ref().map(|t| Ok(t.to_scalar::<f64>()?)).transpose()
    };
    let values = LossComponents {
        reconstruction: scalar(&components.reconstruction)?,
        prior: scalar(&components.prior)?,
        biometric: scalar(&components.biometric)?,
        contrastive: scalar(&components.contrastive)?,
    };
    let breakdown = combined_loss(mode, &values, weights)?;
    let coeffs = weights.coefficients(mode);
    let terms = [
        &components.reconstruction,
        &components.prior,
        &components.biometric,
        &components.contrastive,
    ];
    let mut total: Option<Tensor> = None;
    for (coef, term) in coeffs.iter().zip(terms) {
        if *coef == 0.0 {
            continue;
        }
        if let Some(t) = term {
            let scaled = (t * *coef)?;
            total = Some(match total {
                Some(acc) => (acc + scaled)?,
                None => scaled,
            });
        }
    }
    let total = total.expect("reconstruction is always active");
    Ok((total, breakdown))
}

/// `mean_i w_i * mean((target_i - estimate_i)^2)` over a batch laid out on
/// the first dimension.
pub fn weighted_squared_error(target: &Tensor, estimate: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if target.dims() != estimate.dims() {
        return Err(Error::Shape(format!(
            "target {:?} and estimate {:?} differ",
            target.dims(),
            estimate.dims()
        )));
    }
    let b = target.dims().first().copied().unwrap_or(0);
    if b == 0 || weights.len() != b {
        return Err(Error::Shape(format!(
            "{} weights for a batch of {b}",
            weights.len()
        )));
    }
    let per_example = (target - estimate)?.sqr()?.flatten_from(1)?.mean(1)?;
    let w = Tensor::from_vec(weights.to_vec(), b, &device())?;
    Ok((per_example * w)?.mean_all()?)
}

fn single_squared_error(a: &LatentTensor, b: &LatentTensor, weight: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let t = weighted_squared_error(
        &a.tensor().unsqueeze(0)?,
        &b.tensor().unsqueeze(0)?,
        &[weight],
    )?;
    Ok(t.to_scalar::<f64>()?)
}

/// `w_t * mean((z0 - z0_hat)^2)` for the target subject's examples.
pub fn reconstruction_term(z0: &LatentTensor, z0_hat: &LatentTensor, w_t: f64) -> Result<f64> {
    single_squared_error(z0, z0_hat, w_t)
}

/// Same squared-error form as [`reconstruction_term`], applied to a
/// regularization latent and its class-conditioned denoised estimate at an
/// independently drawn timestep.
pub fn prior_term(x_prior: &LatentTensor, x_prior_hat: &LatentTensor, w_t_prime: f64) -> Result<f64> {
    single_squared_error(x_prior, x_prior_hat, w_t_prime)
}

/// Mean over the batch of the L1 distance between paired embedding rows.
pub fn biometric_distance(generated: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if generated.dims() != truth.dims() || generated.rank() != 2 {
        return Err(Error::Shape(format!(
            "embedding batches {:?} and {:?} differ",
            generated.dims(),
            truth.dims()
        )));
    }
    Ok((generated - truth)?.abs()?.sum(1)?.mean_all()?)
}

/// `||E(generated) - E(truth)||_1` with the loss-role embedder `E`.
pub fn biometric_term(embedder: &EmbedderHandle, generated: &ImageTensor, truth: &ImageTensor) -> Result<f64> {
    let a = embedder.embed(generated)?;
    let b = embedder.embed(truth)?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding lengths {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum())
}

/// NT-Xent over `2N` views where row `i` of `first` and row `i` of `second`
/// are the positive pair and every other view in the batch is a negative.
/// Rows are flattened and L2-normalized; the loss is the mean over all `2N`
/// anchors of `-log softmax` of the positive among the anchor's `2N - 1`
/// candidates.
pub fn nt_xent(first: &Tensor, second: &Tensor, temperature: f64) -> Result<Tensor> {
    if first.dims() != second.dims() {
        return Err(Error::Shape(format!(
            "view batches {:?} and {:?} differ",
            first.dims(),
            second.dims()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let n = first.dims().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::InsufficientBatch(format!(
            "NT-Xent needs at least 2 pairs for negatives, got {n}"
        )));
    }
    let views = Tensor::cat(&[first.flatten_from(1)?, second.flatten_from(1)?], 0)?;
    let views = l2_normalize(&views)?;
    let m = 2 * n;
    let logits = (views.matmul(&views.t()?)? / temperature)?;

    let mut off_diag = vec![1.0f64; m * m];
    let mut positive = vec![0.0f64; m * m];
    for i in 0..m {
        off_diag[i * m + i] = 0.0;
        positive[i * m + (i + n) % m] = 1.0;
    }
    let off_diag = Tensor::from_vec(off_diag, (m, m), &device())?;
    let positive = Tensor::from_vec(positive, (m, m), &device())?;

    // Logits are bounded above by 1/temperature; shifting by it keeps exp finite.
    let shift = 1.0 / temperature;
    let denom = ((logits.clone() - shift)?.exp()? * off_diag)?.sum(1)?;
    let log_denom = (denom.log()? + shift)?;
    let pos = (logits * positive)?.sum(1)?;
    Ok((log_denom - pos)?.mean_all()?)
}

/// Scalar NT-Xent on lists of latent views.
pub fn nt_xent_views(first: &[LatentTensor], second: &[LatentTensor], temperature: f64) -> Result<f64> {
    if first.len() != second.len() {
        return Err(Error::Shape(format!(
            "{} views vs {} views",
            first.len(),
            second.len()
        )));
    }
    if first.len() < 2 {
        return Err(Error::InsufficientBatch(format!(
            "NT-Xent needs at least 2 pairs for negatives, got {}",
            first.len()
        )));
    }
    let stack = |v: &[LatentTensor]| -> Result<Tensor> {
        let ts: Vec<&Tensor> = v.iter().map(|l| l.tensor()).collect();
        Ok(Tensor::stack(&ts, 0)?)
    };
    Ok(nt_xent(&stack(first)?, &stack(second)?, temperature)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(v: Vec<f64>) -> LatentTensor {
        let n = v.len();
        LatentTensor::from_vec(v, (1, 1, n)).unwrap()
    }

    fn rows(data: Vec<f64>, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(data, (n, d), &device()).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let a = lat(vec![1.0, 1.0]);
        let b = lat(vec![0.0, 2.0]);
        assert_eq!(reconstruction_term(&a, &a, 1.0).unwrap(), 0.0);
        assert!((reconstruction_term(&a, &b, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((reconstruction_term(&a, &b, 2.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            reconstruction_term(&a, &lat(vec![1.0]), 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn prior_term_is_symmetric() {
        let a = lat(vec![0.3, -1.2, 4.0]);
        let b = lat(vec![1.3, 0.2, -0.5]);
        assert_eq!(prior_term(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(prior_term(&a, &b, 0.7).unwrap(), prior_term(&b, &a, 0.7).unwrap());
    }

    #[test]
    fn biometric_distance_hand_value() {
        let a = rows(vec![0.1, 0.2], 1, 2);
        let b = rows(vec![0.3, -0.1], 1, 2);
        let d = biometric_distance(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let d2 = biometric_distance(&b, &a).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn nt_xent_identical_orthogonal_pairs() {
        let e = rows(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3);
        let l = nt_xent(&e, &e, 0.5).unwrap().to_scalar::<f64>().unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn nt_xent_all_orthogonal_is_ln3() {
        let a = rows(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2, 4);
        let b = rows(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 2, 4);
        let l = nt_xent(&a, &b, 0.5).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_scale_invariant() {
        let a = rows(vec![0.3, -1.0, 2.0, 0.5, 0.1, 0.9], 2, 3);
        let b = rows(vec![1.3, 0.4, -2.0, 0.2, 0.8, 0.1], 2, 3);
        let l1 = nt_xent(&a, &b, 0.5).unwrap().to_scalar::<f64>().unwrap();
        let l5 = nt_xent(&(&a * 5.0).unwrap(), &(&b * 5.0).unwrap(), 0.5)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l1 - l5).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_decreases_as_positives_align() {
        // Negatives fixed; second view of pair 0 rotates toward the first.
        let a = rows(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 2, 3);
        let loss_at = |theta: f64| {
            let b = rows(vec![theta.cos(), theta.sin(), 0.0, 0.0, 0.0, 1.0], 2, 3);
            nt_xent(&a, &b, 0.5).unwrap().to_scalar::<f64>().unwrap()
        };
        assert!(loss_at(0.2) < loss_at(0.8));
        assert!(loss_at(0.8) < loss_at(1.4));
    }

    #[test]
    fn nt_xent_needs_two_pairs() {
        let a = rows(vec![1.0, 0.0], 1, 2);
        assert!(matches!(nt_xent(&a, &a, 0.5), Err(Error::InsufficientBatch(_))));
    }

    #[test]
    fn combined_loss_examples() {
        let w = LossWeights::default();
        let comps = LossComponents {
            reconstruction: Some(1.0),
            prior: Some(0.5),
            biometric: Some(0.3),
            contrastive: Some(0.2),
        };
        let b = combined_loss(LossMode::Baseline, &comps, &w).unwrap();
        assert_eq!((b.total, b.biometric, b.contrastive), (1.5, 0.0, 0.0));
        let c = combined_loss(LossMode::Contrastive, &comps, &w).unwrap();
        assert!((c.total - 1.52).abs() < 1e-12);
        assert_eq!(c.biometric, 0.0);
        let m = combined_loss(LossMode::Biometric, &comps, &w).unwrap();
        assert!((m.total - 1.53).abs() < 1e-12);
        assert_eq!(m.contrastive, 0.0);
    }

    #[test]
    fn combined_loss_missing_component() {
        let comps = LossComponents {
            reconstruction: Some(1.0),
            prior: Some(0.5),
            ..Default::default()
        };
        let r = combined_loss(LossMode::Biometric, &comps, &LossWeights::default());
        assert!(matches!(r, Err(Error::MissingComponent { component: "biometric", .. })));
    }

    #[test]
    fn zero_lambdas_reduce_to_baseline() {
        let w = LossWeights {
            lambda_b: 0.0,
            lambda_s: 0.0,
            ..Default::default()
        };
        let comps = LossComponents {
            reconstruction: Some(0.7),
            prior: Some(0.4),
            biometric: Some(9.0),
            contrastive: Some(3.0),
        };
        let base = combined_loss(LossMode::Baseline, &comps, &w).unwrap().total;
        for mode in [LossMode::Biometric, LossMode::Contrastive] {
            assert_eq!(combined_loss(mode, &comps, &w).unwrap().total, base);
        }
    }

    #[test]
    fn weights_validation() {
        let bad = LossWeights {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = LossWeights {
            lambda_b: -0.1,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }
}
