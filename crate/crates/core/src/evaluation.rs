//! Verification metrics over score sets and the experiment comparisons built
//! from them.
//!
//! Operating points use the acceptance rule `score >= threshold`. FNMR at a
//! target FMR is read at the smallest threshold whose empirical FMR does not
//! exceed the target, without interpolation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biometrics::{
    match_score, score_cross_pairs, score_pairs, EmbedderHandle, EmbedderRole, EmbeddingVector, LabeledImage,
    ScoreSet,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::LossMode;

/// FMR targets used for paper-scale evaluations (0.01% and 0.1%).
pub const DEFAULT_FMR_TARGETS: [f64; 2] = [1e-4, 1e-3];
/// Targets used on the toy fixture, whose impostor sets are far too small to
/// resolve the defaults.
pub const TOY_FMR_TARGETS: [f64; 2] = [1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<OperatingPoint>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Rates at every distinct observed score plus a `+inf` sentinel that
/// rejects everything.
pub fn compute_det(s: &ScoreSet) -> Result<DetCurve> {
    if s.genuine.is_empty() || s.impostor.is_empty() {
        return Err(Error::InsufficientData(format!(
            "DET needs genuine and impostor scores, got {} and {}",
            s.genuine.len(),
            s.impostor.len()
        )));
    }
    if s.genuine.iter().chain(&s.impostor).any(|v| !v.is_finite()) {
        return Err(Error::Range("scores must be finite".into()));
    }
    let g = sorted(&s.genuine);
    let i = sorted(&s.impostor);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let points = thresholds
        .into_iter()
        .map(|t| {
            let rejected_genuine = g.partition_point(|&x| x < t);
            let accepted_impostor = i.len() - i.partition_point(|&x| x < t);
            OperatingPoint {
                threshold: t,
                fmr: accepted_impostor as f64 / ni,
                fnmr: rejected_genuine as f64 / ng,
            }
        })
        .collect();
    Ok(DetCurve { points })
}

/// FMR and FNMR at an arbitrary threshold.
pub fn rates_at(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    if s.genuine.is_empty() || s.impostor.is_empty() {
        return Err(Error::InsufficientData("empty score set".into()));
    }
    let fmr = s.impostor.iter().filter(|&&x| x >= threshold).count() as f64 / s.impostor.len() as f64;
    let fnmr = s.genuine.iter().filter(|&&x| x < threshold).count() as f64 / s.genuine.len() as f64;
    Ok((fmr, fnmr))
}

/// FNMR at the smallest threshold with `fmr <= target`. Targets below 0 are
/// never met and give 1.
pub fn fnmr_at_fmr(curve: &DetCurve, target_fmr: f64) -> f64 {
    curve
        .points
        .iter()
        .find(|p| p.fmr <= target_fmr)
        .map(|p| p.fnmr)
        .unwrap_or(1.0)
}

pub fn det_csv(curve: &DetCurve) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fmr", "fnmr"])?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fmr.to_string(), p.fnmr.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_det_csv(path: &Path, curve: &DetCurve) -> Result<()> {
    write_atomic(path, &det_csv(curve)?)
}

/// Fraction of probes whose most similar gallery entry has the same subject.
/// Ties go to the lowest gallery index.
pub fn rank1_identification(
    gallery: &[(String, EmbeddingVector)],
    probes: &[(String, EmbeddingVector)],
) -> Result<f64> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::InsufficientData("rank-1 needs a gallery and probes".into()));
    }
    let mut correct = 0usize;
    for (pid, pv) in probes {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (gi, (_, gv)) in gallery.iter().enumerate() {
            let s = match_score(pv, gv)?;
            if s > best_score {
                best = gi;
                best_score = s;
            }
        }
        if gallery[best].0 == *pid {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Population standard deviation.
pub fn age_dispersion(predicted: &[f64]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::InsufficientData("age dispersion of an empty list".into()));
    }
    let n = predicted.len() as f64;
    let mean = predicted.iter().sum::<f64>() / n;
    Ok((predicted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn target_key(t: f64) -> String {
    format!("{t}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub fnmr_at: BTreeMap<String, f64>,
}

impl ConditionResult {
    pub fn from_scores(s: &ScoreSet, targets: &[f64]) -> Result<Self> {
        let curve = compute_det(s)?;
        Ok(Self {
            genuine_pairs: s.genuine.len(),
            impostor_pairs: s.impostor.len(),
            fnmr_at: targets.iter().map(|&t| (target_key(t), fnmr_at_fmr(&curve, t))).collect(),
        })
    }

    pub fn fnmr(&self, target: f64) -> Option<f64> {
        self.fnmr_at.get(&target_key(target)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub role: EmbedderRole,
    pub instance: String,
}

impl From<&EmbedderHandle> for EmbedderInfo {
    fn from(h: &EmbedderHandle) -> Self {
        Self {
            role: h.role(),
            instance: h.instance().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub embedders: BTreeMap<String, EmbedderInfo>,
    pub seeds: Vec<u64>,
    pub fixture_hashes: BTreeMap<String, String>,
    pub fmr_targets: Vec<f64>,
    pub operating_point: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conditions: BTreeMap<String, ConditionResult>,
    /// Per-loss-mode results for edited images, keyed by mode name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub loss_modes: BTreeMap<String, ConditionResult>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

pub const ORI_ORI: &str = "ori-ori";
pub const MOD_MOD: &str = "mod-mod";
pub const ORI_MOD_PRE: &str = "ori-mod-pre-finetune";
pub const ORI_MOD_POST: &str = "ori-mod-post-finetune";

pub const OPERATING_POINT_RULE: &str = "accept if score >= threshold; FNMR read at the smallest threshold with FMR <= target";

/// Score sets for the four matcher conditions.
pub fn experiment_scores(
    ori: &[LabeledImage],
    modified: &[LabeledImage],
    eval_embedder: &EmbedderHandle,
    finetuned: &EmbedderHandle,
) -> Result<BTreeMap<&'static str, ScoreSet>> {
    for h in [eval_embedder, finetuned] {
        if h.role() != EmbedderRole::Eval {
            return Err(Error::InvalidConfig("reported scores must come from eval-role matchers".into()));
        }
    }
    let mut out = BTreeMap::new();
    out.insert(ORI_ORI, ScoreSet::from_pairs(&score_pairs(eval_embedder, ori)?)?);
    out.insert(MOD_MOD, ScoreSet::from_pairs(&score_pairs(eval_embedder, modified)?)?);
    out.insert(ORI_MOD_PRE, ScoreSet::from_pairs(&score_cross_pairs(eval_embedder, ori, modified)?)?);
    out.insert(ORI_MOD_POST, ScoreSet::from_pairs(&score_cross_pairs(finetuned, ori, modified)?)?);
    Ok(out)
}

/// Ori-ori, mod-mod and ori-mod (before and after matcher fine-tuning)
/// FNMR at each target.
pub fn compare_experiments(
    ori: &[LabeledImage],
    modified: &[LabeledImage],
    eval_embedder: &EmbedderHandle,
    finetuned: &EmbedderHandle,
    targets: &[f64],
) -> Result<EvalReport> {
    let scores = experiment_scores(ori, modified, eval_embedder, finetuned)?;
    let conditions = scores
        .iter()
        .map(|(k, s)| Ok((k.to_string(), ConditionResult::from_scores(s, targets)?)))
        .collect::<Result<_>>()?;
    let mut metadata = ReportMetadata {
        fmr_targets: targets.to_vec(),
        operating_point: OPERATING_POINT_RULE.into(),
        ..Default::default()
    };
    metadata.embedders.insert("eval".into(), eval_embedder.into());
    metadata.embedders.insert("eval-finetuned".into(), finetuned.into());
    Ok(EvalReport {
        conditions,
        loss_modes: BTreeMap::new(),
        metadata,
    })
}

/// Score set for age-edited images of one subject: genuine pairs are (real,
/// generated) images of that subject, impostor pairs are (other subject,
/// generated).
pub fn edited_identity_scores(
    h: &EmbedderHandle,
    real: &[LabeledImage],
    generated: &[LabeledImage],
    others: &[LabeledImage],
) -> Result<ScoreSet> {
    let mut pool: Vec<LabeledImage> = real.to_vec();
    pool.extend_from_slice(others);
    ScoreSet::from_pairs(&score_cross_pairs(h, &pool, generated)?)
}

/// Per-mode FNMR side by side; keys are loss-mode names.
pub fn compare_loss_modes(
    per_mode: &BTreeMap<LossMode, ScoreSet>,
    targets: &[f64],
) -> Result<BTreeMap<String, ConditionResult>> {
    per_mode
        .iter()
        .map(|(m, s)| Ok((m.name().to_string(), ConditionResult::from_scores(s, targets)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand() -> ScoreSet {
        ScoreSet::new(vec![0.9, 0.6, 0.4], vec![0.5, 0.3, 0.2, 0.1]).unwrap()
    }

    #[test]
    fn hand_rates() {
        let (fmr, fnmr) = rates_at(&hand(), 0.45).unwrap();
        assert_eq!(fmr, 0.25);
        assert!((fnmr - 1.0 / 3.0).abs() < 1e-15);
        let c = compute_det(&hand()).unwrap();
        assert!((fnmr_at_fmr(&c, 0.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(fnmr_at_fmr(&c, 0.25), 0.0);
        assert_eq!(fnmr_at_fmr(&c, -0.1), 1.0);
    }

    #[test]
    fn separated_and_inverted() {
        let c = compute_det(&ScoreSet::new(vec![0.9; 4], vec![0.1; 5]).unwrap()).unwrap();
        assert!(c.points.iter().any(|p| p.fmr == 0.0 && p.fnmr == 0.0));
        for t in [0.0, 1e-3, 0.5] {
            assert_eq!(fnmr_at_fmr(&c, t), 0.0);
        }
        let c = compute_det(&ScoreSet::new(vec![0.1; 3], vec![0.9; 3]).unwrap()).unwrap();
        assert!(c.points.iter().filter(|p| p.fmr == 0.0).all(|p| p.fnmr == 1.0));
    }

    #[test]
    fn empty_sides_fail() {
        assert!(matches!(
            compute_det(&ScoreSet::new(vec![], vec![0.1]).unwrap()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn curve_monotone_on_random_sets() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let g: Vec<f64> = (0..r.random_range(1..50)).map(|_| (r.random::<f64>() * 10.0).round() / 10.0).collect();
            let i: Vec<f64> = (0..r.random_range(1..50)).map(|_| (r.random::<f64>() * 10.0).round() / 10.0 - 0.3).collect();
            let c = compute_det(&ScoreSet::new(g, i).unwrap()).unwrap();
            for w in c.points.windows(2) {
                assert!(w[0].threshold < w[1].threshold);
                assert!(w[0].fmr >= w[1].fmr && w[0].fnmr <= w[1].fnmr);
            }
            let mut last = f64::INFINITY;
            for t in [0.0, 0.01, 0.1, 0.3, 0.7, 1.0] {
                let v = fnmr_at_fmr(&c, t);
                assert!(v <= last);
                last = v;
            }
        }
    }

    fn e(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rank1_cases() {
        let gallery = vec![("a".to_string(), e(&[1.0, 0.0])), ("b".to_string(), e(&[0.0, 1.0]))];
        let probes = vec![("a".to_string(), e(&[1.0, 0.0]))];
        assert_eq!(rank1_identification(&gallery, &probes).unwrap(), 1.0);
        let tie = vec![("b".to_string(), e(&[1.0, 1.0]))];
        assert_eq!(rank1_identification(&gallery, &tie).unwrap(), 0.0);
        let one = vec![("a".to_string(), e(&[0.3, 0.1]))];
        assert_eq!(rank1_identification(&one, &[("a".to_string(), e(&[-1.0, 0.2]))]).unwrap(), 1.0);
        assert!(rank1_identification(&[], &probes).is_err());
    }

    #[test]
    fn dispersion_cases() {
        assert_eq!(age_dispersion(&[2.0; 5]).unwrap(), 0.0);
        assert_eq!(age_dispersion(&[0.0, 0.0, 6.0, 6.0]).unwrap(), 3.0);
        let v = age_dispersion(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((v - (35.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert!((v - 1.7078).abs() < 1e-4);
        assert!(age_dispersion(&[]).is_err());
    }

    #[test]
    fn det_csv_header_and_sentinel() {
        let text = String::from_utf8(det_csv(&compute_det(&hand()).unwrap()).unwrap()).unwrap();
        assert!(text.starts_with("threshold,fmr,fnmr\n"));
        assert!(text.trim_end().ends_with("inf,0,1"));
    }

    #[test]
    fn condition_lookup() {
        let c = ConditionResult::from_scores(&hand(), &TOY_FMR_TARGETS).unwrap();
        assert_eq!(c.fnmr_at.len(), 2);
        assert!(c.fnmr(0.01).is_some() && c.fnmr(0.5).is_none());
    }
}
