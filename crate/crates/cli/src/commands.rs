//! Subcommand implementations. Each one loads and validates every input
//! before it writes anything.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use agedit::age::{AgeClassifier, AgeClassifierConfig};
use agedit::biometrics::{
    fine_tune_embedder, load_labeled_dir, read_scores_csv, score_cross_pairs, score_pairs, train_embedder,
    write_scores_csv, EmbedderConfig, EmbedderHandle, EmbedderRole, EmbedderTrainConfig, ScoreSet,
};
use agedit::data::{load_manifest, import_directory, DatasetManifest, TrainingData};
use agedit::evaluation::{
    age_dispersion, compare_loss_modes, compute_det, experiment_scores, fnmr_at_fmr, rank1_identification,
    write_det_csv, ConditionResult, DetCurve, EvalReport, ReportMetadata, DEFAULT_FMR_TARGETS,
    OPERATING_POINT_RULE,
};
use agedit::io::{find_pngs, sha256_file, write_atomic};
use agedit::losses::LossMode;
use agedit::model::{ModelConfig, ModelParams};
use agedit::plot::{write_det_plot, PALETTE};
use agedit::prompts::{AgeGroup, TokenRegistry};
use agedit::sampler::{generate_aged, write_generation, ContrastSmoothnessScorer, QualityGateConfig};
use agedit::synth::{write_fixture, FixtureSpec};
use agedit::tensor::ImageTensor;
use agedit::trainer::{fine_tune_data, pretrain_autoencoder, write_loss_csv, TrainConfig};
use agedit::Error;
use anyhow::Result;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::record::{beside, in_dir, RunRecord};
use crate::{
    DetArgs, DispersionArgs, EvalMatchArgs, FinetuneMatcherArgs, GenerateArgs, MakeFixtureArgs, PrepareDataArgs,
    ReportArgs, TrainAgePredictorArgs, TrainArgs, TrainMatcherArgs,
};

const AUTOENCODER_BATCH: usize = 16;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    Ok(serde_json::from_str(&text).map_err(|e| load_err(format!("invalid config: {e}")))?)
}

fn fmr_targets(given: &[f64]) -> Result<Vec<f64>> {
    if given.is_empty() {
        return Ok(DEFAULT_FMR_TARGETS.to_vec());
    }
    if let Some(t) = given.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid(format!("FMR target {t} outside [0, 1]")));
    }
    Ok(given.to_vec())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn warn_empty_groups(m: &DatasetManifest) {
    let counts = m.group_counts();
    for g in AgeGroup::ALL {
        if counts.get(&g).copied().unwrap_or(0) == 0 {
            log::warn!("no regularization images captioned `{g}`; the model cannot learn that age word");
        }
    }
}

fn load_role(path: &Path, role: EmbedderRole) -> Result<EmbedderHandle> {
    let h = EmbedderHandle::load(path)?;
    if h.role() != role {
        return Err(invalid(format!(
            "{} holds a {} matcher, expected {role}",
            path.display(),
            h.role()
        )));
    }
    Ok(h)
}

pub fn prepare_data(a: PrepareDataArgs) -> Result<()> {
    let mut m = import_directory(&a.input, &a.subject_id)?;
    let out = a.out.unwrap_or_else(|| a.input.join("manifest.json"));
    let out_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !same_dir(&a.input, &out_dir) {
        m.resolve_paths(&fs::canonicalize(&a.input)?);
    }
    warn_empty_groups(&m);
    let mut rec = RunRecord::new("prepare-data", None, &json!({ "subject_id": a.subject_id }))?;
    rec.input("input", &a.input)?;
    write_atomic(&out, m.to_json()?.as_bytes())?;
    rec.output("manifest", &out)?;
    rec.write(&beside(&out))?;
    println!(
        "{}: {} training images, {} regularization pairs",
        out.display(),
        m.training.images.len(),
        m.regularization.len()
    );
    Ok(())
}

pub fn make_fixture(a: MakeFixtureArgs) -> Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        return Err(invalid(format!("{} exists and is not empty", a.out.display())));
    }
    let spec = FixtureSpec {
        seed: a.seed,
        ..Default::default()
    };
    write_fixture(&a.out, &spec)?;
    RunRecord::new("make-fixture", Some(a.seed), &spec)?.write(&in_dir(&a.out))?;
    println!("fixture written to {}", a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(t) = a.token {
        cfg.token = t;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.class_label {
        cfg.class_label = c;
    }
    cfg.validate()?;
    let registry = TokenRegistry::default();
    registry.check(&cfg.token)?;

    let manifest = load_manifest(&a.manifest)?;
    warn_empty_groups(&manifest);
    let embedder = match (&a.loss_matcher, cfg.mode) {
        (Some(p), _) => Some(load_role(p, EmbedderRole::Loss)?),
        (None, LossMode::Biometric) => {
            return Err(Error::MissingComponent {
                mode: "biometric",
                component: "loss-role matcher (--loss-matcher)",
            }
            .into())
        }
        (None, _) => None,
    };
    let base = a.base.as_deref().map(ModelParams::load).transpose()?;
    let data = TrainingData::load(&manifest, cfg.resolution)?;

    let params = match base {
        Some(p) => p,
        None => {
            if cfg.learning_rate < 1e-4 {
                log::warn!(
                    "training a fresh model with learning rate {}; toy runs usually need about 2e-3",
                    cfg.learning_rate
                );
            }
            let mut mc = ModelConfig::new(&registry, &[cfg.class_label.as_str()]);
            mc.resolution = cfg.resolution;
            mc.seed = cfg.seed;
            let mut p = ModelParams::init(mc)?;
            let images: Vec<ImageTensor> = data.all_images().cloned().collect();
            let curve = pretrain_autoencoder(
                &mut p,
                &images,
                cfg.autoencoder_steps,
                cfg.autoencoder_lr,
                AUTOENCODER_BATCH,
                cfg.seed,
            )?;
            if let Some(last) = curve.last() {
                log::info!("autoencoder warm-up: {} steps, final MSE {last:.5}", curve.len());
            }
            p
        }
    };

    let run = fine_tune_data(&params, &manifest, &data, &cfg, &registry, embedder.as_ref())?;
    let totals = run.totals();
    log::info!(
        "{} steps in {:.1}s, total loss {:.5} -> {:.5}",
        totals.len(),
        run.duration.as_secs_f64(),
        totals.first().copied().unwrap_or(f64::NAN),
        totals.last().copied().unwrap_or(f64::NAN)
    );

    let model_path = a.out.join("model.safetensors");
    let loss_path = a.out.join("loss.csv");
    let mut rec = RunRecord::new("train", Some(cfg.seed), &cfg)?;
    rec.input("manifest", &a.manifest)?;
    if let Some(b) = &a.base {
        rec.input("base", b)?;
    }
    if let Some(m) = &a.loss_matcher {
        rec.input("loss_matcher", m)?;
    }
    run.params.save(&model_path)?;
    write_loss_csv(&loss_path, &run.history)?;
    rec.checkpoint_hash = Some(rec.output("model", &model_path)?);
    rec.output("loss", &loss_path)?;
    rec.write(&in_dir(&a.out))?;
    println!("{}", model_path.display());
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut gate: QualityGateConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => QualityGateConfig::default(),
    };
    if let Some(n) = a.n {
        gate.n_generate = n;
        gate.max_keep = gate.max_keep.min(n);
    }
    if let Some(t) = a.threshold {
        gate.threshold = t;
    }
    if let Some(k) = a.max_keep {
        gate.max_keep = k;
    }
    gate.validate()?;
    if a.steps == 0 {
        return Err(invalid("--steps must be >= 1"));
    }
    let registry = TokenRegistry::default();
    registry.check(&a.token)?;
    let params = ModelParams::load(&a.model)?;
    let mut groups = a.age_groups.clone();
    if groups.is_empty() {
        groups = AgeGroup::ALL.to_vec();
    }
    groups.sort();
    groups.dedup();

    let results = generate_aged(
        &params,
        &registry,
        &a.token,
        &a.class_label,
        &groups,
        &gate,
        &ContrastSmoothnessScorer::default(),
        a.steps,
        a.seed,
    )?;

    let config = json!({
        "gate": gate,
        "token": a.token,
        "class_label": a.class_label,
        "age_groups": groups,
        "inference_steps": a.steps,
    });
    let mut rec = RunRecord::new("generate", Some(a.seed), &config)?;
    rec.checkpoint_hash = Some(sha256_file(&a.model)?);
    write_generation(&a.out, &a.token, &results)?;
    rec.output("scores", &a.out.join(&a.token).join("scores.csv"))?;
    rec.write(&in_dir(&a.out))?;
    for (g, r) in &results {
        println!("{g}: kept {} of {}", r.retained.len(), r.images.len());
    }
    Ok(())
}

pub fn train_matcher(a: TrainMatcherArgs) -> Result<()> {
    let ecfg = EmbedderConfig {
        seed: a.seed,
        ..Default::default()
    };
    let tcfg = EmbedderTrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..Default::default()
    };
    let images = load_labeled_dir(&a.images, ecfg.resolution)?;
    let h = EmbedderHandle::init(a.role, ecfg.clone())?;
    let trained = train_embedder(&h, &images, &tcfg)?;
    let mut rec = RunRecord::new(
        "train-matcher",
        Some(a.seed),
        &json!({ "role": a.role, "embedder": ecfg, "training": tcfg }),
    )?;
    rec.input("images", &a.images)?;
    trained.save(&a.out)?;
    rec.checkpoint_hash = Some(rec.output("matcher", &a.out)?);
    rec.write(&beside(&a.out))?;
    println!("{} matcher {} -> {}", trained.role(), trained.instance(), a.out.display());
    Ok(())
}

pub fn eval_match(a: EvalMatchArgs) -> Result<()> {
    let h = EmbedderHandle::load(&a.matcher)?;
    if h.role() != EmbedderRole::Eval {
        log::warn!("scoring with a {} matcher; reported numbers should use an eval matcher", h.role());
    }
    let res = h.config().resolution;
    let mut gallery = Vec::new();
    for dir in &a.gallery {
        gallery.extend(load_labeled_dir(dir, res)?);
    }
    let self_match = a.gallery.len() == 1 && same_dir(&a.gallery[0], &a.probes) && a.probe_subject.is_none();
    let mut probes = if self_match {
        gallery.clone()
    } else {
        load_labeled_dir(&a.probes, res)?
    };
    if let Some(id) = &a.probe_subject {
        for p in &mut probes {
            p.subject_id = id.clone();
        }
    }
    let pairs = if self_match {
        score_pairs(&h, &gallery)?
    } else {
        score_cross_pairs(&h, &gallery, &probes)?
    };
    let s = ScoreSet::from_pairs(&pairs)?;
    let mut rec = RunRecord::new(
        "eval-match",
        None,
        &json!({ "self_match": self_match, "probe_subject": a.probe_subject }),
    )?;
    rec.checkpoint_hash = Some(sha256_file(&a.matcher)?);
    for (i, dir) in a.gallery.iter().enumerate() {
        rec.input(&format!("gallery{i}"), dir)?;
    }
    rec.input("probes", &a.probes)?;
    write_scores_csv(&a.scores_out, &pairs)?;
    rec.output("scores", &a.scores_out)?;
    rec.write(&beside(&a.scores_out))?;
    println!("{} genuine, {} impostor pairs", s.genuine.len(), s.impostor.len());
    if !self_match {
        let embed = |set: &[agedit::biometrics::LabeledImage]| -> Result<Vec<_>> {
            let v = h.embed_all(&set.iter().map(|l| &l.image).collect::<Vec<_>>())?;
            Ok(set.iter().map(|l| l.subject_id.clone()).zip(v).collect())
        };
        println!("rank-1 identification: {:.4}", rank1_identification(&embed(&gallery)?, &embed(&probes)?)?);
    }
    Ok(())
}

pub fn det(a: DetArgs) -> Result<()> {
    let targets = fmr_targets(&a.fmr)?;
    let s = ScoreSet::from_pairs(&read_scores_csv(&a.scores)?)?;
    let curve = compute_det(&s)?;
    if let Some(out) = &a.curve_out {
        let mut rec = RunRecord::new("det", None, &json!({ "fmr_targets": targets }))?;
        rec.input("scores", &a.scores)?;
        write_det_csv(out, &curve)?;
        rec.output("curve", out)?;
        rec.write(&beside(out))?;
    }
    for t in targets {
        println!("FNMR@FMR={t}: {:.6}", fnmr_at_fmr(&curve, t));
    }
    Ok(())
}

pub fn finetune_matcher(a: FinetuneMatcherArgs) -> Result<()> {
    let h = load_role(&a.matcher, EmbedderRole::Eval)?;
    let res = h.config().resolution;
    let generated = load_labeled_dir(&a.generated, res)?;
    let mut held = Vec::new();
    for dir in &a.held_out {
        for l in load_labeled_dir(dir, res)? {
            if !held.contains(&l.subject_id) {
                held.push(l.subject_id);
            }
        }
    }
    let tuned = fine_tune_embedder(&h, &generated, a.epochs, a.seed, &held)?;
    let mut rec = RunRecord::new("finetune-matcher", Some(a.seed), &json!({ "epochs": a.epochs }))?;
    rec.input("matcher", &a.matcher)?;
    rec.input("generated", &a.generated)?;
    tuned.save(&a.out)?;
    rec.checkpoint_hash = Some(rec.output("matcher", &a.out)?);
    rec.write(&beside(&a.out))?;
    println!("eval matcher {} -> {}", tuned.instance(), a.out.display());
    Ok(())
}

pub fn train_age_predictor(a: TrainAgePredictorArgs) -> Result<()> {
    let cfg = AgeClassifierConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..Default::default()
    };
    let m = load_manifest(&a.manifest)?;
    let data = TrainingData::load(&m, cfg.resolution)?;
    let examples: Vec<(ImageTensor, AgeGroup)> =
        data.regularization.iter().cloned().zip(data.captions.iter().copied()).collect();
    let clf = AgeClassifier::train(&examples, cfg.clone())?;
    let mut rec = RunRecord::new("train-age-predictor", Some(a.seed), &cfg)?;
    rec.input("manifest", &a.manifest)?;
    clf.save(&a.out)?;
    rec.checkpoint_hash = Some(rec.output("predictor", &a.out)?);
    rec.write(&beside(&a.out))?;
    println!("training accuracy {:.3} -> {}", clf.accuracy(&examples)?, a.out.display());
    Ok(())
}

pub fn dispersion(a: DispersionArgs) -> Result<()> {
    let clf = AgeClassifier::load(&a.predictor)?;
    let files = find_pngs(&a.images)?;
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("no PNG files under {}", a.images.display())).into());
    }
    let images = files
        .iter()
        .map(|f| ImageTensor::load(f, clf.config().resolution))
        .collect::<agedit::Result<Vec<_>>>()?;
    let groups = clf.predict_all(&images)?;
    let idx: Vec<f64> = groups.iter().map(|g| g.index() as f64).collect();
    let mut hist = [0usize; 6];
    for g in &groups {
        hist[g.index()] += 1;
    }
    println!("images: {}", images.len());
    for g in AgeGroup::ALL {
        println!("{g}: {}", hist[g.index()]);
    }
    println!("dispersion: {:.6}", age_dispersion(&idx)?);
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let targets = fmr_targets(&a.fmr)?;
    if a.ori.is_none() && a.mode_scores.is_empty() {
        return Err(invalid("report needs --ori/--mod/--matcher/--finetuned, --mode-scores, or both"));
    }
    let mut curves: Vec<(String, DetCurve)> = Vec::new();
    let mut conditions = BTreeMap::new();
    let mut metadata = ReportMetadata {
        fmr_targets: targets.clone(),
        operating_point: OPERATING_POINT_RULE.into(),
        ..Default::default()
    };
    let mut rec = RunRecord::new("report", None, &json!({ "fmr_targets": targets, "plot_size": a.plot_size }))?;

    if let (Some(ori_dir), Some(mod_dir), Some(m), Some(f)) = (&a.ori, &a.modified, &a.matcher, &a.finetuned) {
        let eval = load_role(m, EmbedderRole::Eval)?;
        let tuned = load_role(f, EmbedderRole::Eval)?;
        let res = eval.config().resolution;
        let ori = load_labeled_dir(ori_dir, res)?;
        let modified = load_labeled_dir(mod_dir, res)?;
        for (name, s) in experiment_scores(&ori, &modified, &eval, &tuned)? {
            conditions.insert(name.to_string(), ConditionResult::from_scores(&s, &targets)?);
            curves.push((name.to_string(), compute_det(&s)?));
        }
        metadata.embedders.insert("eval".into(), (&eval).into());
        metadata.embedders.insert("eval-finetuned".into(), (&tuned).into());
        for (k, p) in [("ori", ori_dir), ("mod", mod_dir), ("matcher", m), ("finetuned", f)] {
            rec.input(k, p)?;
            let hash = rec.inputs[k].clone();
            metadata.fixture_hashes.insert(k.into(), hash);
        }
    }

    let mut per_mode = BTreeMap::new();
    for (mode, path) in &a.mode_scores {
        if per_mode.contains_key(mode) {
            return Err(invalid(format!("--mode-scores given twice for {mode}")));
        }
        per_mode.insert(*mode, ScoreSet::from_pairs(&read_scores_csv(path)?)?);
        let key = format!("scores-{mode}");
        rec.input(&key, path)?;
        let hash = rec.inputs[&key].clone();
        metadata.fixture_hashes.insert(key, hash);
    }
    let loss_modes = compare_loss_modes(&per_mode, &targets)?;
    for (mode, s) in &per_mode {
        curves.push((format!("mode-{mode}"), compute_det(s)?));
    }

    let report = EvalReport {
        conditions,
        loss_modes,
        metadata,
    };
    let report_path = a.out.join("report.json");
    let plot_path = a.out.join("det.png");
    let legend_path = a.out.join("det_legend.csv");
    let mut legend = String::from("curve,colour\n");
    for (i, (name, curve)) in curves.iter().enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        legend.push_str(&format!("{name},#{r:02x}{g:02x}{b:02x}\n"));
        write_det_csv(&a.out.join(format!("det_{name}.csv")), curve)?;
    }
    report.write(&report_path)?;
    write_det_plot(&plot_path, &curves.iter().map(|(_, c)| c).collect::<Vec<_>>(), a.plot_size)?;
    write_atomic(&legend_path, legend.as_bytes())?;
    rec.output("report", &report_path)?;
    rec.output("plot", &plot_path)?;
    rec.write(&in_dir(&a.out))?;

    print_table(&report, &targets);
    Ok(())
}

fn print_table(report: &EvalReport, targets: &[f64]) {
    let header: Vec<String> = targets.iter().map(|t| format!("FNMR@{t}")).collect();
    println!("{:<26} {}", "condition", header.join("  "));
    let rows = report
        .conditions
        .iter()
        .chain(report.loss_modes.iter())
        .map(|(k, c)| (k, targets.iter().map(|&t| c.fnmr(t).unwrap_or(f64::NAN)).collect::<Vec<_>>()));
    for (name, vals) in rows {
        let vals: Vec<String> = vals.iter().map(|v| format!("{v:>10.4}")).collect();
        println!("{name:<26} {}", vals.join("  "));
    }
}
