//! The committed toy fixture must be exactly what `write_fixture` produces,
//! and the loaders must accept it.

use std::path::Path;

use agedit::biometrics::load_labeled_dir;
use agedit::data::{load_manifest, TrainingData};
use agedit::io::{sha256_file, sha256_tree};
use agedit::synth::{write_fixture, FixtureSpec};

fn committed() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy"))
}

#[test]
fn committed_fixture_regenerates_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &FixtureSpec::default()).unwrap();
    for sub in ["subjects", "reg", "matcher", "eval"] {
        assert_eq!(
            sha256_tree(&dir.path().join(sub)).unwrap(),
            sha256_tree(&committed().join(sub)).unwrap(),
            "{sub}/ differs"
        );
    }
    for file in ["manifest.json", "fixture.json"] {
        assert_eq!(
            sha256_file(&dir.path().join(file)).unwrap(),
            sha256_file(&committed().join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn fixture_loads_with_expected_sizes() {
    let spec = FixtureSpec::default();
    let manifest = load_manifest(&committed().join("manifest.json")).unwrap();
    let data = TrainingData::load(&manifest, spec.resolution).unwrap();
    assert_eq!(data.training.len(), spec.target_images);
    assert_eq!(data.regularization.len(), 6 * spec.reg_per_group);
    assert_eq!(data.captions.len(), data.regularization.len());

    let pretrain = load_labeled_dir(&committed().join("matcher/pretrain"), spec.resolution).unwrap();
    assert_eq!(pretrain.len(), spec.pretrain_subjects * spec.pretrain_images);
    let ori = load_labeled_dir(&committed().join("eval/ori"), spec.resolution).unwrap();
    let modified = load_labeled_dir(&committed().join("eval/mod"), spec.resolution).unwrap();
    assert_eq!(ori.len(), spec.eval_subjects * spec.eval_ori);
    assert_eq!(modified.len(), spec.eval_subjects * spec.eval_mod);
    let finetune = load_labeled_dir(&committed().join("matcher/finetune"), spec.resolution).unwrap();
    assert!(finetune.iter().all(|f| !ori.iter().any(|o| o.subject_id == f.subject_id)));
}
