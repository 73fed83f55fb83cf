use std::path::Path;

use dosekit::config::{parse_config, RunConfig, Splits};
use dosekit_core::nn::UNetConfig;
use dosekit_core::phantom::builtin_site;
use dosekit_core::planner::PlanConfig;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn preset_only_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "run.toml", "[site]\npreset = \"siteB\"\n");
    let cfg = parse_config(&p).unwrap();
    assert_eq!(cfg.site.preset.as_deref(), Some("siteB"));
    assert_eq!(cfg.site.spec().unwrap(), builtin_site("siteB").unwrap());
    assert_eq!(cfg.unet, UNetConfig::default());
    assert_eq!(cfg.planning, PlanConfig::default());
    assert_eq!(cfg.site.patients, 10);
    assert_eq!(cfg.seed, 0);
}

#[test]
fn unknown_key_is_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "run.toml", "[unet]\npools = 2\nfliters = 4\n");
    let err = parse_config(&p).unwrap_err();
    let msg = err.to_string();
    assert_eq!(err.kind().exit_code(), 2);
    assert!(msg.contains("fliters"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn overlapping_splits_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "run.toml",
        "[site]\npatients = 4\n[site.splits]\ntrain = [0, 1]\nval = [2]\ntest = [1, 3]\n",
    );
    let err = parse_config(&p).unwrap_err();
    assert_eq!(err.kind().exit_code(), 2);
    assert!(err.to_string().contains("more than one split"), "{err}");
}

#[test]
fn splits_must_cover_the_pool() {
    let s = Splits { train: vec![0], val: vec![1], test: vec![2] };
    assert!(s.validate(3).is_ok());
    assert!(s.validate(4).is_err());
    assert!(s.validate(2).is_err());
}

#[test]
fn proportional_split_follows_54_6_10() {
    let s = Splits::proportional(70).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (54, 6, 10));
    let s = Splits::proportional(10).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    assert!(Splits::proportional(2).is_err());
}

#[test]
fn missing_site_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "run.toml", "[site]\nfile = \"nowhere.toml\"\n");
    let err = parse_config(&p).unwrap_err();
    assert_eq!(err.kind().exit_code(), 2);
    assert!(err.to_string().contains("nowhere.toml"), "{err}");
    let p = write(dir.path(), "both.toml", "[site]\npreset = \"siteA\"\nfile = \"x.toml\"\n");
    assert_eq!(parse_config(&p).unwrap_err().kind().exit_code(), 2);
}

#[test]
fn custom_site_file_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = builtin_site("siteA").unwrap();
    spec.site_id = "custom".into();
    spec.oar_count_range = (0, 0);
    write(dir.path(), "site.json", &serde_json::to_string(&spec).unwrap());
    let p = write(dir.path(), "run.toml", "[site]\nfile = \"site.json\"\n");
    let cfg = parse_config(&p).unwrap();
    assert_eq!(cfg.site.spec().unwrap(), spec);
}

#[test]
fn normalized_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "run.toml",
        "seed = 42\njobs = 2\n[site]\npreset = \"siteA\"\npatients = 5\n[site.splits]\ntrain = [0, 1, 2]\nval = [3]\ntest = [4]\n[schedule]\ninitial_lr = 3e-4\n[experiment.sweep]\nsizes = [1, 2]\n",
    );
    let cfg = parse_config(&p).unwrap();
    let text = cfg.to_toml();
    let again = RunConfig::from_toml_str(&text, &dir.path().join("normalized.toml")).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_toml(), text);
}
