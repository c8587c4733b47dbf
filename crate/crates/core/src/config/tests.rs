use std::path::PathBuf;

use super::*;
use crate::model::Mode;
use crate::training::NullSidePolicy;

fn scratch(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("sbsg-config-{}-{name}", std::process::id()))
}

#[test]
fn defaults_validate() {
    RunConfig::default().validate().unwrap();
}

#[test]
fn config_file_overrides_defaults_and_skips_comments() {
    let path = scratch("basic.cfg");
    std::fs::write(
        &path,
        "# decoder setup\nmode = l2r\nbeam=4\n\n  max_steps  =  77\nnull_side=random\ndata_dir=runs/demo\n",
    )
    .unwrap();
    let mut rc = RunConfig::default();
    rc.apply_file(&path).unwrap();
    std::fs::remove_file(&path).ok();

    assert_eq!(rc.model.mode, Mode::L2R);
    assert_eq!(rc.beam, 4);
    assert_eq!(rc.hyper.max_steps, 77);
    assert_eq!(rc.hyper.null_side, NullSidePolicy::Random);
    assert_eq!(rc.data_dir.as_deref(), Some(std::path::Path::new("runs/demo")));
    rc.validate().unwrap();
}

#[test]
fn flags_win_over_the_file() {
    let path = scratch("override.cfg");
    std::fs::write(&path, "seed=1\nlambda=0.25\n").unwrap();
    let mut rc = RunConfig::default();
    rc.apply_file(&path).unwrap();
    std::fs::remove_file(&path).ok();
    // A flag lands as a later `set` call.
    rc.set("seed", "9").unwrap();
    assert_eq!(rc.seed, 9);
    assert_eq!(rc.model.lambda, 0.25);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected_with_location() {
    let mut rc = RunConfig::default();
    let err = rc.set("lamda", "0.5").unwrap_err();
    assert!(err.to_string().contains("lamda"), "{err}");
    assert!(rc.set("lambda", "often").is_err());
    assert!(rc.set("mode", "diagonal").is_err());

    let path = scratch("broken.cfg");
    std::fs::write(&path, "layers=2\nnot a pair\n").unwrap();
    let err = RunConfig::default().apply_file(&path).unwrap_err();
    std::fs::remove_file(&path).ok();
    assert!(err.to_string().contains(":2"), "line number in {err}");
}

#[test]
fn beam_zero_means_greedy() {
    let mut rc = RunConfig::default();
    rc.set("beam", "0").unwrap();
    assert!(rc.decode_config().beam.is_none());
    rc.set("beam", "6").unwrap();
    assert_eq!(rc.decode_config().beam, Some(6));
}

#[test]
fn validation_runs_every_module_check() {
    let base = RunConfig::default();

    let mut rc = base.clone();
    rc.set("heads", "3").unwrap(); // 64 not divisible by 3
    assert!(rc.validate().is_err());

    let mut rc = base.clone();
    rc.set("beam", "3").unwrap(); // odd beam in bidirectional mode
    assert!(rc.validate().is_err());
    rc.set("mode", "l2r").unwrap();
    rc.validate().unwrap();

    let mut rc = base.clone();
    rc.set("max_len", "9999").unwrap(); // beyond the position table
    assert!(rc.validate().is_err());

    let mut rc = base.clone();
    rc.set("len_lo", "9").unwrap();
    rc.set("len_hi", "3").unwrap();
    assert!(rc.validate().is_err());

    let mut rc = base;
    rc.set("repetitions", "0").unwrap();
    assert!(rc.validate().is_err());
}
