use std::fs;
use std::path::Path;
use std::process::Command;

use latreg_cli::commands::{self, AblationMode, Overrides};
use latreg_cli::config::{ExperimentConfig, Split};
use latreg_cli::dataset;
use latreg_cli::CliError;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out: out.to_path_buf(),
        split: Split { unlabeled: 2, labeled: 2, val: 1, test: 1 },
        ..Default::default()
    };
    cfg.scene.dims = [8, 8, 8];
    cfg.scene.amplitude = 1.0;
    cfg.scene.bump_width = 2.0;
    cfg.backbone.levels = 2;
    cfg.backbone.channels = vec![4, 8];
    cfg.warmup.epochs = 2;
    cfg.grpo.epochs = 2;
    cfg.grpo.trajectories = 2;
    cfg.grpo.steps = 2;
    cfg.ablation.epochs = 1;
    cfg.ablation.trajectories = vec![2];
    cfg.ablation.steps = vec![1, 2];
    cfg.ablation.extra_cells = vec![[1 << 20, 2]];
    cfg.probe.dims = vec![10, 100];
    cfg.probe.groups = 16;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latreg"))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn default_generate_writes_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        out: dir.path().to_path_buf(),
        ..Default::default()
    };
    let m = commands::generate(&cfg, false).unwrap();
    assert_eq!(m.pairs.len(), 40 + 10 + 4 + 8);
    assert_eq!(m.summary.max_true_field_njd, 0.0);
    assert!(m.summary.mean_identity_dice < 100.0);
    let (_, ds) = dataset::load(dir.path()).unwrap();
    assert_eq!((ds.unlabeled.len(), ds.labeled.len(), ds.val.len(), ds.test.len()), (40, 10, 4, 8));
}

#[test]
fn zero_amplitude_pairs_are_already_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.scene.amplitude = 0.0;
    let m = commands::generate(&cfg, false).unwrap();
    assert!(m.pairs.iter().all(|p| p.identity_dice == 100.0));
    assert_eq!(m.summary.min_identity_dice, 100.0);
}

#[test]
fn same_seed_gives_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    commands::generate(&tiny(a.path()), false).unwrap();
    commands::generate(&tiny(b.path()), false).unwrap();
    let read = |d: &Path| fs::read(dataset::data_dir(d).join(dataset::MANIFEST)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let c = tempfile::tempdir().unwrap();
    commands::generate(&ExperimentConfig { seed: 1, ..tiny(c.path()) }, false).unwrap();
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::generate(&cfg, false).unwrap();
    assert!(matches!(commands::grpo(&cfg), Err(CliError::Config(_))));

    let w = commands::warmup(&cfg).unwrap();
    assert_eq!(w.epochs, 2);
    let metrics = fs::read_to_string(dir.path().join("warmup/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,loss,similarity,regularizer,kl,val_dice,val_njd,tau"));
    assert_eq!(metrics.lines().count(), 3);

    let g = commands::grpo(&cfg).unwrap();
    assert!(g.warm_start);
    assert_eq!(g.history.len(), 2);
    let log = fs::read_to_string(dir.path().join("grpo/trajectories.jsonl")).unwrap();
    // epochs × labeled pairs × steps × trajectories
    assert_eq!(log.lines().count(), 2 * 2 * 2 * 2);
    for name in ["checkpoint.msk", "metrics.csv", "summary.json", "config.json", "provenance.json"] {
        assert!(dir.path().join("grpo").join(name).exists(), "missing grpo/{name}");
    }

    let steps = commands::infer(&cfg, None).unwrap();
    assert_eq!(steps.len(), 2);
    assert!(dir.path().join("infer/fields/test-000.field.msv").exists());
    let rows = fs::read_to_string(dir.path().join("infer/steps.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2);

    let e = commands::eval(&cfg, None).unwrap();
    assert_eq!(e.pairs.len(), 1);
    assert!(e.checkpoint.ends_with("grpo/checkpoint.msk"));
    assert_eq!(e.dice.mean, e.pairs[0].dice);

    let grid = commands::ablate(&cfg, AblationMode::Grid).unwrap();
    assert_eq!(grid.len(), 3);
    assert!(!grid[0].is_oom() && !grid[1].is_oom());
    assert!(grid[2].is_oom());
    let csv = fs::read_to_string(dir.path().join("ablate/grid.csv")).unwrap();
    assert!(csv.contains(",OOM,"));

    let ladder = commands::ablate(&cfg, AblationMode::Components).unwrap();
    let names: Vec<&str> = ladder.iter().map(|r| r.cell.as_str()).collect();
    assert_eq!(names, ["gaussian-head-only", "+dice", "+multi-step", "+grpo-full"]);

    let probe = commands::probe_ldvn(&cfg).unwrap();
    assert_eq!(probe.rows.len(), 2);
    let csv = fs::read_to_string(dir.path().join("probe/ldvn.csv")).unwrap();
    assert!(csv.starts_with("N,std_unscaled,std_scaled,exponent"));
}

#[test]
fn checkpoint_shape_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::generate(&cfg, false).unwrap();
    commands::warmup(&cfg).unwrap();
    let mut other = cfg.clone();
    other.backbone.channels = vec![4, 6];
    let err = commands::eval(&other, Some(&dir.path().join("warmup/checkpoint.msk"))).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");
    assert!(matches!(
        commands::eval(&cfg, Some(&dir.path().join("nope.msk"))),
        Err(CliError::Data(_))
    ));
}

#[test]
fn ldvn_off_inflates_log_likelihood_spread() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.grpo.epochs = 1;
    cfg.grpo.lr = 0.0;
    cfg.grpo.trajectories = 6;
    cfg.no_warmup = true;
    commands::generate(&cfg, false).unwrap();
    let scaled = commands::grpo(&cfg).unwrap().history[0].log_pi_spread;
    let off = commands::resolve_config(
        Some(&write_config(dir.path(), &cfg)),
        &Overrides {
            ldvn_off: true,
            ..Default::default()
        },
    )
    .unwrap();
    let unscaled = commands::grpo(&off).unwrap().history[0].log_pi_spread;
    // N = 8 channels × 4³ = 512, so the unscaled spread is √512 ≈ 22.6× larger.
    let ratio = unscaled / scaled;
    assert!((ratio - 512f64.sqrt()).abs() < 1e-6 * ratio, "{ratio}");
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny(&out);
    let config = write_config(dir.path(), &cfg);
    let run = |args: &[&str]| {
        bin()
            .arg("--config")
            .arg(&config)
            .args(args)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(run(&["warmup"]), Some(3), "no dataset yet");
    assert_eq!(run(&["generate"]), Some(0));
    assert_eq!(run(&["generate"]), Some(2), "refuses to overwrite");
    assert_eq!(run(&["generate", "--force"]), Some(0));
    assert_eq!(run(&["grpo"]), Some(2), "needs a warm-up checkpoint");
    assert_eq!(run(&["grpo", "--trajs", "1"]), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sed": 3}"#).unwrap();
    let code = bin().arg("--config").arg(&bad).arg("generate").output().unwrap().status.code();
    assert_eq!(code, Some(2));

    let mut exploding = cfg.clone();
    exploding.split.val = 0;
    exploding.warmup.lr = 1e300;
    exploding.warmup.epochs = 3;
    let path = dir.path().join("exploding.json");
    fs::write(&path, exploding.to_json()).unwrap();
    let o = bin().arg("--config").arg(&path).arg("warmup").output().unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gradient norms"));
}

#[test]
fn rerun_from_emitted_config_is_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny(a.path());
    commands::generate(&cfg, false).unwrap();
    commands::warmup(&cfg).unwrap();
    commands::grpo(&cfg).unwrap();

    let b = tempfile::tempdir().unwrap();
    let emitted = a.path().join("grpo/config.json");
    let ov = Overrides {
        out: Some(b.path().to_path_buf()),
        ..Default::default()
    };
    let again = commands::resolve_config(Some(&emitted), &ov).unwrap();
    commands::generate(&again, false).unwrap();
    commands::warmup(&again).unwrap();
    commands::grpo(&again).unwrap();
    for f in ["data/manifest.json", "warmup/metrics.csv", "warmup/checkpoint.msk", "grpo/metrics.csv", "grpo/trajectories.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
