//! Subcommand implementations. Each stage writes into its own directory
//! under the experiment's `out` and leaves a copy of the resolved config
//! plus a provenance record next to its results.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use latreg::grpo::{
    derive_seed, evaluate, infer_multistep, run_grpo, run_warmup, GrpoConfig, GrpoEpoch, LabeledPair, Objective,
    ScalePolicy, TrajectoryRecord, WarmupEpoch,
};
use latreg::io;
use latreg::network::Network;
use latreg::oracles::{ldvn_variance_probe, ProbeTable};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::dataset::{self, Dataset, Manifest};
use crate::error::CliError;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const NET_STREAM: u64 = 1;
const WARMUP_STREAM: u64 = 2;
const GRPO_STREAM: u64 = 3;
const PROBE_STREAM: u64 = 4;

/// Command-line flags that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_warmup: bool,
    pub ldvn_off: bool,
    pub steps: Option<usize>,
    pub trajectories: Option<usize>,
}

/// Loads the config (or the defaults), applies the flags and validates.
pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.out = out.clone();
    }
    if ov.no_warmup {
        cfg.no_warmup = true;
    }
    if ov.ldvn_off {
        cfg.grpo.scale = ScalePolicy::Fixed(1.0);
    }
    if let Some(t) = ov.steps {
        cfg.grpo.steps = t;
    }
    if let Some(j) = ov.trajectories {
        cfg.grpo.trajectories = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub checkpoint: Option<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(io::write_atomic(path, &bytes)?)
}

/// Writes `config.json` and `provenance.json` into `dir`.
fn stamp(dir: &Path, command: &str, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let text = cfg.to_json();
    io::write_atomic(&dir.join("config.json"), text.as_bytes())?;
    write_json(
        &dir.join("provenance.json"),
        &Provenance {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            seed: cfg.seed,
            config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
            checkpoint: checkpoint.map(|p| p.display().to_string()),
        },
    )
}

fn fresh_network(cfg: &ExperimentConfig) -> Result<Network, CliError> {
    Ok(Network::new(cfg.backbone.clone(), derive_seed(cfg.seed, &[NET_STREAM]))?)
}

fn load_network(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Network, CliError> {
    if !checkpoint.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let mut net = fresh_network(cfg)?;
    let params = io::load_checkpoint(checkpoint)?;
    net.params_mut().load_from(&params)?;
    Ok(net)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let (manifest, ds) = dataset::load(&cfg.out)?;
    if manifest.scene.dims != cfg.scene.dims {
        return Err(CliError::Config(format!(
            "dataset volumes are {:?} but the config expects {:?}",
            manifest.scene.dims, cfg.scene.dims
        )));
    }
    Ok(ds)
}

pub fn warmup_dir(out: &Path) -> PathBuf {
    out.join("warmup")
}

pub fn grpo_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(if cfg.no_warmup { "grpo-nowarmup" } else { "grpo" })
}

pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<Manifest, CliError> {
    let manifest = dataset::generate(cfg, force)?;
    stamp(&dataset::data_dir(&cfg.out), "generate", cfg, None)?;
    Ok(manifest)
}

/// Mean test Dice and NJD after `steps` inference steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub steps: usize,
    pub dice: f64,
    pub njd: f64,
}

fn score_steps(net: &Network, pairs: &[LabeledPair], max_steps: usize) -> Result<Vec<StepScore>, CliError> {
    (1..=max_steps)
        .map(|steps| {
            let (dice, njd) = evaluate(net, pairs, steps)?;
            Ok(StepScore { steps, dice, njd })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct WarmupRow {
    epoch: usize,
    loss: f64,
    similarity: f64,
    regularizer: f64,
    kl: f64,
    val_dice: f64,
    val_njd: f64,
    /// Warm-up always decodes `z = μ`.
    tau: f64,
}

impl From<&WarmupEpoch> for WarmupRow {
    fn from(e: &WarmupEpoch) -> Self {
        WarmupRow {
            epoch: e.epoch,
            loss: e.loss,
            similarity: e.similarity,
            regularizer: e.regularizer,
            kl: e.kl,
            val_dice: e.val_dice,
            val_njd: e.val_njd,
            tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub epochs: usize,
    pub final_val_dice: f64,
    pub final_val_njd: f64,
    pub test: Vec<StepScore>,
}

/// Unsupervised warm-up on the unlabeled split; writes
/// `warmup/{checkpoint.msk,metrics.csv,summary.json}`.
pub fn warmup(cfg: &ExperimentConfig) -> Result<WarmupSummary, CliError> {
    let ds = load_data(cfg)?;
    let dir = warmup_dir(&cfg.out);
    fs::create_dir_all(&dir)?;
    stamp(&dir, "warmup", cfg, None)?;
    let mut net = fresh_network(cfg)?;
    let mut wcfg = cfg.warmup.clone();
    wcfg.seed = derive_seed(cfg.seed, &[WARMUP_STREAM, cfg.warmup.seed]);
    let history = run_warmup(&mut net, &ds.unlabeled, &ds.val, &wcfg)?;
    let rows: Vec<WarmupRow> = history.iter().map(WarmupRow::from).collect();
    write_csv(&dir.join("metrics.csv"), &rows)?;
    io::save_checkpoint(&dir.join("checkpoint.msk"), net.params())?;
    let last = history.last();
    let summary = WarmupSummary {
        epochs: history.len(),
        final_val_dice: last.map_or(f64::NAN, |e| e.val_dice),
        final_val_njd: last.map_or(f64::NAN, |e| e.val_njd),
        test: score_steps(&net, &ds.test, cfg.grpo.steps.max(3))?,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoSummary {
    pub warm_start: bool,
    pub initial_val_dice: f64,
    pub initial_val_njd: f64,
    pub history: Vec<GrpoEpoch>,
    pub test: Vec<StepScore>,
}

/// Starting network for fine-tuning: the warm-up checkpoint, or a fresh
/// initialization when warm-up is disabled.
fn starting_network(cfg: &ExperimentConfig) -> Result<(Network, Option<PathBuf>), CliError> {
    if cfg.no_warmup {
        return Ok((fresh_network(cfg)?, None));
    }
    let ck = warmup_dir(&cfg.out).join("checkpoint.msk");
    if !ck.exists() {
        return Err(CliError::Config(format!(
            "{} not found: run `warmup` first or pass --no-warmup",
            ck.display()
        )));
    }
    Ok((load_network(cfg, &ck)?, Some(ck)))
}

fn grpo_config(cfg: &ExperimentConfig, g: &GrpoConfig) -> GrpoConfig {
    GrpoConfig {
        seed: derive_seed(cfg.seed, &[GRPO_STREAM, g.seed]),
        ..g.clone()
    }
}

/// Trajectory log writer: one JSON object per line.
struct TrajectoryLog(BufWriter<File>);

impl TrajectoryLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        Ok(TrajectoryLog(BufWriter::new(File::create(path)?)))
    }

    fn record(&mut self, r: &TrajectoryRecord) -> latreg::Result<()> {
        serde_json::to_writer(&mut self.0, r)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        Ok(self.0.flush()?)
    }
}

/// GRPO fine-tuning on the labeled split; writes
/// `grpo[-nowarmup]/{checkpoint.msk,metrics.csv,trajectories.jsonl,summary.json}`.
pub fn grpo(cfg: &ExperimentConfig) -> Result<GrpoSummary, CliError> {
    let ds = load_data(cfg)?;
    let (mut net, ck) = starting_network(cfg)?;
    let dir = grpo_dir(cfg);
    fs::create_dir_all(&dir)?;
    stamp(&dir, "grpo", cfg, ck.as_deref())?;
    let gcfg = grpo_config(cfg, &cfg.grpo);
    let (initial_val_dice, initial_val_njd) = evaluate(&net, &ds.val, gcfg.steps)?;
    let mut log = TrajectoryLog::create(&dir.join("trajectories.jsonl"))?;
    let history = run_grpo(&mut net, &ds.labeled, &ds.val, &gcfg, &mut |r| log.record(r))?;
    log.finish()?;
    write_csv(&dir.join("metrics.csv"), &history)?;
    io::save_checkpoint(&dir.join("checkpoint.msk"), net.params())?;
    let summary = GrpoSummary {
        warm_start: !cfg.no_warmup,
        initial_val_dice,
        initial_val_njd,
        test: score_steps(&net, &ds.test, gcfg.steps)?,
        history,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// The most trained checkpoint available when none is given explicitly.
pub fn default_checkpoint(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    [grpo_dir(cfg), warmup_dir(&cfg.out)]
        .into_iter()
        .map(|d| d.join("checkpoint.msk"))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::Config("no checkpoint found: run `warmup` or `grpo` first, or pass --checkpoint".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub pair: String,
    pub step: usize,
    pub dice: f64,
    pub njd: f64,
}

/// Multi-step inference on the test split; writes per-pair per-step rows,
/// per-step means and the final fields.
pub fn infer(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<StepScore>, CliError> {
    let ds = load_data(cfg)?;
    let ck = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(cfg)?,
    };
    let net = load_network(cfg, &ck)?;
    let dir = cfg.out.join("infer");
    fs::create_dir_all(dir.join("fields"))?;
    stamp(&dir, "infer", cfg, Some(&ck))?;
    let steps = cfg.grpo.steps;
    let mut rows = Vec::new();
    let mut means = vec![StepScore { steps: 0, dice: 0.0, njd: 0.0 }; steps];
    for p in &ds.test {
        let inf = infer_multistep(&net, &p.moving, &p.fixed, Some((&p.moving_labels, &p.fixed_labels)), steps)?;
        for (m, s) in means.iter_mut().zip(&inf.steps) {
            let dice = s.dice.expect("labels supplied");
            m.steps = s.step;
            m.dice += dice;
            m.njd += s.njd;
            rows.push(StepRow {
                pair: p.id.clone(),
                step: s.step,
                dice,
                njd: s.njd,
            });
        }
        io::write_field(&dir.join("fields").join(format!("{}.field.msv", p.id)), &inf.field)?;
    }
    let n = ds.test.len().max(1) as f64;
    for m in &mut means {
        m.dice /= n;
        m.njd /= n;
    }
    write_csv(&dir.join("steps.csv"), &rows)?;
    write_csv(&dir.join("summary.csv"), &means)?;
    Ok(means)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; NaN for an empty slice.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair: String,
    pub dice: f64,
    pub njd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub steps: usize,
    pub pairs: Vec<PairScore>,
    pub dice: MeanStd,
    pub njd: MeanStd,
}

fn score_pairs(net: &Network, pairs: &[LabeledPair], steps: usize) -> Result<Vec<PairScore>, CliError> {
    pairs
        .iter()
        .map(|p| {
            let inf = infer_multistep(net, &p.moving, &p.fixed, Some((&p.moving_labels, &p.fixed_labels)), steps)?;
            let last = inf.steps.last().expect("steps >= 1");
            Ok(PairScore {
                pair: p.id.clone(),
                dice: last.dice.expect("labels supplied"),
                njd: last.njd,
            })
        })
        .collect()
}

fn aggregate(scores: &[PairScore]) -> (MeanStd, MeanStd) {
    let dice: Vec<f64> = scores.iter().map(|s| s.dice).collect();
    let njd: Vec<f64> = scores.iter().map(|s| s.njd).collect();
    (MeanStd::of(&dice), MeanStd::of(&njd))
}

/// Test-split evaluation at `grpo.steps` inference steps; writes
/// `eval/eval.json`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport, CliError> {
    let ds = load_data(cfg)?;
    let ck = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(cfg)?,
    };
    let net = load_network(cfg, &ck)?;
    let dir = cfg.out.join("eval");
    fs::create_dir_all(&dir)?;
    stamp(&dir, "eval", cfg, Some(&ck))?;
    let pairs = score_pairs(&net, &ds.test, cfg.grpo.steps)?;
    let (dice, njd) = aggregate(&pairs);
    let report = EvalReport {
        checkpoint: ck.display().to_string(),
        steps: cfg.grpo.steps,
        pairs,
        dice,
        njd,
    };
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Grid,
    Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub trajectories: usize,
    pub steps: usize,
    /// `ok` or `OOM`.
    pub status: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub njd_mean: f64,
    pub njd_std: f64,
    /// Final-epoch within-group spread of the centred log-likelihoods.
    pub log_pi_spread: f64,
}

impl AblationRow {
    pub fn is_oom(&self) -> bool {
        self.status == "OOM"
    }
}

/// Fine-tunes a copy of the starting network with `g` and scores the test
/// split at `g.steps` steps. A failed memory pre-flight yields an `OOM` row.
fn ablation_cell(
    cfg: &ExperimentConfig,
    start: &Network,
    ds: &Dataset,
    cell: &str,
    g: &GrpoConfig,
) -> Result<AblationRow, CliError> {
    let mut net = start.clone();
    let mut spread = 0.0;
    if g.epochs > 0 {
        let gcfg = grpo_config(cfg, g);
        match run_grpo(&mut net, &ds.labeled, &ds.val, &gcfg, &mut |_| Ok(())) {
            Ok(h) => spread = h.last().map_or(0.0, |e| e.log_pi_spread),
            Err(latreg::Error::OutOfMemory { .. }) => {
                return Ok(AblationRow {
                    cell: cell.to_string(),
                    trajectories: g.trajectories,
                    steps: g.steps,
                    status: "OOM".into(),
                    dice_mean: f64::NAN,
                    dice_std: f64::NAN,
                    njd_mean: f64::NAN,
                    njd_std: f64::NAN,
                    log_pi_spread: f64::NAN,
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    let (dice, njd) = aggregate(&score_pairs(&net, &ds.test, g.steps)?);
    Ok(AblationRow {
        cell: cell.to_string(),
        trajectories: g.trajectories,
        steps: g.steps,
        status: "ok".into(),
        dice_mean: dice.mean,
        dice_std: dice.std,
        njd_mean: njd.mean,
        njd_std: njd.std,
        log_pi_spread: spread,
    })
}

/// Grid mode sweeps `J × T` plus the extra cells; components mode climbs
/// from the warm-started Gaussian head to full GRPO. Writes
/// `ablate/{grid,components}.csv`.
pub fn ablate(cfg: &ExperimentConfig, mode: AblationMode) -> Result<Vec<AblationRow>, CliError> {
    let ds = load_data(cfg)?;
    let (start, ck) = starting_network(cfg)?;
    let dir = cfg.out.join("ablate");
    fs::create_dir_all(&dir)?;
    let base = GrpoConfig {
        epochs: cfg.ablation.epochs,
        ..cfg.grpo.clone()
    };
    let cells: Vec<(String, GrpoConfig)> = match mode {
        AblationMode::Grid => {
            let mut cells = Vec::new();
            for &j in &cfg.ablation.trajectories {
                for &t in &cfg.ablation.steps {
                    cells.push([j, t]);
                }
            }
            cells.extend(cfg.ablation.extra_cells.iter().copied());
            cells
                .into_iter()
                .map(|[j, t]| {
                    let g = GrpoConfig {
                        trajectories: j,
                        steps: t,
                        ..base.clone()
                    };
                    (format!("J={j},T={t}"), g)
                })
                .collect()
        }
        AblationMode::Components => {
            let dice_only = |steps| GrpoConfig {
                objective: Objective::DiceOnly,
                trajectories: 1,
                steps,
                ..base.clone()
            };
            vec![
                ("gaussian-head-only".into(), GrpoConfig { epochs: 0, steps: 1, ..base.clone() }),
                ("+dice".into(), dice_only(1)),
                ("+multi-step".into(), dice_only(base.steps)),
                ("+grpo-full".into(), base.clone()),
            ]
        }
    };
    let (command, file) = match mode {
        AblationMode::Grid => ("ablate --mode grid", "grid.csv"),
        AblationMode::Components => ("ablate --mode components", "components.csv"),
    };
    stamp(&dir, command, cfg, ck.as_deref())?;
    let mut rows = Vec::with_capacity(cells.len());
    for (name, g) in &cells {
        g.validate()?;
        rows.push(ablation_cell(cfg, &start, &ds, name, g)?);
    }
    write_csv(&dir.join(file), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProbeCsvRow {
    #[serde(rename = "N")]
    n: usize,
    std_unscaled: f64,
    std_scaled: f64,
    exponent: f64,
}

/// Monte-Carlo log-likelihood spread versus latent dimension; writes
/// `probe/ldvn.csv`.
pub fn probe_ldvn(cfg: &ExperimentConfig) -> Result<ProbeTable, CliError> {
    let p = &cfg.probe;
    let table = ldvn_variance_probe(&p.dims, p.groups, p.trajectories, derive_seed(cfg.seed, &[PROBE_STREAM]))?;
    let dir = cfg.out.join("probe");
    fs::create_dir_all(&dir)?;
    stamp(&dir, "probe-ldvn", cfg, None)?;
    let rows: Vec<ProbeCsvRow> = table
        .rows
        .iter()
        .map(|r| ProbeCsvRow {
            n: r.n,
            std_unscaled: r.std_unscaled,
            std_scaled: r.std_scaled,
            exponent: table.exponent,
        })
        .collect();
    write_csv(&dir.join("ldvn.csv"), &rows)?;
    Ok(table)
}
