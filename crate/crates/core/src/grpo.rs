//! Group-relative policy optimization over the latent Gaussian policy.
//!
//! The building blocks (rewards, group advantages, scaled relative
//! log-likelihoods, losses and greedy selection) are plain functions; the
//! trainers [`run_warmup`] and [`run_grpo`] drive them over a dataset.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{self, DisplacementField, Interpolation, LabelMap, Symmetry, Volume};
use crate::network::{self, LatentPolicy, Network};
use crate::objectives::{self, WarmupWeights};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_dice: f64,
    pub w_njd: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_dice: 50.0,
            w_njd: -100.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_dice > 0.0 && self.w_dice.is_finite()) {
            return Err(Error::InvalidArgument(format!("w_dice must be > 0, got {}", self.w_dice)));
        }
        if !(self.w_njd < 0.0 && self.w_njd.is_finite()) {
            return Err(Error::InvalidArgument(format!("w_njd must be < 0, got {}", self.w_njd)));
        }
        Ok(())
    }
}

/// Temperature per GRPO epoch: `max(initial·decay^epoch, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            initial: 1.0,
            decay: 0.95,
            floor: 0.1,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }

    fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.initial >= self.floor && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid temperature schedule {self:?}")));
        }
        Ok(())
    }
}

/// What the fine-tuning step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Policy loss plus the warm-up and Dice terms over sampled groups.
    #[default]
    Grpo,
    /// Warm-up and Dice terms on the deterministic `z = μ` path only; no
    /// sampling and no policy term.
    DiceOnly,
}

/// How the log-likelihood scale `s` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// `s = √N` for latent dimensionality N.
    #[default]
    SqrtN,
    Fixed(f64),
}

impl ScalePolicy {
    pub fn scale(&self, n: usize) -> f64 {
        match *self {
            ScalePolicy::SqrtN => ldvn_scale(n),
            ScalePolicy::Fixed(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_warm: f64,
    pub lambda_dice: f64,
    pub objective: Objective,
    pub tau: TauSchedule,
    pub scale: ScalePolicy,
    pub reward: RewardWeights,
    pub warmup_weights: WarmupWeights,
    pub eps: f64,
    /// Pre-flight budget for one training step's activations and gradients.
    pub memory_limit_bytes: u64,
    /// Present each pair under a seeded random grid symmetry per epoch.
    pub augment: bool,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            trajectories: 6,
            steps: 3,
            epochs: 25,
            lr: 1e-4,
            lambda_warm: 0.8,
            lambda_dice: 5.0,
            objective: Objective::Grpo,
            tau: TauSchedule::default(),
            scale: ScalePolicy::SqrtN,
            reward: RewardWeights::default(),
            warmup_weights: WarmupWeights::default(),
            eps: 1e-8,
            memory_limit_bytes: 1 << 30,
            augment: true,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objective == Objective::DiceOnly && self.trajectories == 0 {
            return Err(Error::InvalidArgument("trajectories must be >= 1".into()));
        }
        if self.objective == Objective::Grpo && self.trajectories < 2 {
            return Err(Error::InvalidArgument(format!(
                "group statistics need at least 2 trajectories, got {}",
                self.trajectories
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        for (name, v) in [("lambda_warm", self.lambda_warm), ("lambda_dice", self.lambda_dice)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let ScalePolicy::Fixed(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("fixed scale must be > 0, got {s}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        self.tau.validate()?;
        self.reward.validate()?;
        self.warmup_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weights: WarmupWeights,
    /// Present each pair under a seeded random grid symmetry per epoch.
    pub augment: bool,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            epochs: 50,
            lr: 1e-3,
            weights: WarmupWeights::default(),
            augment: true,
            seed: 0,
        }
    }
}

/// One moving/fixed pair with its label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub id: String,
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
}

impl LabeledPair {
    fn check(&self) -> Result<()> {
        let d = self.moving.dims();
        for other in [self.fixed.dims(), self.moving_labels.dims(), self.fixed_labels.dims()] {
            if other != d {
                return Err(Error::shape(&d, &other));
            }
        }
        Ok(())
    }

    fn classes(&self) -> usize {
        self.moving_labels.max_label().max(self.fixed_labels.max_label()) as usize
    }

    /// The pair with every volume and label map transformed by `s`.
    pub fn transformed(&self, s: Symmetry) -> LabeledPair {
        LabeledPair {
            id: self.id.clone(),
            moving: s.apply_volume(&self.moving),
            fixed: s.apply_volume(&self.fixed),
            moving_labels: s.apply_labels(&self.moving_labels),
            fixed_labels: s.apply_labels(&self.fixed_labels),
        }
    }
}

const AUGMENT_STREAM: u64 = 0xA5;

/// The training view of pair `index` in `epoch`: unchanged without
/// augmentation, otherwise under a seeded symmetry that keeps the grid.
fn training_view(pair: &LabeledPair, augment: bool, seed: u64, epoch: usize, index: usize) -> LabeledPair {
    if !augment {
        return pair.clone();
    }
    let pick = derive_seed(seed, &[AUGMENT_STREAM, epoch as u64, index as u64]) as usize;
    let mut s = Symmetry::from_index(pick % Symmetry::COUNT);
    if !s.preserves(pair.moving.dims()) {
        s = Symmetry::from_index(pick % 8);
    }
    pair.transformed(s)
}

/// Mixes a base seed with a path of indices into an independent stream
/// seed (SplitMix64 finaliser per component).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for &p in path {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Reward from a Dice gain and a folding fraction, both in `[0, 1]` units.
pub fn reward_value(dice_gain: f64, njd_fraction: f64, w: &RewardWeights) -> f64 {
    w.w_dice * dice_gain + w.w_njd * njd_fraction
}

/// Components of one trajectory's reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardParts {
    pub dice_prev: f64,
    pub dice: f64,
    pub njd: f64,
    pub reward: f64,
}

/// Scores a candidate total field against the previous one. Labels are
/// warped from the original moving map by each total field; Dice and NJD
/// enter as fractions.
pub fn reward(
    fixed_labels: &LabelMap,
    moving_labels: &LabelMap,
    prev: &DisplacementField,
    cand: &DisplacementField,
    w: &RewardWeights,
) -> Result<RewardParts> {
    let dice_prev = objectives::hard_dice(fixed_labels, &fields::warp_labels(moving_labels, prev)?)? / 100.0;
    let dice = objectives::hard_dice(fixed_labels, &fields::warp_labels(moving_labels, cand)?)? / 100.0;
    let njd = fields::njd_percent(cand)? / 100.0;
    Ok(RewardParts {
        dice_prev,
        dice,
        njd,
        reward: reward_value(dice - dice_prev, njd, w),
    })
}

/// Group-normalised advantages `(R − R̄)/(σ_R + ε)` with the population
/// standard deviation.
pub fn advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    let j = rewards.len();
    if j < 2 {
        return Err(Error::InvalidArgument(format!("advantages need at least 2 rewards, got {j}")));
    }
    let mean = rewards.iter().sum::<f64>() / j as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / j as f64;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// The LDVN scale `s = √N`.
pub fn ldvn_scale(n: usize) -> f64 {
    (n as f64).sqrt()
}

fn centered(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

/// Scaled log-likelihoods of a group of latents under one policy, centred
/// on their group mean.
pub fn relative_log_likelihoods(policy: &LatentPolicy, zs: &[Tensor], s: f64) -> Result<Vec<f64>> {
    if zs.is_empty() {
        return Err(Error::InvalidArgument("empty latent group".into()));
    }
    let raw = zs.iter().map(|z| network::log_pi(policy, z, s)).collect::<Result<Vec<_>>>()?;
    Ok(centered(&raw))
}

/// Tape version of [`relative_log_likelihoods`].
pub fn relative_log_likelihood_vars(
    tape: &mut Tape,
    mu: Var,
    log_sigma: Var,
    zs: &[Tensor],
    tau: f64,
    s: f64,
) -> Result<Vec<Var>> {
    if zs.is_empty() {
        return Err(Error::InvalidArgument("empty latent group".into()));
    }
    let raw = zs
        .iter()
        .map(|z| network::log_pi_var(tape, mu, log_sigma, z, tau, s))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = raw[0];
    for &r in &raw[1..] {
        sum = tape.add(sum, r)?;
    }
    let mean = tape.scale(sum, 1.0 / raw.len() as f64);
    raw.iter().map(|&r| tape.sub(r, mean)).collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::InvalidArgument(format!(
            "advantages and log-likelihoods must have equal non-zero length ({a} vs {b})"
        )));
    }
    Ok(())
}

/// `−(1/J)·Σ_j A_j·log π̃_j`.
pub fn policy_loss(adv: &[f64], rel: &[f64]) -> Result<f64> {
    check_lengths(adv.len(), rel.len())?;
    Ok(-adv.iter().zip(rel).map(|(a, l)| a * l).sum::<f64>() / adv.len() as f64)
}

/// Tape version of [`policy_loss`]; advantages enter as constants.
pub fn policy_loss_var(tape: &mut Tape, adv: &[f64], rel: &[Var]) -> Result<Var> {
    check_lengths(adv.len(), rel.len())?;
    let mut acc: Option<Var> = None;
    for (&a, &l) in adv.iter().zip(rel) {
        let term = tape.scale(l, a);
        acc = Some(match acc {
            Some(x) => tape.add(x, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), -1.0 / adv.len() as f64))
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `L_policy + λ_warm·L_warm + λ_dice·mean_j(L_dice_j)`.
pub fn grpo_total_loss(policy: f64, warm: f64, dice_losses: &[f64], lambda_warm: f64, lambda_dice: f64) -> Result<f64> {
    if dice_losses.is_empty() {
        return Err(Error::InvalidArgument("no Dice losses".into()));
    }
    Ok(policy + lambda_warm * warm + lambda_dice * mean_of(dice_losses))
}

/// Tape version of [`grpo_total_loss`].
pub fn grpo_total_loss_var(
    tape: &mut Tape,
    policy: Var,
    warm: Var,
    dice_losses: &[Var],
    lambda_warm: f64,
    lambda_dice: f64,
) -> Result<Var> {
    if dice_losses.is_empty() {
        return Err(Error::InvalidArgument("no Dice losses".into()));
    }
    let mut sum = dice_losses[0];
    for &d in &dice_losses[1..] {
        sum = tape.add(sum, d)?;
    }
    let dice = tape.scale(sum, lambda_dice / dice_losses.len() as f64);
    let w = tape.scale(warm, lambda_warm);
    let total = tape.add(policy, w)?;
    tape.add(total, dice)
}

/// Index of the highest reward; ties go to the smallest index.
pub fn greedy_select(rewards: &[f64]) -> usize {
    let mut best = 0;
    for (j, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = j;
        }
    }
    best
}

/// Records `step + prev∘(x + step)` on the tape; `prev` is usually a
/// constant.
pub fn compose_var(tape: &mut Tape, prev: Var, step: Var) -> Result<Var> {
    let moved = tape.warp(prev, step)?;
    tape.add(step, moved)
}

/// One trajectory of a group.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub eps: Tensor,
    pub z: Tensor,
    pub step_field: DisplacementField,
    pub total_field: DisplacementField,
    pub reward: RewardParts,
    pub advantage: f64,
    pub log_pi_rel: f64,
}

/// A group of trajectories sampled from one state, with group statistics.
#[derive(Debug, Clone)]
pub struct TrajectoryGroup {
    pub trajectories: Vec<Trajectory>,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Mean of the scaled log-likelihoods before centring.
    pub log_pi_mean: f64,
}

impl TrajectoryGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward.reward).collect()
    }

    pub fn selected(&self) -> usize {
        greedy_select(&self.rewards())
    }

    /// Population standard deviation of the centred log-likelihoods.
    pub fn log_pi_spread(&self) -> f64 {
        let v: Vec<f64> = self.trajectories.iter().map(|t| t.log_pi_rel).collect();
        let m = mean_of(&v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub epoch: usize,
    pub pair: String,
    pub step: usize,
    pub trajectory: usize,
    pub seed: u64,
    pub tau: f64,
    pub dice_prev: f64,
    pub dice: f64,
    pub njd: f64,
    pub reward: f64,
    pub advantage: f64,
    pub log_pi_rel: f64,
    pub selected: bool,
}

/// Result of deterministic multi-step inference.
#[derive(Debug, Clone)]
pub struct Inference {
    pub field: DisplacementField,
    pub warped: Volume,
    pub steps: Vec<StepMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Hard Dice in percent, when labels were supplied.
    pub dice: Option<f64>,
    pub njd: f64,
}

/// Runs `steps` deterministic (`z = μ`) refinement steps. Each step
/// re-encodes the original moving image warped by the running total field.
pub fn infer_multistep(
    net: &Network,
    moving: &Volume,
    fixed: &Volume,
    labels: Option<(&LabelMap, &LabelMap)>,
    steps: usize,
) -> Result<Inference> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let mut total = DisplacementField::zeros(moving.dims());
    let mut warped = moving.clone();
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        let (_, u) = net.predict(&warped, fixed)?;
        total = fields::compose(&total, &u)?;
        warped = fields::warp_volume(moving, &total, Interpolation::Trilinear)?;
        let dice = match labels {
            Some((moving_labels, fixed_labels)) => Some(objectives::hard_dice(
                fixed_labels,
                &fields::warp_labels(moving_labels, &total)?,
            )?),
            None => None,
        };
        out.push(StepMetrics {
            step,
            dice,
            njd: fields::njd_percent(&total)?,
        });
    }
    Ok(Inference {
        field: total,
        warped,
        steps: out,
    })
}

/// Mean final Dice (percent) and NJD (percent) over `pairs` after `steps`
/// inference steps.
pub fn evaluate(net: &Network, pairs: &[LabeledPair], steps: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut dice = 0.0;
    let mut njd = 0.0;
    for p in pairs {
        let inf = infer_multistep(net, &p.moving, &p.fixed, Some((&p.moving_labels, &p.fixed_labels)), steps)?;
        let last = inf.steps.last().expect("steps >= 1");
        dice += last.dice.expect("labels supplied");
        njd += last.njd;
    }
    Ok((dice / pairs.len() as f64, njd / pairs.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub similarity: f64,
    pub regularizer: f64,
    pub kl: f64,
    pub val_dice: f64,
    pub val_njd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoEpoch {
    pub epoch: usize,
    pub tau: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub warm_loss: f64,
    pub dice_loss: f64,
    pub mean_reward: f64,
    /// Mean within-group spread of the centred log-likelihoods.
    pub log_pi_spread: f64,
    pub val_dice: f64,
    pub val_njd: f64,
}

fn grad_norms(net: &Network, grads: &HashMap<ParamId, Tensor>) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = grads
        .iter()
        .map(|(&id, g)| (net.params().name(id).to_string(), g.norm()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn numeric_abort(what: &str, loss: f64, config: &impl Serialize, norms: &[(String, f64)]) -> Error {
    let cfg = serde_json::to_string(config).unwrap_or_default();
    let norms: Vec<String> = norms.iter().map(|(n, v)| format!("{n}={v:.3e}")).collect();
    Error::NumericAbort(format!(
        "non-finite loss {loss} at {what}; config {cfg}; last gradient norms [{}]",
        norms.join(", ")
    ))
}

fn apply_update(
    net: &mut Network,
    opt: Option<&mut Adam>,
    grads: &Gradients,
    last_norms: &mut Vec<(String, f64)>,
) -> Result<Option<String>> {
    let g = grads.params();
    *last_norms = grad_norms(net, &g);
    if let Some((name, _)) = last_norms.iter().find(|(_, v)| !v.is_finite()) {
        return Ok(Some(name.clone()));
    }
    if let Some(opt) = opt {
        opt.step(net.params_mut(), &g)?;
    }
    Ok(None)
}

/// Unsupervised warm-up: one Adam step per pair on the `z = μ` objective.
/// Validation reports single-step Dice/NJD after every epoch.
pub fn run_warmup(
    net: &mut Network,
    train: &[LabeledPair],
    val: &[LabeledPair],
    cfg: &WarmupConfig,
) -> Result<Vec<WarmupEpoch>> {
    cfg.weights.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("warm-up needs at least one training pair".into()));
    }
    for p in train.iter().chain(val) {
        p.check()?;
    }
    let mut opt = Adam::new(net.params(), cfg.lr)?;
    let mut last_norms = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 4];
        for (i, p) in train.iter().enumerate() {
            let p = &training_view(p, cfg.augment, cfg.seed, epoch, i);
            let mut tape = Tape::new();
            let b = net.bind(&mut tape);
            let enc = net.encode(&mut tape, &b, &p.moving, &p.fixed)?;
            let u = net.decode(&mut tape, &b, &enc.skips, enc.mu)?;
            let terms = objectives::warmup_var(&mut tape, &p.fixed, &p.moving, u, u, enc.mu, enc.log_sigma, &cfg.weights)?;
            let loss = tape.value(terms.total).item();
            if !loss.is_finite() {
                return Err(numeric_abort(&format!("warm-up epoch {epoch} pair {i}"), loss, cfg, &last_norms));
            }
            let grads = tape.backward(terms.total)?;
            if let Some(name) = apply_update(net, Some(&mut opt), &grads, &mut last_norms)? {
                return Err(numeric_abort(
                    &format!("warm-up epoch {epoch} pair {i} (gradient of {name})"),
                    loss,
                    cfg,
                    &last_norms,
                ));
            }
            for (s, v) in sums.iter_mut().zip([terms.total, terms.similarity, terms.regularizer, terms.kl]) {
                *s += tape.value(v).item();
            }
        }
        let n = train.len() as f64;
        let (val_dice, val_njd) = evaluate(net, val, 1)?;
        history.push(WarmupEpoch {
            epoch,
            loss: sums[0] / n,
            similarity: sums[1] / n,
            regularizer: sums[2] / n,
            kl: sums[3] / n,
            val_dice,
            val_njd,
        });
    }
    Ok(history)
}

/// Rough peak memory of one GRPO step in bytes: activations and their
/// gradients for the encoder, `J + 1` decoder passes and the per-trajectory
/// warps and Dice terms.
pub fn estimate_step_memory(net: &Network, dims: [usize; 3], classes: usize, trajectories: usize) -> u64 {
    let cfg = net.config();
    let voxels = |l: usize| -> u64 { dims.iter().map(|&d| (d >> l) as u64).product() };
    let mut encoder = 2 * voxels(0);
    for l in 0..cfg.levels {
        encoder += 2 * cfg.channels[l] as u64 * voxels(l);
    }
    encoder += 4 * cfg.channels[cfg.levels - 1] as u64 * voxels(cfg.levels - 1);
    let mut decoder = 0;
    for l in (0..cfg.levels - 1).rev() {
        let c_in = cfg.channels[l + 1] as u64;
        let c = cfg.channels[l] as u64;
        decoder += voxels(l) * (c_in + (c_in + c) + 2 * c);
    }
    decoder += voxels(0) * (3 * 4 + 4 * classes as u64);
    let elems = encoder + (trajectories as u64 + 1) * decoder;
    2 * 8 * elems + 8 * net.params().total_elements() as u64 * 4
}

fn preflight(net: &Network, pair: &LabeledPair, cfg: &GrpoConfig) -> Result<()> {
    let est = estimate_step_memory(net, pair.moving.dims(), pair.classes().max(1), cfg.trajectories);
    if est > cfg.memory_limit_bytes {
        return Err(Error::OutOfMemory {
            estimated: est,
            limit: cfg.memory_limit_bytes,
        });
    }
    Ok(())
}

struct StepOutcome {
    group: TrajectoryGroup,
    loss: f64,
    policy: f64,
    warm: f64,
    dice: f64,
}

#[allow(clippy::too_many_arguments)]
fn grpo_step(
    net: &mut Network,
    opt: Option<&mut Adam>,
    pair: &LabeledPair,
    onehots: &(Tensor, Tensor),
    prev: &DisplacementField,
    tau: f64,
    seeds: &[u64],
    cfg: &GrpoConfig,
    last_norms: &mut Vec<(String, f64)>,
    site: &str,
) -> Result<StepOutcome> {
    let sampling = cfg.objective == Objective::Grpo;
    let tau = if sampling { tau } else { 0.0 };
    let state = fields::warp_volume(&pair.moving, prev, Interpolation::Trilinear)?;
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let enc = net.encode(&mut tape, &b, &state, &pair.fixed)?;
    let policy = net.policy(&tape, &enc, tau);
    let s = cfg.scale.scale(policy.dim());
    let prev_c = tape.constant(prev.tensor().clone());

    let u0 = net.decode(&mut tape, &b, &enc.skips, enc.mu)?;
    let total0 = compose_var(&mut tape, prev_c, u0)?;
    let warm = objectives::warmup_var(
        &mut tape,
        &pair.fixed,
        &pair.moving,
        total0,
        u0,
        enc.mu,
        enc.log_sigma,
        &cfg.warmup_weights,
    )?;

    let dice_prev =
        objectives::hard_dice(&pair.fixed_labels, &fields::warp_labels(&pair.moving_labels, prev)?)? / 100.0;
    let mut zs = Vec::with_capacity(seeds.len());
    let mut partial = Vec::with_capacity(seeds.len());
    let mut dice_vars = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let eps = network::standard_normal(policy.mu.shape(), seed);
        let z = network::reparameterize(&mut tape, enc.mu, enc.log_sigma, &eps, tau)?;
        let phi = net.decode(&mut tape, &b, &enc.skips, z)?;
        let total = compose_var(&mut tape, prev_c, phi)?;
        dice_vars.push(objectives::soft_dice_var(&mut tape, &onehots.0, &onehots.1, total)?);
        let total_field = DisplacementField::new(tape.value(total).clone())?;
        let dice = objectives::hard_dice(&pair.fixed_labels, &fields::warp_labels(&pair.moving_labels, &total_field)?)?
            / 100.0;
        let njd = fields::njd_percent(&total_field)? / 100.0;
        let parts = RewardParts {
            dice_prev,
            dice,
            njd,
            reward: reward_value(dice - dice_prev, njd, &cfg.reward),
        };
        zs.push(tape.value(z).clone());
        partial.push((seed, eps, DisplacementField::new(tape.value(phi).clone())?, total_field, parts));
    }

    let rewards: Vec<f64> = partial.iter().map(|p| p.4.reward).collect();
    let (adv, rel, pl) = if sampling {
        let adv = advantages(&rewards, cfg.eps)?;
        let rel = relative_log_likelihood_vars(&mut tape, enc.mu, enc.log_sigma, &zs, tau, s)?;
        let pl = policy_loss_var(&mut tape, &adv, &rel)?;
        (adv, rel, pl)
    } else {
        let zero = tape.constant(Tensor::scalar(0.0));
        (vec![0.0; zs.len()], vec![zero; zs.len()], zero)
    };
    let total = grpo_total_loss_var(&mut tape, pl, warm.total, &dice_vars, cfg.lambda_warm, cfg.lambda_dice)?;

    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(numeric_abort(site, loss, cfg, last_norms));
    }
    let rel_values: Vec<f64> = rel.iter().map(|&v| tape.value(v).item()).collect();
    let raw_mean = if sampling {
        zs.iter()
            .map(|z| network::log_pi(&policy, z, s))
            .collect::<Result<Vec<_>>>()
            .map(|v| mean_of(&v))?
    } else {
        0.0
    };
    let dice_loss = mean_of(&dice_vars.iter().map(|&v| tape.value(v).item()).collect::<Vec<_>>());
    let policy_value = tape.value(pl).item();
    let warm_value = tape.value(warm.total).item();

    let grads = tape.backward(total)?;
    if let Some(name) = apply_update(net, opt, &grads, last_norms)? {
        return Err(numeric_abort(&format!("{site} (gradient of {name})"), loss, cfg, last_norms));
    }

    let m = mean_of(&rewards);
    let sd = (rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / rewards.len() as f64).sqrt();
    let trajectories = partial
        .into_iter()
        .zip(zs)
        .zip(adv.iter().zip(&rel_values))
        .map(|(((seed, eps, step_field, total_field, reward), z), (&advantage, &log_pi_rel))| Trajectory {
            seed,
            eps,
            z,
            step_field,
            total_field,
            reward,
            advantage,
            log_pi_rel,
        })
        .collect();
    Ok(StepOutcome {
        group: TrajectoryGroup {
            trajectories,
            reward_mean: m,
            reward_std: sd,
            log_pi_mean: raw_mean,
        },
        loss,
        policy: policy_value,
        warm: warm_value,
        dice: dice_loss,
    })
}

/// GRPO fine-tuning. For every pair the running field starts at zero; each
/// of the `T` steps samples `J` latents from the current state, takes one
/// optimizer step on the combined loss and then moves the state to the
/// best-rewarded trajectory. Adam moments start fresh. `log` receives one
/// record per trajectory.
pub fn run_grpo(
    net: &mut Network,
    train: &[LabeledPair],
    val: &[LabeledPair],
    cfg: &GrpoConfig,
    log: &mut dyn FnMut(&TrajectoryRecord) -> Result<()>,
) -> Result<Vec<GrpoEpoch>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("GRPO needs at least one labeled pair".into()));
    }
    for p in train.iter().chain(val) {
        p.check()?;
    }
    for p in train {
        preflight(net, p, cfg)?;
    }
    let mut opt = if cfg.lr > 0.0 {
        Some(Adam::new(net.params(), cfg.lr)?)
    } else {
        None
    };
    let mut last_norms = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let tau = match cfg.objective {
            Objective::Grpo => cfg.tau.at(epoch - 1),
            Objective::DiceOnly => 0.0,
        };
        let mut sums = [0.0; 6];
        let mut count = 0.0;
        for (pi, pair) in train.iter().enumerate() {
            let pair = &training_view(pair, cfg.augment, cfg.seed, epoch, pi);
            let k = pair.classes().max(1);
            let onehots = (pair.fixed_labels.one_hot(k)?, pair.moving_labels.one_hot(k)?);
            let mut phi = DisplacementField::zeros(pair.moving.dims());
            for step in 1..=cfg.steps {
                let seeds: Vec<u64> = (0..cfg.trajectories)
                    .map(|j| derive_seed(cfg.seed, &[epoch as u64, pi as u64, step as u64, j as u64]))
                    .collect();
                let site = format!("GRPO epoch {epoch} pair {} step {step}", pair.id);
                let mut out = grpo_step(net, opt.as_mut(), pair, &onehots, &phi, tau, &seeds, cfg, &mut last_norms, &site)?;
                let best = out.group.selected();
                for (j, t) in out.group.trajectories.iter().enumerate() {
                    log(&TrajectoryRecord {
                        epoch,
                        pair: pair.id.clone(),
                        step,
                        trajectory: j,
                        seed: t.seed,
                        tau,
                        dice_prev: t.reward.dice_prev,
                        dice: t.reward.dice,
                        njd: t.reward.njd,
                        reward: t.reward.reward,
                        advantage: t.advantage,
                        log_pi_rel: t.log_pi_rel,
                        selected: j == best,
                    })?;
                }
                for (s, v) in sums.iter_mut().zip([
                    out.loss,
                    out.policy,
                    out.warm,
                    out.dice,
                    out.group.reward_mean,
                    out.group.log_pi_spread(),
                ]) {
                    *s += v;
                }
                count += 1.0;
                phi = out.group.trajectories.swap_remove(best).total_field;
            }
        }
        let (val_dice, val_njd) = evaluate(net, val, cfg.steps)?;
        history.push(GrpoEpoch {
            epoch,
            tau,
            loss: sums[0] / count,
            policy_loss: sums[1] / count,
            warm_loss: sums[2] / count,
            dice_loss: sums[3] / count,
            mean_reward: sums[4] / count,
            log_pi_spread: sums[5] / count,
            val_dice,
            val_njd,
        });
    }
    Ok(history)
}
