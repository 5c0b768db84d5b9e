//! Training objectives: clipped forward-KL distillation against steered
//! teachers, positive-tail SFT, the privileged-distillation baseline,
//! ablation objectives, a group-advantage policy-gradient baseline, and
//! plain SFT.
//!
//! Teacher quantities enter every loss as detached arrays; gradients flow
//! only through the student's differentiable forward pass.

use crate::error::{Error, Result};
use crate::guidance::{
    anchor_logits, member_logits, pool_mean_logits, teacher_distribution,
    GuidanceConfig, SteeredTeacherDist,
};
use crate::rollout::RolloutGroup;
use crate::seqmodel::{diff::DiffModel, ModelParams, TokenId};
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

const LOG_EPS: f64 = 1e-12;
const STD_EPS: f64 = 1e-6;

/// What the symmetric divergence clamp applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp each per-vocab summand p_T(v)(log p_T(v) - log p_theta(v)).
    Summand,
    /// Clamp the per-position total divergence instead.
    PositionTotal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Symmetric clamp threshold; 0 disables clipping.
    pub clip_tau: f64,
    pub clip_mode: ClipMode,
    /// Distillation horizon H; per-rollout horizon is min(|y|, H).
    pub max_horizon: usize,
    /// Positive-tail SFT window K (last K tokens of a correct rollout).
    pub pos_window: usize,
    /// Correct rollouts longer than this are excluded from the tail loss.
    pub pos_max_len: usize,
    pub eta0: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clip_tau: 0.05,
            clip_mode: ClipMode::Summand,
            max_horizon: 64,
            pos_window: 16,
            pos_max_len: 128,
            eta0: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_tau < 0.0 || self.eta0 < 0.0 {
            return Err(Error::Config("clip_tau and eta0 must be >= 0".into()));
        }
        if self.max_horizon == 0 {
            return Err(Error::Config("max_horizon must be >= 1".into()));
        }
        Ok(())
    }
}

fn effective_tau(tau: f64) -> f64 {
    if tau <= 0.0 {
        f64::INFINITY
    } else {
        tau
    }
}

fn check_rows_normalized(p: &Array2<f64>) -> Result<()> {
    for (t, row) in p.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "teacher distribution row {t} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of the clipped forward KL from detached teacher rows to
/// student log-probability rows. Returns the scalar loss and the number of
/// clamped terms.
pub fn clipped_kl_rows<'t>(
    tape: &'t Tape,
    teacher_probs: &Array2<f64>,
    student_logprobs: &Var<'t>,
    tau: f64,
    mode: ClipMode,
) -> Result<(Var<'t>, usize)> {
    let (h, v) = (teacher_probs.nrows(), teacher_probs.ncols());
    if student_logprobs.shape() != [h, v] {
        return Err(Error::Shape(format!(
            "teacher rows {h}x{v} vs student log-probs {:?}",
            student_logprobs.shape()
        )));
    }
    check_rows_normalized(teacher_probs)?;
    let ln_pt = teacher_probs.mapv(|p| p.max(LOG_EPS).ln()).into_dyn();
    let pt = teacher_probs.clone().into_dyn();
    // summand delta_t(v) = p_T(v) (log p_T(v) - log p_theta(v));
    // entries with p_T(v) = 0 vanish exactly via the final product
    let delta = student_logprobs
        .clamp_min_detach(LOG_EPS.ln())
        .neg()
        .add_const(&ln_pt)
        .mul_const(&pt);
    let bound = effective_tau(tau);
    let (total, n_clipped) = match mode {
        ClipMode::Summand => {
            let (clipped, n) = delta.clamp_sym_detach(bound);
            (clipped.sum(), n)
        }
        ClipMode::PositionTotal => {
            let ones = tape.leaf2(Array2::ones((v, 1)));
            let row_totals = delta.matmul(&ones);
            let (clipped, n) = row_totals.clamp_sym_detach(bound);
            (clipped.sum(), n)
        }
    };
    Ok((total.scale(1.0 / h as f64), n_clipped))
}

/// Forward KL D(p_T || p_theta) for a single position, from teacher
/// probabilities to student logits (shape [1, V]). Unclipped.
pub fn forward_kl<'t>(
    tape: &'t Tape,
    p_t: &Array1<f64>,
    student_logits: &Var<'t>,
) -> Result<Var<'t>> {
    let rows = p_t.clone().insert_axis(ndarray::Axis(0));
    let logp = student_logits.log_softmax_rows();
    let (kl, _) = clipped_kl_rows(tape, &rows, &logp, 0.0, ClipMode::Summand)?;
    Ok(kl)
}

/// Student log-probability rows for rollout positions 1..=horizon on the
/// non-privileged context (x, y_{<t}).
pub fn student_logprob_rows<'t>(
    model: &DiffModel<'t>,
    x: &[TokenId],
    y: &[TokenId],
    horizon: usize,
) -> Result<Var<'t>> {
    if horizon == 0 || horizon > y.len() {
        return Err(Error::Contract(format!(
            "horizon {horizon} out of range for rollout of length {}",
            y.len()
        )));
    }
    let mut seq = x.to_vec();
    seq.extend_from_slice(&y[..horizon - 1]);
    let logits = model.forward_logits(&seq)?;
    let rows = logits.slice_rows(x.len() - 1, x.len() - 1 + horizon);
    Ok(rows.log_softmax_rows())
}

/// One incorrect rollout prepared for distillation against its steered
/// teacher.
#[derive(Debug, Clone)]
pub struct SteerItem {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub teacher: SteeredTeacherDist,
}

/// Sequence steering loss for one rollout: mean over the horizon of the
/// clipped forward KL from the steered teacher to the student.
pub fn rollout_steer_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    item: &SteerItem,
    cfg: &LossConfig,
) -> Result<(Var<'t>, usize)> {
    let expect = item.y.len().min(cfg.max_horizon);
    if item.teacher.horizon != expect {
        return Err(Error::Contract(format!(
            "teacher horizon {} != min(|y|, H) = {expect}",
            item.teacher.horizon
        )));
    }
    let logp = student_logprob_rows(model, &item.x, &item.y, expect)?;
    clipped_kl_rows(tape, &item.teacher.probs, &logp, cfg.clip_tau, cfg.clip_mode)
}

/// Average of rollout steering losses over the prepared incorrect rollouts;
/// an exact zero when there are none.
pub fn steering_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    items: &[SteerItem],
    cfg: &LossConfig,
) -> Result<(Var<'t>, usize)> {
    if items.is_empty() {
        return Ok((tape.scalar(0.0), 0));
    }
    let mut terms = Vec::with_capacity(items.len());
    let mut n_clipped = 0;
    for item in items {
        let (l, n) = rollout_steer_loss(tape, model, item, cfg)?;
        terms.push(l);
        n_clipped += n;
    }
    let total = crate::tape::sum_vars(tape, &terms);
    Ok((total.scale(1.0 / items.len() as f64), n_clipped))
}

/// A correct rollout (or expert trace) eligible for the positive-tail term.
#[derive(Debug, Clone)]
pub struct PosItem {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

/// Positive-tail SFT: per included rollout, the summed NLL of its last
/// `pos_window` tokens; averaged over included rollouts. Rollouts longer
/// than `pos_max_len` are excluded; zero when nothing qualifies.
pub fn pos_tail_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    items: &[PosItem],
    cfg: &LossConfig,
) -> Result<(Var<'t>, usize)> {
    let mut terms = Vec::new();
    for item in items {
        let len = item.y.len();
        if len == 0 || len > cfg.pos_max_len {
            continue;
        }
        let start = len.saturating_sub(cfg.pos_window);
        let mut seq = item.x.to_vec();
        seq.extend_from_slice(&item.y[..len - 1]);
        let logits = model.forward_logits(&seq)?;
        let logp = logits.log_softmax_rows();
        let idx: Vec<(usize, usize)> = (start..len)
            .map(|t| (item.x.len() - 1 + t, item.y[t]))
            .collect();
        terms.push(logp.gather_entries(&idx).sum().neg());
    }
    if terms.is_empty() {
        return Ok((tape.scalar(0.0), 0));
    }
    let n = terms.len();
    let total = crate::tape::sum_vars(tape, &terms);
    Ok((total.scale(1.0 / n as f64), n))
}

/// eta = eta0 (1 - acc): the auxiliary term fades as accuracy rises.
pub fn adaptive_eta(eta0: f64, acc: f64) -> f64 {
    eta0 * (1.0 - acc)
}

#[derive(Debug, Clone)]
pub struct LossBreakdown<'t> {
    pub steer: Var<'t>,
    pub pos: Var<'t>,
    pub eta: f64,
    pub total: Var<'t>,
    pub n_steered: usize,
    pub n_pos_tail: usize,
    pub n_clipped: usize,
}

pub fn total_loss<'t>(
    steer: Var<'t>,
    pos: Var<'t>,
    eta: f64,
    n_steered: usize,
    n_pos_tail: usize,
    n_clipped: usize,
) -> LossBreakdown<'t> {
    let total = steer.add(&pos.scale(eta));
    LossBreakdown {
        steer,
        pos,
        eta,
        total,
        n_steered,
        n_pos_tail,
        n_clipped,
    }
}

/// Privileged self-distillation baseline: teacher conditioned on the single
/// dataset solution, plain (unclipped) forward KL, mean over the horizon.
pub fn opsd_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    x: &[TokenId],
    solution: &[TokenId],
    y: &[TokenId],
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<Var<'t>> {
    let horizon = y.len().min(cfg.max_horizon);
    if horizon == 0 {
        return Err(Error::Contract("empty rollout in privileged distillation".into()));
    }
    let z = member_logits(teacher, x, solution, y, horizon, gcfg)?;
    let probs = teacher_distribution(&z)?;
    let logp = student_logprob_rows(model, x, y, horizon)?;
    let (kl, _) = clipped_kl_rows(tape, &probs, &logp, 0.0, cfg.clip_mode)?;
    Ok(kl)
}

/// Ablation: teacher is the mean of pool-member probability distributions
/// (softmax first, then average) over the positive pool only.
pub fn pmt_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    positive: &[Vec<TokenId>],
    x: &[TokenId],
    y: &[TokenId],
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<(Var<'t>, usize)> {
    if positive.is_empty() {
        return Err(Error::EmptyPool("mean-teacher ablation needs a positive pool".into()));
    }
    let horizon = y.len().min(cfg.max_horizon);
    let mut mean: Option<Array2<f64>> = None;
    for g in positive {
        let p = teacher_distribution(&member_logits(teacher, x, g, y, horizon, gcfg)?)?;
        mean = Some(match mean {
            None => p,
            Some(a) => a + p,
        });
    }
    let probs = mean.unwrap() / positive.len() as f64;
    let logp = student_logprob_rows(model, x, y, horizon)?;
    clipped_kl_rows(tape, &probs, &logp, cfg.clip_tau, cfg.clip_mode)
}

/// Positive-only steered logits: z0 + lambda (z_pos - z0).
pub fn pos_only_logits(
    z0: &Array2<f64>,
    z_pos: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    if z0.dim() != z_pos.dim() {
        return Err(Error::Shape(format!(
            "positive-only steering shapes differ: {:?} vs {:?}",
            z0.dim(),
            z_pos.dim()
        )));
    }
    Ok(z0 + &((z_pos - z0) * lambda))
}

/// Ablation: amplify only the positive guidance direction relative to the
/// anchor, then distill as usual.
pub fn pos_only_steer_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    positive: &[Vec<TokenId>],
    x: &[TokenId],
    y: &[TokenId],
    lambda: f64,
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<(Var<'t>, usize)> {
    if positive.is_empty() {
        return Err(Error::EmptyPool("positive-only steering needs a positive pool".into()));
    }
    let horizon = y.len().min(cfg.max_horizon);
    let z0 = anchor_logits(teacher, x, y, horizon)?;
    let z_pos = pool_mean_logits(teacher, positive, x, y, horizon, gcfg)?;
    let z = pos_only_logits(&z0, &z_pos, lambda)?;
    let probs = teacher_distribution(&z)?;
    let logp = student_logprob_rows(model, x, y, horizon)?;
    clipped_kl_rows(tape, &probs, &logp, cfg.clip_tau, cfg.clip_mode)
}

/// Group-normalized advantages (r - mean) / (std + eps); exactly zero for
/// homogeneous rewards.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + STD_EPS;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Mean token log-probability of a rollout under the student (length-
/// normalized), as a differentiable scalar.
fn mean_rollout_logprob<'t>(
    model: &DiffModel<'t>,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<Var<'t>> {
    let mut seq = x.to_vec();
    seq.extend_from_slice(&y[..y.len() - 1]);
    let logp = model.forward_logits(&seq)?.log_softmax_rows();
    let idx: Vec<(usize, usize)> = (0..y.len()).map(|t| (x.len() - 1 + t, y[t])).collect();
    Ok(logp.gather_entries(&idx).sum().scale(1.0 / y.len() as f64))
}

/// Group-advantage policy gradient surrogate:
/// -(1/G) sum_j A_j * mean-token-logprob(y_j). Exactly zero (value and
/// gradient) when all rewards agree.
pub fn grpo_lite_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    group: &RolloutGroup,
) -> Result<Var<'t>> {
    if group.rollouts.len() < 2 {
        return Err(Error::Contract("group advantage needs G >= 2".into()));
    }
    let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.verdict.r as f64).collect();
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(tape.scalar(0.0));
    }
    let adv = advantages(&rewards);
    let g = group.rollouts.len() as f64;
    let mut terms = Vec::new();
    for (j, r) in group.rollouts.iter().enumerate() {
        if r.tokens.is_empty() {
            continue;
        }
        let lp = mean_rollout_logprob(model, &group.prompt_tokens, &r.tokens)?;
        terms.push(lp.scale(-adv[j] / g));
    }
    Ok(crate::tape::sum_vars(tape, &terms))
}

/// Expert-trace SFT: mean NLL of the target tokens given the prompt.
/// The target should already end with the end-of-sequence token.
pub fn sft_loss<'t>(
    _tape: &'t Tape,
    model: &DiffModel<'t>,
    x: &[TokenId],
    target: &[TokenId],
) -> Result<Var<'t>> {
    if target.is_empty() {
        return Err(Error::Contract("empty target trace in SFT loss".into()));
    }
    Ok(mean_rollout_logprob(model, x, target)?.neg())
}
