//! Privileged-context assembly, pool-averaged teacher logits, and
//! outcome-guided logit steering: the construction of the steered teacher
//! distribution used as the stop-gradient distillation target.
//!
//! Everything here is gradient-free by construction; outputs are plain
//! arrays that enter losses as detached constants.

use crate::error::{Error, Result};
use crate::rollout::GuidancePools;
use crate::seqmodel::{forward::forward_logits, ModelParams, TokenId, Vocab, GUIDE_CLOSE, GUIDE_OPEN};
use ndarray::{Array1, Array2};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Linear ramp for the steering coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringSchedule {
    pub lambda_start: f64,
    pub lambda_max: f64,
    pub ramp_steps: u64,
}

impl Default for SteeringSchedule {
    fn default() -> Self {
        SteeringSchedule {
            lambda_start: 1.0,
            lambda_max: 3.0,
            ramp_steps: 0,
        }
    }
}

impl SteeringSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_start > self.lambda_max {
            return Err(Error::Config(format!(
                "lambda_start {} exceeds lambda_max {}",
                self.lambda_start, self.lambda_max
            )));
        }
        if self.lambda_start < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Steering strength at a given optimizer step: linear interpolation that
/// clamps at lambda_max; ramp_steps = 0 means constant lambda_max.
pub fn lambda_at(schedule: &SteeringSchedule, step: u64) -> f64 {
    if schedule.ramp_steps == 0 {
        return schedule.lambda_max;
    }
    let frac = (step as f64 / schedule.ramp_steps as f64).min(1.0);
    schedule.lambda_start + (schedule.lambda_max - schedule.lambda_start) * frac
}

/// Knobs for privileged-context assembly and pool polling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Tail of the guidance trace preserved under middle truncation
    /// (covers the final-answer region).
    pub tail_keep: usize,
    /// Maximum pool members polled per side; larger pools are subsampled.
    pub max_pool: usize,
    pub subsample_seed: u64,
    /// Token inserted where the middle of a guidance trace was removed.
    pub trunc_marker: TokenId,
}

impl GuidanceConfig {
    pub fn for_vocab(vocab: &Vocab) -> GuidanceConfig {
        GuidanceConfig {
            tail_keep: 32,
            max_pool: 8,
            subsample_seed: 0,
            trunc_marker: vocab.id_of("…").expect("task vocab has a truncation marker"),
        }
    }
}

/// An assembled privileged context [x || <guide> g' </guide> || y_prefix].
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceContext {
    pub assembled: Vec<TokenId>,
    /// Length of g' after possible middle truncation (delimiters excluded).
    pub guidance_len: usize,
    pub truncated: bool,
}

/// Fit prompt, delimited guidance, and rollout prefix into the window.
/// The prompt and prefix are never truncated; the guidance trace is
/// middle-truncated keeping its head and its final `tail_keep` tokens with
/// a single marker between.
pub fn assemble_teacher_context(
    x: &[TokenId],
    g: &[TokenId],
    y_prefix: &[TokenId],
    window: usize,
    cfg: &GuidanceConfig,
) -> Result<GuidanceContext> {
    let overhead = 2; // guide-open + guide-close
    let fixed = x.len() + y_prefix.len() + overhead;
    if fixed >= window {
        return Err(Error::ContextWindow(format!(
            "prompt ({}) + prefix ({}) + delimiters leave no room for guidance in window {window}",
            x.len(),
            y_prefix.len()
        )));
    }
    let budget = window - fixed;
    let (g_kept, truncated): (Vec<TokenId>, bool) = if g.len() <= budget {
        (g.to_vec(), false)
    } else {
        let tail = cfg.tail_keep.min(budget.saturating_sub(2));
        let head = budget - tail - 1;
        let mut kept = Vec::with_capacity(budget);
        kept.extend_from_slice(&g[..head]);
        kept.push(cfg.trunc_marker);
        kept.extend_from_slice(&g[g.len() - tail..]);
        (kept, true)
    };
    let guidance_len = g_kept.len();
    let mut assembled = Vec::with_capacity(fixed + guidance_len);
    assembled.extend_from_slice(x);
    assembled.push(GUIDE_OPEN);
    assembled.extend(g_kept);
    assembled.push(GUIDE_CLOSE);
    assembled.extend_from_slice(y_prefix);
    debug_assert!(assembled.len() <= window);
    Ok(GuidanceContext {
        assembled,
        guidance_len,
        truncated,
    })
}

/// Seeded uniform subsample preserving order; identity when the pool fits.
pub fn subsample_pool(pool: &[Vec<TokenId>], max_pool: usize, seed: u64) -> Vec<Vec<TokenId>> {
    if pool.len() <= max_pool || max_pool == 0 {
        return pool.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(max_pool).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].clone()).collect()
}

/// Teacher logit rows conditioned on one guidance trace, for positions
/// 1..=horizon of the rollout, computed in a single full-sequence forward.
pub(crate) fn member_logits(
    teacher: &ModelParams,
    x: &[TokenId],
    g: &[TokenId],
    y: &[TokenId],
    horizon: usize,
    cfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    let prefix = &y[..horizon.saturating_sub(1)];
    let ctx = assemble_teacher_context(x, g, prefix, teacher.dims.window, cfg)?;
    let base = x.len() + ctx.guidance_len + 2;
    let logits = forward_logits(teacher, &ctx.assembled)?;
    Ok(logits
        .slice(ndarray::s![base - 1..base - 1 + horizon, ..])
        .to_owned())
}

/// Arithmetic mean over pool members of privileged teacher logits,
/// position by position. Pool must be nonempty.
pub fn pool_mean_logits(
    teacher: &ModelParams,
    pool: &[Vec<TokenId>],
    x: &[TokenId],
    y: &[TokenId],
    horizon: usize,
    cfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool(
            "pool_mean_logits called with an empty pool".into(),
        ));
    }
    let mut acc: Option<Array2<f64>> = None;
    for g in pool {
        let z = member_logits(teacher, x, g, y, horizon, cfg)?;
        acc = Some(match acc {
            None => z,
            Some(a) => a + z,
        });
    }
    Ok(acc.unwrap() / pool.len() as f64)
}

/// Outcome-guided steered logits: z0 + lambda * (z_pos - z_neg).
pub fn steer_logits(
    z0: &Array2<f64>,
    z_pos: &Array2<f64>,
    z_neg: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    if z0.dim() != z_pos.dim() || z0.dim() != z_neg.dim() {
        return Err(Error::Shape(format!(
            "steer_logits shapes differ: {:?} {:?} {:?}",
            z0.dim(),
            z_pos.dim(),
            z_neg.dim()
        )));
    }
    if lambda == 0.0 {
        return Ok(z0.clone());
    }
    Ok(z0 + &((z_pos - z_neg) * lambda))
}

/// Row-wise softmax of steered logits. Nonfinite input is a numeric error.
pub fn teacher_distribution(z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("nonfinite steered logits".into()));
    }
    let mut out = Array2::zeros(z.raw_dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&softmax_row(&row.to_owned()));
    }
    Ok(out)
}

pub(crate) fn softmax_row(row: &Array1<f64>) -> Array1<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = row.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// Per-position steered logits and normalized teacher distribution over the
/// effective distillation horizon. Gradient-detached by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeredTeacherDist {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub horizon: usize,
}

/// Build the steered teacher for one rollout: anchor logits on the
/// non-privileged context, pool means on privileged contexts, then the
/// contrastive combination. Both pools must be nonempty.
pub fn build_steered_teacher(
    teacher: &ModelParams,
    pools: &GuidancePools,
    x: &[TokenId],
    y: &[TokenId],
    lambda: f64,
    max_horizon: usize,
    cfg: &GuidanceConfig,
) -> Result<SteeredTeacherDist> {
    if pools.positive.is_empty() || pools.negative.is_empty() {
        return Err(Error::EmptyPool(
            "steered teacher needs both pools nonempty".into(),
        ));
    }
    let horizon = y.len().min(max_horizon);
    if horizon == 0 {
        return Err(Error::Contract("rollout has no tokens to distill".into()));
    }
    let anchor = anchor_logits(teacher, x, y, horizon)?;
    let pos = subsample_pool(&pools.positive, cfg.max_pool, cfg.subsample_seed);
    let neg = subsample_pool(&pools.negative, cfg.max_pool, cfg.subsample_seed.wrapping_add(1));
    let z_pos = pool_mean_logits(teacher, &pos, x, y, horizon, cfg)?;
    let z_neg = pool_mean_logits(teacher, &neg, x, y, horizon, cfg)?;
    let logits = steer_logits(&anchor, &z_pos, &z_neg, lambda)?;
    let probs = teacher_distribution(&logits)?;
    Ok(SteeredTeacherDist {
        logits,
        probs,
        horizon,
    })
}

/// Teacher logits on the plain context (x, y_{<t}) for t = 1..=horizon.
pub fn anchor_logits(
    teacher: &ModelParams,
    x: &[TokenId],
    y: &[TokenId],
    horizon: usize,
) -> Result<Array2<f64>> {
    let mut seq = x.to_vec();
    seq.extend_from_slice(&y[..horizon.saturating_sub(1)]);
    let logits = forward_logits(teacher, &seq)?;
    Ok(logits
        .slice(ndarray::s![x.len() - 1..x.len() - 1 + horizon, ..])
        .to_owned())
}
