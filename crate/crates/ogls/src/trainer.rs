//! Training orchestration: the outcome-guided steering loop, baseline and
//! ablation loops, base-model warmup, evaluation, checkpointing, and the
//! outer run driver.

use crate::diagnostics::{default_keywords, marker_frequency, MarkerStats};
use crate::error::{Error, Result};
use crate::guidance::{build_steered_teacher, lambda_at, GuidanceConfig, SteeringSchedule};
use crate::losses::{
    adaptive_eta, grpo_lite_loss, opsd_loss, pmt_loss, pos_only_steer_loss, pos_tail_loss,
    steering_loss, total_loss, LossConfig, PosItem, SteerItem,
};
use crate::rollout::{derive_seed, partition, sample_group, RolloutGroup, SampleConfig};
use crate::seqmodel::diff::{backward, DiffModel};
use crate::seqmodel::optim::{AdamState, OptimConfig, StepOutcome};
use crate::seqmodel::{Checkpoint, ModelDims, ModelParams, TokenId, Vocab, CHECKPOINT_VERSION, EOS};
use crate::tape::{sum_vars, Tape, Var};
use crate::tasks::{render_prompt, Dataset, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ogls,
    Opsd,
    Pmt,
    PosOnly,
    Grpo,
    Sft,
    Routed,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ogls => "ogls",
            Method::Opsd => "opsd",
            Method::Pmt => "pmt",
            Method::PosOnly => "pos_only",
            Method::Grpo => "grpo",
            Method::Sft => "sft",
            Method::Routed => "routed",
        }
    }

    fn samples_rollouts(&self) -> bool {
        !matches!(self, Method::Sft)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: u64,
    /// Prompts per optimizer step.
    pub batch: usize,
    /// Rollouts per prompt (G).
    pub group_size: usize,
    pub temperature: f64,
    pub max_rollout_len: usize,
    /// Dataset solution joins the positive pool of every group.
    pub include_solution: bool,
    pub schedule: SteeringSchedule,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Evaluate every this many steps; 0 means only at the start and end.
    pub eval_every: u64,
    pub eval_k: usize,
    pub eval_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ogls,
            steps: 300,
            batch: 4,
            group_size: 8,
            temperature: 1.0,
            max_rollout_len: 64,
            include_solution: true,
            schedule: SteeringSchedule::default(),
            loss: LossConfig::default(),
            // fine-tuning from a converged base needs a gentler step than
            // the from-scratch warmup default
            optim: OptimConfig {
                lr: 3e-4,
                ..OptimConfig::default()
            },
            seed: 0,
            eval_every: 50,
            eval_k: 8,
            eval_budget: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        let needs_group = matches!(
            self.method,
            Method::Ogls | Method::Pmt | Method::PosOnly | Method::Grpo | Method::Routed
        );
        if needs_group && self.group_size < 2 {
            return Err(Error::Config(format!(
                "method {} needs group_size >= 2",
                self.method.name()
            )));
        }
        if self.method.samples_rollouts() && self.max_rollout_len == 0 {
            return Err(Error::Config("max_rollout_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            group_size: if self.method == Method::Opsd {
                1
            } else {
                self.group_size
            },
            temperature: self.temperature,
            max_len: self.max_rollout_len,
        }
    }
}

/// Mutable training state; the teacher stays bitwise-identical to the base
/// model for the whole run.
pub struct TrainState {
    pub step: u64,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt: AdamState,
    teacher_hash: u64,
}

impl TrainState {
    pub fn new(base: &ModelParams) -> TrainState {
        TrainState {
            step: 0,
            student: base.clone(),
            teacher: base.clone(),
            opt: AdamState::new(base),
            teacher_hash: base.content_hash(),
        }
    }

    pub fn assert_teacher_frozen(&self) -> Result<()> {
        if self.teacher.content_hash() != self.teacher_hash {
            return Err(Error::Contract("frozen teacher parameters changed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub steered: usize,
    pub skipped_correct: usize,
    pub skipped_empty_pool: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.steered + self.skipped_correct + self.skipped_empty_pool
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_steer: f64,
    pub loss_pos: f64,
    pub eta: f64,
    pub lambda: f64,
    pub acc: Option<f64>,
    pub n_steered: usize,
    pub n_skipped_correct: usize,
    pub n_skipped_empty_pool: usize,
    pub n_pos_tail: usize,
    pub n_clipped: usize,
    pub rejected: bool,
}

/// Solution trace as rollout-comparable tokens: trace then end-of-sequence.
pub fn solution_tokens(problem: &Problem, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut toks = vocab.tokenize(&problem.solution_trace)?;
    toks.push(EOS);
    Ok(toks)
}

// ---------------------------------------------------------------------------
// per-method batch losses over pre-sampled groups

struct BatchLoss<'t> {
    total: Var<'t>,
    steer_value: f64,
    pos_value: f64,
    eta: f64,
    skips: SkipCounts,
    n_pos_tail: usize,
    n_clipped: usize,
}

fn mean_of<'t>(tape: &'t Tape, terms: Vec<Var<'t>>) -> Var<'t> {
    if terms.is_empty() {
        return tape.scalar(0.0);
    }
    let n = terms.len() as f64;
    sum_vars(tape, &terms).scale(1.0 / n)
}

/// Steered-teacher batch loss over pre-sampled groups: the per-prompt
/// objective is steer + eta * pos with prompt-level accuracy driving eta;
/// prompts are averaged. Correct rollouts skip steering; incorrect ones
/// are skipped when either pool is empty.
#[allow(clippy::too_many_arguments)]
fn ogls_batch_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    groups: &[RolloutGroup],
    solutions: &[Option<Vec<TokenId>>],
    lambda: f64,
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<BatchLoss<'t>> {
    let mut prompt_terms = Vec::with_capacity(groups.len());
    let mut skips = SkipCounts::default();
    let mut n_pos_tail = 0;
    let mut n_clipped = 0;
    let mut steer_sum = 0.0;
    let mut pos_sum = 0.0;
    let mut eta_sum = 0.0;
    for (group, solution) in groups.iter().zip(solutions) {
        let pools = partition(group, solution.as_deref());
        let mut steer_items = Vec::new();
        let mut pos_items = Vec::new();
        for r in &group.rollouts {
            if r.correct() {
                skips.skipped_correct += 1;
                pos_items.push(PosItem {
                    x: group.prompt_tokens.clone(),
                    y: r.tokens.clone(),
                });
                continue;
            }
            if pools.positive.is_empty() || pools.negative.is_empty() || r.tokens.is_empty() {
                skips.skipped_empty_pool += 1;
                continue;
            }
            let teacher_dist = build_steered_teacher(
                teacher,
                &pools,
                &group.prompt_tokens,
                &r.tokens,
                lambda,
                cfg.max_horizon,
                gcfg,
            )?;
            steer_items.push(SteerItem {
                x: group.prompt_tokens.clone(),
                y: r.tokens.clone(),
                teacher: teacher_dist,
            });
            skips.steered += 1;
        }
        let (steer, clipped) = steering_loss(tape, model, &steer_items, cfg)?;
        let (pos, n_pos) = pos_tail_loss(tape, model, &pos_items, cfg)?;
        let eta = adaptive_eta(cfg.eta0, group.acc);
        let breakdown = total_loss(steer, pos, eta, steer_items.len(), n_pos, clipped);
        steer_sum += breakdown.steer.scalar_value();
        pos_sum += breakdown.pos.scalar_value();
        eta_sum += eta;
        n_pos_tail += n_pos;
        n_clipped += clipped;
        prompt_terms.push(breakdown.total);
    }
    let n = groups.len().max(1) as f64;
    Ok(BatchLoss {
        total: mean_of(tape, prompt_terms),
        steer_value: steer_sum / n,
        pos_value: pos_sum / n,
        eta: eta_sum / n,
        skips,
        n_pos_tail,
        n_clipped,
    })
}

/// Ablation batch losses sharing the steered pipeline's skip rules but
/// replacing the teacher construction.
#[allow(clippy::too_many_arguments)]
fn ablation_batch_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    groups: &[RolloutGroup],
    solutions: &[Option<Vec<TokenId>>],
    method: Method,
    lambda: f64,
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<BatchLoss<'t>> {
    let mut prompt_terms = Vec::with_capacity(groups.len());
    let mut skips = SkipCounts::default();
    let mut n_pos_tail = 0;
    let mut n_clipped = 0;
    let mut steer_sum = 0.0;
    let mut pos_sum = 0.0;
    let mut eta_sum = 0.0;
    for (group, solution) in groups.iter().zip(solutions) {
        let pools = partition(group, solution.as_deref());
        let mut terms = Vec::new();
        let mut pos_items = Vec::new();
        for r in &group.rollouts {
            if r.correct() {
                skips.skipped_correct += 1;
                pos_items.push(PosItem {
                    x: group.prompt_tokens.clone(),
                    y: r.tokens.clone(),
                });
                continue;
            }
            if pools.positive.is_empty() || r.tokens.is_empty() {
                skips.skipped_empty_pool += 1;
                continue;
            }
            let (l, clipped) = match method {
                Method::Pmt => pmt_loss(
                    tape,
                    model,
                    teacher,
                    &pools.positive,
                    &group.prompt_tokens,
                    &r.tokens,
                    cfg,
                    gcfg,
                )?,
                Method::PosOnly => pos_only_steer_loss(
                    tape,
                    model,
                    teacher,
                    &pools.positive,
                    &group.prompt_tokens,
                    &r.tokens,
                    lambda,
                    cfg,
                    gcfg,
                )?,
                other => {
                    return Err(Error::Contract(format!(
                        "{} is not an ablation objective",
                        other.name()
                    )))
                }
            };
            n_clipped += clipped;
            terms.push(l);
            skips.steered += 1;
        }
        let n_steered = terms.len();
        let steer = mean_of(tape, terms);
        let (pos, n_pos) = pos_tail_loss(tape, model, &pos_items, cfg)?;
        let eta = adaptive_eta(cfg.eta0, group.acc);
        let breakdown = total_loss(steer, pos, eta, n_steered, n_pos, 0);
        steer_sum += breakdown.steer.scalar_value();
        pos_sum += breakdown.pos.scalar_value();
        eta_sum += eta;
        n_pos_tail += n_pos;
        prompt_terms.push(breakdown.total);
    }
    let n = groups.len().max(1) as f64;
    Ok(BatchLoss {
        total: mean_of(tape, prompt_terms),
        steer_value: steer_sum / n,
        pos_value: pos_sum / n,
        eta: eta_sum / n,
        skips,
        n_pos_tail,
        n_clipped,
    })
}

/// Privileged-distillation baseline: every rollout (one per prompt) is
/// distilled against the solution-conditioned teacher.
fn opsd_batch_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    groups: &[RolloutGroup],
    solutions: &[Option<Vec<TokenId>>],
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<BatchLoss<'t>> {
    let mut prompt_terms = Vec::new();
    let mut skips = SkipCounts::default();
    for (group, solution) in groups.iter().zip(solutions) {
        let s = solution
            .as_ref()
            .ok_or_else(|| Error::Contract("privileged baseline needs the dataset solution".into()))?;
        let mut terms = Vec::new();
        for r in &group.rollouts {
            if r.tokens.is_empty() {
                skips.skipped_empty_pool += 1;
                continue;
            }
            terms.push(opsd_loss(
                tape,
                model,
                teacher,
                &group.prompt_tokens,
                s,
                &r.tokens,
                cfg,
                gcfg,
            )?);
            skips.steered += 1;
        }
        prompt_terms.push(mean_of(tape, terms));
    }
    let total = mean_of(tape, prompt_terms);
    let steer_value = total.scalar_value();
    Ok(BatchLoss {
        total,
        steer_value,
        pos_value: 0.0,
        eta: 0.0,
        skips,
        n_pos_tail: 0,
        n_clipped: 0,
    })
}

fn grpo_batch_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    groups: &[RolloutGroup],
) -> Result<BatchLoss<'t>> {
    let mut terms = Vec::new();
    let mut skips = SkipCounts::default();
    for group in groups {
        terms.push(grpo_lite_loss(tape, model, group)?);
        skips.steered += group.rollouts.len();
    }
    let total = mean_of(tape, terms);
    let steer_value = total.scalar_value();
    Ok(BatchLoss {
        total,
        steer_value,
        pos_value: 0.0,
        eta: 0.0,
        skips,
        n_pos_tail: 0,
        n_clipped: 0,
    })
}

/// Routed hybrid over one shared group per prompt: correct rollouts take
/// the group-advantage policy-gradient term, failed ones take privileged
/// distillation.
fn routed_batch_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    teacher: &ModelParams,
    groups: &[RolloutGroup],
    solutions: &[Option<Vec<TokenId>>],
    cfg: &LossConfig,
    gcfg: &GuidanceConfig,
) -> Result<BatchLoss<'t>> {
    use crate::losses::advantages;
    let mut prompt_terms = Vec::new();
    let mut skips = SkipCounts::default();
    for (group, solution) in groups.iter().zip(solutions) {
        let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.verdict.r as f64).collect();
        let uniform = rewards.iter().all(|&r| r == rewards[0]);
        let adv = advantages(&rewards);
        let g = group.rollouts.len() as f64;
        let mut grpo_terms = Vec::new();
        let mut opsd_terms = Vec::new();
        for (j, r) in group.rollouts.iter().enumerate() {
            if r.tokens.is_empty() {
                skips.skipped_empty_pool += 1;
                continue;
            }
            if r.correct() {
                skips.skipped_correct += 1;
                if !uniform {
                    let lp = crate::losses::student_logprob_rows(
                        model,
                        &group.prompt_tokens,
                        &r.tokens,
                        r.tokens.len(),
                    )?;
                    let idx: Vec<(usize, usize)> =
                        (0..r.tokens.len()).map(|t| (t, r.tokens[t])).collect();
                    let mean_lp = lp
                        .gather_entries(&idx)
                        .sum()
                        .scale(1.0 / r.tokens.len() as f64);
                    grpo_terms.push(mean_lp.scale(-adv[j] / g));
                }
            } else {
                let s = solution.as_ref().ok_or_else(|| {
                    Error::Contract("routed baseline needs the dataset solution".into())
                })?;
                opsd_terms.push(opsd_loss(
                    tape,
                    model,
                    teacher,
                    &group.prompt_tokens,
                    s,
                    &r.tokens,
                    cfg,
                    gcfg,
                )?);
                skips.steered += 1;
            }
        }
        let grpo_part = if grpo_terms.is_empty() {
            tape.scalar(0.0)
        } else {
            sum_vars(tape, &grpo_terms)
        };
        let opsd_part = mean_of(tape, opsd_terms);
        prompt_terms.push(grpo_part.add(&opsd_part));
    }
    let total = mean_of(tape, prompt_terms);
    let steer_value = total.scalar_value();
    Ok(BatchLoss {
        total,
        steer_value,
        pos_value: 0.0,
        eta: 0.0,
        skips,
        n_pos_tail: 0,
        n_clipped: 0,
    })
}

fn sft_batch_loss<'t>(
    tape: &'t Tape,
    model: &DiffModel<'t>,
    vocab: &Vocab,
    problems: &[&Problem],
) -> Result<BatchLoss<'t>> {
    let mut terms = Vec::new();
    for p in problems {
        let x = render_prompt(p, vocab)?;
        let s = solution_tokens(p, vocab)?;
        terms.push(crate::losses::sft_loss(tape, model, &x, &s)?);
    }
    let total = mean_of(tape, terms);
    let steer_value = total.scalar_value();
    Ok(BatchLoss {
        total,
        steer_value,
        pos_value: 0.0,
        eta: 0.0,
        skips: SkipCounts::default(),
        n_pos_tail: 0,
        n_clipped: 0,
    })
}

// ---------------------------------------------------------------------------
// step driver

/// Deterministic batch selection: indices depend only on (seed, step).
pub fn select_batch(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x00BA_7C00 ^ step));
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Rollout seed for one prompt slot at one step; shared by every method so
/// that runs differing only in objective sample identical groups.
pub fn rollout_seed(seed: u64, step: u64, slot: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x0501_1ED0 ^ step), slot as u64)
}

/// Sample one group per batch slot from the current student.
pub fn sample_batch_groups(
    student: &ModelParams,
    vocab: &Vocab,
    problems: &[&Problem],
    scfg: &SampleConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<RolloutGroup>> {
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| sample_group(student, vocab, p, scfg, rollout_seed(seed, step, i)))
        .collect()
}

/// One optimizer step of the configured method. Nonfinite losses or
/// gradients reject the update and mark the metrics row.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    vocab: &Vocab,
    problems: &[&Problem],
) -> Result<StepMetrics> {
    let lambda = lambda_at(&cfg.schedule, state.step);
    let gcfg = GuidanceConfig::for_vocab(vocab);
    let (groups, solutions, acc) = if cfg.method.samples_rollouts() {
        let groups = sample_batch_groups(
            &state.student,
            vocab,
            problems,
            &cfg.sample_config(),
            cfg.seed,
            state.step,
        )?;
        let mut solutions = Vec::with_capacity(problems.len());
        for p in problems {
            solutions.push(if cfg.include_solution || matches!(cfg.method, Method::Opsd | Method::Routed) {
                Some(solution_tokens(p, vocab)?)
            } else {
                None
            });
        }
        let acc = if groups.is_empty() {
            0.0
        } else {
            groups.iter().map(|g| g.acc).sum::<f64>() / groups.len() as f64
        };
        (groups, solutions, Some(acc))
    } else {
        (Vec::new(), Vec::new(), None)
    };

    struct BatchScalars {
        loss: f64,
        steer: f64,
        pos: f64,
        eta: f64,
        skips: SkipCounts,
        n_pos_tail: usize,
        n_clipped: usize,
    }
    let (scalars, grads) = {
        let tape = Tape::new();
        let model = DiffModel::new(&tape, &state.student);
        let batch = match cfg.method {
        Method::Ogls => ogls_batch_loss(
            &tape,
            &model,
            &state.teacher,
            &groups,
            &solutions,
            lambda,
            &cfg.loss,
            &gcfg,
        )?,
        Method::Pmt | Method::PosOnly => ablation_batch_loss(
            &tape,
            &model,
            &state.teacher,
            &groups,
            &solutions,
            cfg.method,
            lambda,
            &cfg.loss,
            &gcfg,
        )?,
        Method::Opsd => opsd_batch_loss(
            &tape,
            &model,
            &state.teacher,
            &groups,
            &solutions,
            &cfg.loss,
            &gcfg,
        )?,
        Method::Grpo => grpo_batch_loss(&tape, &model, &groups)?,
        Method::Routed => routed_batch_loss(
            &tape,
            &model,
            &state.teacher,
            &groups,
            &solutions,
            &cfg.loss,
            &gcfg,
        )?,
        Method::Sft => sft_batch_loss(&tape, &model, vocab, problems)?,
        };
        let loss_value = batch.total.scalar_value();
        let grads = if loss_value.is_finite() {
            Some(backward(&tape, &batch.total, &model))
        } else {
            None
        };
        (
            BatchScalars {
                loss: loss_value,
                steer: batch.steer_value,
                pos: batch.pos_value,
                eta: batch.eta,
                skips: batch.skips,
                n_pos_tail: batch.n_pos_tail,
                n_clipped: batch.n_clipped,
            },
            grads,
        )
    };

    let rejected = match grads {
        None => true,
        Some(g) => {
            state.opt.step(&mut state.student, &g, &cfg.optim) == StepOutcome::RejectedNonFinite
        }
    };

    state.assert_teacher_frozen()?;
    let metrics = StepMetrics {
        step: state.step,
        loss_total: scalars.loss,
        loss_steer: scalars.steer,
        loss_pos: scalars.pos,
        eta: scalars.eta,
        lambda,
        acc,
        n_steered: scalars.skips.steered,
        n_skipped_correct: scalars.skips.skipped_correct,
        n_skipped_empty_pool: scalars.skips.skipped_empty_pool,
        n_pos_tail: scalars.n_pos_tail,
        n_clipped: scalars.n_clipped,
        rejected,
    };
    state.step += 1;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_at_k: f64,
    pub answer_format_rate: f64,
    pub markers: MarkerStats,
    pub k: usize,
    pub n_problems: usize,
}

/// Avg@k with k independent temperature-1 samples per problem, the
/// fraction of samples producing a parseable final answer, and marker
/// frequency over the generated texts.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocab,
    eval: &Dataset,
    k: usize,
    budget: usize,
    temperature: f64,
    seed: u64,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("eval sample count must be >= 1".into()));
    }
    let scfg = SampleConfig {
        group_size: k,
        temperature,
        max_len: budget,
    };
    let mut acc_sum = 0.0;
    let mut format_ok = 0usize;
    let mut texts = Vec::new();
    let mut total_tokens = 0usize;
    for (i, problem) in eval.problems.iter().enumerate() {
        let group = sample_group(
            params,
            vocab,
            problem,
            &scfg,
            derive_seed(seed, 0xEAA1_0000 ^ i as u64),
        )?;
        acc_sum += group.acc;
        for r in &group.rollouts {
            if r.verdict.format_ok {
                format_ok += 1;
            }
            total_tokens += r.tokens.len();
            texts.push(r.text.clone());
        }
    }
    let n = eval.problems.len();
    let markers = marker_frequency(&texts, &default_keywords(), total_tokens);
    Ok(EvalReport {
        avg_at_k: if n == 0 { 0.0 } else { acc_sum / n as f64 },
        answer_format_rate: if n == 0 {
            0.0
        } else {
            format_ok as f64 / (n * k) as f64
        },
        markers,
        k,
        n_problems: n,
    })
}

// ---------------------------------------------------------------------------
// warmup pretraining

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub steps: u64,
    pub batch: usize,
    /// Fraction of examples shown with the solution as privileged context,
    /// teaching the model to exploit guidance.
    pub guided_frac: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 4000,
            batch: 8,
            guided_frac: 0.5,
            optim: OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            seed: 7,
        }
    }
}

/// Brief SFT on the warmup split, mixing plain and guidance-conditioned
/// examples, standing in for a pretrained backbone. Deterministic in seed.
pub fn pretrain_base(
    dims: ModelDims,
    vocab: &Vocab,
    warmup: &Dataset,
    cfg: &WarmupConfig,
) -> Result<ModelParams> {
    use crate::seqmodel::{GUIDE_CLOSE, GUIDE_OPEN};
    let mut params = crate::seqmodel::init_model(dims, cfg.seed)?;
    if warmup.problems.is_empty() {
        return Err(Error::Data("warmup split is empty".into()));
    }
    let mut opt = AdamState::new(&params);
    for step in 0..cfg.steps {
        let idx = select_batch(cfg.seed, step, cfg.batch, warmup.problems.len());
        let mut coin = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x3A3A ^ step));
        let grads = {
            let tape = Tape::new();
            let model = DiffModel::new(&tape, &params);
            let mut terms = Vec::new();
            for i in idx {
            let p = &warmup.problems[i];
            let x = render_prompt(p, vocab)?;
            let s = solution_tokens(p, vocab)?;
            let guided = coin.gen::<f64>() < cfg.guided_frac;
            let ctx = if guided {
                let mut c = x.clone();
                c.push(GUIDE_OPEN);
                // full guided trace including the end token, matching the
                // layout of privileged teacher contexts built from pools
                c.extend_from_slice(&s);
                c.push(GUIDE_CLOSE);
                c
            } else {
                x
            };
            if ctx.len() + s.len() > dims.window {
                continue;
            }
                terms.push(crate::losses::sft_loss(&tape, &model, &ctx, &s)?);
            }
            if terms.is_empty() {
                None
            } else {
                let loss = mean_of(&tape, terms);
                Some(backward(&tape, &loss, &model))
            }
        };
        if let Some(g) = grads {
            opt.step(&mut params, &g, &cfg.optim);
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// outer run loop

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub avg_at_k: f64,
    pub answer_format_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub steps: u64,
    pub base_avg: f64,
    pub final_avg: f64,
    pub final_format_rate: f64,
    pub curve: Vec<EvalPoint>,
    pub final_markers: MarkerStats,
}

pub struct RunArtifacts {
    pub report: RunReport,
    pub metrics: Vec<StepMetrics>,
    pub final_params: ModelParams,
    pub final_opt: AdamState,
}

fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, 0xE0A1)
}

fn write_jsonl_line<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let f = std::fs::File::options().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer(&mut w, row)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn save_state(dir: &Path, vocab: &Vocab, state: &TrainState) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        vocab: vocab.clone(),
        params: state.student.clone(),
        opt: Some(state.opt.clone()),
        step: state.step,
    };
    ckpt.save(&dir.join("latest.json"))
}

/// Train for the configured number of steps with periodic evaluation.
/// `resume` continues from a saved student/optimizer/step triple; given
/// identical seeds the remaining steps reproduce an uninterrupted run
/// bit for bit. Artifacts land in `out_dir` when provided.
pub fn run(
    cfg: &TrainConfig,
    vocab: &Vocab,
    train: &Dataset,
    eval_ds: &Dataset,
    base: &ModelParams,
    resume: Option<(ModelParams, AdamState, u64)>,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if train.problems.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut state = TrainState::new(base);
    if let Some((student, opt, step)) = resume {
        state.student = student;
        state.opt = opt;
        state.step = step;
    }
    let metrics_path = out_dir.map(|d| d.join("metrics.jsonl"));
    let mut metrics = Vec::new();
    let mut curve = Vec::new();

    let base_eval = evaluate(
        base,
        vocab,
        eval_ds,
        cfg.eval_k,
        cfg.eval_budget,
        cfg.temperature,
        eval_seed(cfg.seed),
    )?;
    curve.push(EvalPoint {
        step: 0,
        avg_at_k: base_eval.avg_at_k,
        answer_format_rate: base_eval.answer_format_rate,
    });

    while state.step < cfg.steps {
        let idx = select_batch(cfg.seed, state.step, cfg.batch, train.problems.len());
        let problems: Vec<&Problem> = idx.iter().map(|&i| &train.problems[i]).collect();
        let row = train_step(&mut state, cfg, vocab, &problems)?;
        if let Some(p) = &metrics_path {
            write_jsonl_line(p, &row)?;
        }
        metrics.push(row);
        let at_eval = cfg.eval_every > 0 && state.step % cfg.eval_every == 0;
        if at_eval && state.step < cfg.steps {
            let e = evaluate(
                &state.student,
                vocab,
                eval_ds,
                cfg.eval_k,
                cfg.eval_budget,
                cfg.temperature,
                eval_seed(cfg.seed),
            )?;
            curve.push(EvalPoint {
                step: state.step,
                avg_at_k: e.avg_at_k,
                answer_format_rate: e.answer_format_rate,
            });
            if let Some(d) = out_dir {
                save_state(d, vocab, &state)?;
            }
        }
    }

    let final_eval = evaluate(
        &state.student,
        vocab,
        eval_ds,
        cfg.eval_k,
        cfg.eval_budget,
        cfg.temperature,
        eval_seed(cfg.seed),
    )?;
    curve.push(EvalPoint {
        step: state.step,
        avg_at_k: final_eval.avg_at_k,
        answer_format_rate: final_eval.answer_format_rate,
    });
    if let Some(d) = out_dir {
        save_state(d, vocab, &state)?;
    }
    let report = RunReport {
        method: cfg.method,
        steps: cfg.steps,
        base_avg: base_eval.avg_at_k,
        final_avg: final_eval.avg_at_k,
        final_format_rate: final_eval.answer_format_rate,
        curve,
        final_markers: final_eval.markers,
    };
    if let Some(d) = out_dir {
        let f = std::fs::File::create(d.join("report.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
    }
    state.assert_teacher_frozen()?;
    Ok(RunArtifacts {
        report,
        metrics,
        final_params: state.student,
        final_opt: state.opt,
    })
}
