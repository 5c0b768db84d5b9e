//! Post-hoc analyses over frozen parameters: guidance-induced
//! log-probability shifts under direct vs. contrastive teacher
//! constructions, per-expression support-change tables, and
//! reflection-marker frequency. Everything here is read-only.

use crate::error::{Error, Result};
use crate::guidance::{anchor_logits, member_logits, GuidanceConfig};
use crate::rollout::{partition, sample_group, SampleConfig};
use crate::seqmodel::{ModelParams, TokenId, Vocab};
use crate::tasks::Problem;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Direct,
    Contrastive,
}

/// One token's shift Δ(y_t) = log π_T(y_t|x,y_{<t}) − log π_ref(y_t|x,y_{<t})
/// under one teacher construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub t: usize,
    pub token: TokenId,
    pub delta: f64,
    pub construction: Construction,
}

/// Per-position shifts under both constructions, on the same (x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPair {
    pub t: usize,
    pub token: TokenId,
    pub direct: f64,
    pub contrastive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftProfile {
    pub problem_id: String,
    pub tokens: Vec<TokenId>,
    pub records: Vec<ShiftPair>,
}

impl ShiftProfile {
    pub fn flatten(&self) -> Vec<ShiftRecord> {
        let mut out = Vec::with_capacity(self.records.len() * 2);
        for r in &self.records {
            out.push(ShiftRecord {
                t: r.t,
                token: r.token,
                delta: r.direct,
                construction: Construction::Direct,
            });
            out.push(ShiftRecord {
                t: r.t,
                token: r.token,
                delta: r.contrastive,
                construction: Construction::Contrastive,
            });
        }
        out
    }
}

fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Reference log-probabilities of y positions on the plain context.
pub fn reference_logprob_rows(
    p: &ModelParams,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<Array2<f64>> {
    Ok(log_softmax_rows(&anchor_logits(p, x, y, y.len())?))
}

/// Log-probabilities of y positions with the reference model conditioned on
/// one guidance trace. An empty trace means no conditioning at all (the
/// plain context, delimiters included in neither).
pub fn privileged_logprob_rows(
    p: &ModelParams,
    x: &[TokenId],
    g: &[TokenId],
    y: &[TokenId],
    gcfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    if g.is_empty() {
        return reference_logprob_rows(p, x, y);
    }
    Ok(log_softmax_rows(&member_logits(
        p,
        x,
        g,
        y,
        y.len(),
        gcfg,
    )?))
}

/// log π_T^dir(y_t | x, g⁺, y_{<t}) for a 0-based position t.
pub fn direct_teacher_logprob(
    p: &ModelParams,
    x: &[TokenId],
    g_pos: &[TokenId],
    y: &[TokenId],
    t: usize,
    gcfg: &GuidanceConfig,
) -> Result<f64> {
    if t >= y.len() {
        return Err(Error::Contract(format!(
            "position {t} out of range for rollout of length {}",
            y.len()
        )));
    }
    let rows = privileged_logprob_rows(p, x, g_pos, y, gcfg)?;
    Ok(rows[[t, y[t]]])
}

/// Combine log-probability rows contrastively and renormalize:
/// log π^ctr ∝ lp0 + λ (lp⁺ − lp⁻).
pub fn combine_logprob_rows(
    lp0: &Array2<f64>,
    lp_pos: &Array2<f64>,
    lp_neg: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    if lp0.dim() != lp_pos.dim() || lp0.dim() != lp_neg.dim() {
        return Err(Error::Shape(format!(
            "contrastive combination shapes differ: {:?} {:?} {:?}",
            lp0.dim(),
            lp_pos.dim(),
            lp_neg.dim()
        )));
    }
    let combined = lp0 + &((lp_pos - lp_neg) * lambda);
    Ok(log_softmax_rows(&combined))
}

/// log π_T^ctr(y_t | ...) with renormalization over the vocabulary.
pub fn contrastive_teacher_logprob(
    p: &ModelParams,
    x: &[TokenId],
    g_pos: &[TokenId],
    g_neg: &[TokenId],
    y: &[TokenId],
    t: usize,
    lambda: f64,
    gcfg: &GuidanceConfig,
) -> Result<f64> {
    if t >= y.len() {
        return Err(Error::Contract(format!(
            "position {t} out of range for rollout of length {}",
            y.len()
        )));
    }
    let lp0 = reference_logprob_rows(p, x, y)?;
    let lpp = privileged_logprob_rows(p, x, g_pos, y, gcfg)?;
    let lpn = privileged_logprob_rows(p, x, g_neg, y, gcfg)?;
    let rows = combine_logprob_rows(&lp0, &lpp, &lpn, lambda)?;
    Ok(rows[[t, y[t]]])
}

/// Per-token Δ under both constructions on the same rollout, teacher-forced.
pub fn shift_profile(
    p: &ModelParams,
    problem_id: &str,
    x: &[TokenId],
    g_pos: &[TokenId],
    g_neg: &[TokenId],
    y: &[TokenId],
    lambda: f64,
    gcfg: &GuidanceConfig,
) -> Result<ShiftProfile> {
    if y.is_empty() {
        return Err(Error::Contract("shift profile needs a nonempty rollout".into()));
    }
    let lp0 = reference_logprob_rows(p, x, y)?;
    let lp_dir = privileged_logprob_rows(p, x, g_pos, y, gcfg)?;
    let lp_neg = privileged_logprob_rows(p, x, g_neg, y, gcfg)?;
    let lp_ctr = combine_logprob_rows(&lp0, &lp_dir, &lp_neg, lambda)?;
    let records = (0..y.len())
        .map(|t| ShiftPair {
            t,
            token: y[t],
            direct: lp_dir[[t, y[t]]] - lp0[[t, y[t]]],
            contrastive: lp_ctr[[t, y[t]]] - lp0[[t, y[t]]],
        })
        .collect();
    Ok(ShiftProfile {
        problem_id: problem_id.to_string(),
        tokens: y.to_vec(),
        records,
    })
}

/// Sample a reference group and pick one correct and one incorrect rollout
/// as the guidance pair; None when the group lacks either outcome.
pub fn select_guidance_pair(
    policy: &ModelParams,
    vocab: &Vocab,
    problem: &Problem,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Option<(Vec<TokenId>, Vec<TokenId>)>> {
    let group = sample_group(policy, vocab, problem, cfg, seed)?;
    let pools = partition(&group, None);
    match (pools.positive.first(), pools.negative.first()) {
        (Some(p), Some(n)) => Ok(Some((p.clone(), n.clone()))),
        _ => Ok(None),
    }
}

/// Reflection markers counted in generations; the final entry is the toy
/// corpus's own deliberative step word.
pub fn default_keywords() -> Vec<String> {
    [
        "wait",
        "hold on",
        "oops",
        "not quite",
        "hmm",
        "let me rethink",
        "let me reconsider",
        "let me check",
        "recheck",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStats {
    pub counts: Vec<(String, usize)>,
    pub total_tokens: usize,
    pub per_1000_tokens: f64,
}

fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let mut n = 0;
    let mut rest = haystack;
    while let Some(i) = rest.find(needle) {
        n += 1;
        rest = &rest[i + needle.len()..];
    }
    n
}

/// Case-insensitive, whitespace-normalized substring counts with a rate per
/// 1000 generated tokens.
pub fn marker_frequency(texts: &[String], keywords: &[String], total_tokens: usize) -> MarkerStats {
    let normed: Vec<String> = texts.iter().map(|t| normalize(t)).collect();
    let counts: Vec<(String, usize)> = keywords
        .iter()
        .map(|k| {
            let key = normalize(k);
            let n = normed.iter().map(|t| count_occurrences(t, &key)).sum();
            (k.clone(), n)
        })
        .collect();
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    let per_1000_tokens = if total_tokens == 0 {
        0.0
    } else {
        total as f64 * 1000.0 / total_tokens as f64
    };
    MarkerStats {
        counts,
        total_tokens,
        per_1000_tokens,
    }
}

/// Mean token-level shift over all occurrences of an expression's token
/// span; `count` is the number of matched positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportChangeRow {
    pub expression: String,
    pub count: usize,
    pub direct: Option<f64>,
    pub contrastive: Option<f64>,
    pub difference: Option<f64>,
}

/// Average Δ over every position inside matched token spans of each
/// expression, per construction. Expressions that never occur get a
/// count-0 row with empty means.
pub fn support_change_table(
    profiles: &[ShiftProfile],
    expressions: &[String],
    vocab: &Vocab,
) -> Result<Vec<SupportChangeRow>> {
    let mut rows = Vec::with_capacity(expressions.len());
    for expr in expressions {
        let span = vocab.tokenize(expr)?;
        let mut n = 0usize;
        let mut sum_dir = 0.0;
        let mut sum_ctr = 0.0;
        for prof in profiles {
            let toks = &prof.tokens;
            if span.is_empty() || toks.len() < span.len() {
                continue;
            }
            for start in 0..=toks.len() - span.len() {
                if &toks[start..start + span.len()] == span.as_slice() {
                    for r in &prof.records[start..start + span.len()] {
                        n += 1;
                        sum_dir += r.direct;
                        sum_ctr += r.contrastive;
                    }
                }
            }
        }
        let (direct, contrastive, difference) = if n > 0 {
            let d = sum_dir / n as f64;
            let c = sum_ctr / n as f64;
            (Some(d), Some(c), Some(c - d))
        } else {
            (None, None, None)
        };
        rows.push(SupportChangeRow {
            expression: expr.clone(),
            count: n,
            direct,
            contrastive,
            difference,
        });
    }
    Ok(rows)
}
