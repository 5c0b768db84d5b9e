//! On-policy group sampling, outcome labeling, and guidance-pool
//! construction per prompt.

use crate::error::Result;
use crate::seqmodel::{sample_sequence, ModelParams, TokenId, Vocab};
use crate::tasks::{render_prompt, verify, Problem, VerdictRecord};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One on-policy trajectory with its verifier outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Generated continuation tokens (prompt excluded, eos included when
    /// emitted).
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub verdict: VerdictRecord,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn correct(&self) -> bool {
        self.verdict.r == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub problem_id: String,
    pub prompt_tokens: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
    pub acc: f64,
}

/// Positive pool (verified-correct rollouts plus, optionally, the dataset
/// solution) and negative pool (incorrect rollouts), as token sequences.
#[derive(Debug, Clone, Default)]
pub struct GuidancePools {
    pub positive: Vec<Vec<TokenId>>,
    pub negative: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub max_len: usize,
}

/// Splitmix64 over (seed, j): stable per-rollout seed derivation.
pub fn derive_seed(seed: u64, j: u64) -> u64 {
    let mut z = seed ^ j.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Sample G rollouts from the policy and verify each one. Rollouts hitting
/// the budget without eos are kept and verified rather than dropped.
pub fn sample_group(
    policy: &ModelParams,
    vocab: &Vocab,
    problem: &Problem,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    let prompt = render_prompt(problem, vocab)?;
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for j in 0..cfg.group_size {
        let tokens = sample_sequence(
            policy,
            &prompt,
            cfg.max_len,
            cfg.temperature,
            derive_seed(seed, j as u64),
        )?;
        let text = vocab.detokenize(&tokens);
        let verdict = verify(problem, &text);
        rollouts.push(Rollout {
            tokens,
            text,
            verdict,
        });
    }
    let acc = group_mean(&rollouts);
    Ok(RolloutGroup {
        problem_id: problem.id.clone(),
        prompt_tokens: prompt,
        rollouts,
        acc,
    })
}

fn group_mean(rollouts: &[Rollout]) -> f64 {
    if rollouts.is_empty() {
        return 0.0;
    }
    rollouts.iter().map(|r| r.verdict.r as f64).sum::<f64>() / rollouts.len() as f64
}

pub fn group_accuracy(group: &RolloutGroup) -> f64 {
    group_mean(&group.rollouts)
}

/// Partition a group into guidance pools. `solution` joins the positive
/// pool unconditionally when provided; pass None to exclude it (ablation).
pub fn partition(group: &RolloutGroup, solution: Option<&[TokenId]>) -> GuidancePools {
    let mut pools = GuidancePools::default();
    for r in &group.rollouts {
        if r.correct() {
            pools.positive.push(r.tokens.clone());
        } else {
            pools.negative.push(r.tokens.clone());
        }
    }
    if let Some(s) = solution {
        pools.positive.push(s.to_vec());
    }
    pools
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    problem_id: &'a str,
    j: usize,
    text: &'a str,
    r: u8,
    format_ok: bool,
    length: usize,
}

/// Optional line-delimited rollout dump for offline inspection.
pub fn dump_groups(groups: &[RolloutGroup], path: &Path) -> Result<()> {
    let f = std::fs::File::options().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(f);
    for g in groups {
        for (j, r) in g.rollouts.iter().enumerate() {
            let rec = DumpRecord {
                problem_id: &g.problem_id,
                j,
                text: &r.text,
                r: r.verdict.r,
                format_ok: r.verdict.format_ok,
                length: r.len(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{init_model, ModelDims};
    use crate::tasks::{gen_arith_chain, task_vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, Vocab, Problem) {
        let vocab = task_vocab();
        let params = init_model(
            ModelDims {
                vocab: vocab.size(),
                dim: 16,
                layers: 1,
                window: 128,
            },
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let problem = gen_arith_chain(2, 5, 0.0, &mut rng).unwrap();
        (params, vocab, problem)
    }

    fn cfg() -> SampleConfig {
        SampleConfig {
            group_size: 8,
            temperature: 1.0,
            max_len: 24,
        }
    }

    #[test]
    fn group_has_exactly_g_rollouts_and_is_deterministic() {
        let (p, v, prob) = setup();
        let a = sample_group(&p, &v, &prob, &cfg(), 42).unwrap();
        assert_eq!(a.rollouts.len(), 8);
        let b = sample_group(&p, &v, &prob, &cfg(), 42).unwrap();
        assert_eq!(a, b);
        let c = sample_group(&p, &v, &prob, &cfg(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rollout_text_matches_tokens() {
        let (p, v, prob) = setup();
        let g = sample_group(&p, &v, &prob, &cfg(), 7).unwrap();
        for r in &g.rollouts {
            assert_eq!(r.text, v.detokenize(&r.tokens));
            assert!(r.len() <= 24);
        }
    }

    #[test]
    fn partition_completeness_and_purity() {
        let (p, v, prob) = setup();
        let mut g = sample_group(&p, &v, &prob, &cfg(), 7).unwrap();
        // force a known verdict pattern
        for (i, r) in g.rollouts.iter_mut().enumerate() {
            r.verdict.r = u8::from(i % 2 == 0);
        }
        let sol = v.tokenize(&prob.solution_trace).unwrap();
        let pools = partition(&g, Some(&sol));
        assert_eq!(pools.positive.len(), 4 + 1);
        assert_eq!(pools.negative.len(), 4);
        assert_eq!(pools.positive.len() - 1 + pools.negative.len(), 8);
        let no_sol = partition(&g, None);
        assert_eq!(no_sol.positive.len(), 4);
    }

    #[test]
    fn all_correct_gives_empty_negative() {
        let (p, v, prob) = setup();
        let mut g = sample_group(&p, &v, &prob, &cfg(), 7).unwrap();
        for r in g.rollouts.iter_mut() {
            r.verdict.r = 1;
        }
        let pools = partition(&g, None);
        assert!(pools.negative.is_empty());
        assert_eq!(pools.positive.len(), 8);
    }

    #[test]
    fn accuracy_is_mean_of_verdicts() {
        let (p, v, prob) = setup();
        let mut g = sample_group(&p, &v, &prob, &cfg(), 7).unwrap();
        for (i, r) in g.rollouts.iter_mut().enumerate() {
            r.verdict.r = u8::from(i < 5);
        }
        assert_eq!(group_accuracy(&g), 0.625);
        for r in g.rollouts.iter_mut() {
            r.verdict.r = 0;
        }
        assert_eq!(group_accuracy(&g), 0.0);
    }

    #[test]
    fn seed_derivation_is_injective_enough() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..50u64 {
            for j in 0..16u64 {
                assert!(seen.insert(derive_seed(s, j)));
            }
        }
    }
}
