//! Synthetic verifiable reasoning tasks: nested modular arithmetic with
//! privileged step-by-step solutions, a rule-based verifier, and dataset
//! persistence. A string-reversal family ships behind a config flag.

use crate::error::{Error, Result};
use crate::seqmodel::{TokenId, Vocab, BOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Arith,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt_text: String,
    /// Privileged derivation ending in the canonical answer; available to
    /// the teacher, never to the student at inference.
    pub solution_trace: String,
    pub canonical_answer: String,
    pub k: usize,
    pub m: i64,
    pub family: TaskFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Warmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub problems: Vec<Problem>,
    pub split: Split,
    pub seed: u64,
}

/// Verifier verdict for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub r: u8,
    pub parsed_answer: Option<String>,
    pub format_ok: bool,
}

/// The vocabulary shared by every task family: structural specials, digits,
/// operators, a small word list, lowercase letters, and a truncation marker.
pub fn task_vocab() -> Vocab {
    let words = ["Compute", "Reverse", "mod", "recheck"];
    let chars = [
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "(", ")", "=", ".", " ",
        "\n", "…",
    ];
    let letters = [
        "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r",
        "s", "t", "u", "v", "w", "x", "y", "z",
    ];
    let mut extra: Vec<&str> = Vec::new();
    extra.extend(words);
    extra.extend(chars);
    extra.extend(letters);
    Vocab::build(&extra).expect("static task vocabulary is valid")
}

// ---------------------------------------------------------------------------
// expression trees

#[derive(Debug, Clone)]
enum Expr {
    Leaf(i64),
    Node(char, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn random(k: usize, m: i64, rng: &mut ChaCha8Rng) -> Expr {
        if k == 0 {
            return Expr::Leaf(rng.gen_range(0..m));
        }
        let ops = ['+', '-', '*'];
        let op = ops[rng.gen_range(0..3)];
        let left_k = rng.gen_range(0..k);
        let right_k = k - 1 - left_k;
        Expr::Node(
            op,
            Box::new(Expr::random(left_k, m, rng)),
            Box::new(Expr::random(right_k, m, rng)),
        )
    }

    fn render(&self) -> String {
        match self {
            Expr::Leaf(v) => v.to_string(),
            Expr::Node(op, l, r) => format!("({}{}{})", l.render(), op, r.render()),
        }
    }

    /// Post-order reduction; appends one trace line per internal node.
    fn reduce(&self, m: i64, lines: &mut Vec<String>) -> i64 {
        match self {
            Expr::Leaf(v) => *v,
            Expr::Node(op, l, r) => {
                let a = l.reduce(m, lines);
                let b = r.reduce(m, lines);
                let raw = match op {
                    '+' => a + b,
                    '-' => a - b,
                    '*' => a * b,
                    _ => unreachable!(),
                };
                let v = raw.rem_euclid(m);
                lines.push(format!("{a}{op}{b}={v}"));
                v
            }
        }
    }
}

/// Direct evaluator over the rendered expression text. This is a separate
/// code path from the trace generator and serves as its oracle.
pub fn eval_expr_text(expr: &str, m: i64) -> Result<i64> {
    struct P<'a> {
        s: &'a [u8],
        i: usize,
    }
    impl P<'_> {
        fn expr(&mut self, m: i64) -> Result<i64> {
            if self.i >= self.s.len() {
                return Err(Error::Data("unexpected end of expression".into()));
            }
            if self.s[self.i] == b'(' {
                self.i += 1;
                let a = self.expr(m)?;
                let op = *self
                    .s
                    .get(self.i)
                    .ok_or_else(|| Error::Data("missing operator".into()))?
                    as char;
                self.i += 1;
                let b = self.expr(m)?;
                if self.s.get(self.i) != Some(&b')') {
                    return Err(Error::Data("missing closing paren".into()));
                }
                self.i += 1;
                let raw = match op {
                    '+' => a + b,
                    '-' => a - b,
                    '*' => a * b,
                    _ => return Err(Error::Data(format!("bad operator {op:?}"))),
                };
                Ok(raw.rem_euclid(m))
            } else {
                let start = self.i;
                while self.i < self.s.len() && self.s[self.i].is_ascii_digit() {
                    self.i += 1;
                }
                if start == self.i {
                    return Err(Error::Data("expected a number".into()));
                }
                std::str::from_utf8(&self.s[start..self.i])
                    .unwrap()
                    .parse::<i64>()
                    .map(|v| v.rem_euclid(m))
                    .map_err(|e| Error::Data(e.to_string()))
            }
        }
    }
    let mut p = P {
        s: expr.as_bytes(),
        i: 0,
    };
    let v = p.expr(m)?;
    if p.i != expr.len() {
        return Err(Error::Data(format!("trailing input in expression {expr:?}")));
    }
    Ok(v)
}

/// Generate one nested modular-arithmetic problem with `k` reduction steps.
/// With probability `recheck_prob`, one step is restated after a literal
/// "recheck" marker line (a toy stand-in for deliberative expressions).
pub fn gen_arith_chain(
    k: usize,
    m: i64,
    recheck_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Problem> {
    if k < 1 {
        return Err(Error::Config("arith chain needs k >= 1".into()));
    }
    if m < 2 {
        return Err(Error::Config("arith chain needs modulus >= 2".into()));
    }
    let expr = Expr::random(k, m, rng);
    let expr_text = expr.render();
    let mut lines = Vec::new();
    expr.reduce(m, &mut lines);
    if rng.gen::<f64>() < recheck_prob {
        let at = rng.gen_range(0..lines.len());
        let repeat = lines[at].clone();
        lines.insert(at + 1, "recheck".into());
        lines.insert(at + 2, repeat);
    }
    let canonical = eval_expr_text(&expr_text, m)?;
    let mut trace = lines.join("\n");
    trace.push_str(&format!("\nAnswer: {canonical}"));
    Ok(Problem {
        id: String::new(),
        prompt_text: format!("Compute {expr_text} mod {m}."),
        solution_trace: trace,
        canonical_answer: canonical.to_string(),
        k,
        m,
        family: TaskFamily::Arith,
    })
}

/// Generate one string-reversal problem with per-character steps.
pub fn gen_reverse(len: usize, rng: &mut ChaCha8Rng) -> Result<Problem> {
    if len < 1 {
        return Err(Error::Config("reversal needs length >= 1".into()));
    }
    let s: String = (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
        .collect();
    let rev: String = s.chars().rev().collect();
    let mut lines: Vec<String> = (1..=len).map(|i| rev[..i].to_string()).collect();
    let mut trace = lines.drain(..).collect::<Vec<_>>().join("\n");
    trace.push_str(&format!("\nAnswer: {rev}"));
    Ok(Problem {
        id: String::new(),
        prompt_text: format!("Reverse {s}."),
        solution_trace: trace,
        canonical_answer: rev,
        k: len,
        m: 0,
        family: TaskFamily::Reverse,
    })
}

/// Rule-based verification: parse the LAST case-insensitive "Answer:"
/// occurrence, normalize, and compare against the canonical answer.
/// Unparseable text is r = 0, never an error.
pub fn verify(problem: &Problem, rollout_text: &str) -> VerdictRecord {
    let lower = rollout_text.to_lowercase();
    let Some(at) = lower.rfind("answer:") else {
        return VerdictRecord {
            r: 0,
            parsed_answer: None,
            format_ok: false,
        };
    };
    let after = &rollout_text[at + "answer:".len()..];
    let run: String = after
        .trim_start()
        .chars()
        .take_while(|c| !c.is_whitespace())
        .collect();
    if run.is_empty() {
        return VerdictRecord {
            r: 0,
            parsed_answer: None,
            format_ok: false,
        };
    }
    let correct = match problem.family {
        TaskFamily::Arith => normalize_numeric(&run, problem.m)
            .map(|v| v.to_string() == problem.canonical_answer)
            .unwrap_or(false),
        TaskFamily::Reverse => run == problem.canonical_answer,
    };
    VerdictRecord {
        r: u8::from(correct),
        parsed_answer: Some(run),
        format_ok: true,
    }
}

/// Trim, strip leading zeros, and reduce to the canonical residue in [0, m).
fn normalize_numeric(run: &str, m: i64) -> Option<i64> {
    let t = run.trim();
    let v: i64 = t.parse().ok()?;
    if m >= 2 {
        Some(v.rem_euclid(m))
    } else {
        Some(v)
    }
}

/// Bos-prefixed tokenization of the prompt.
pub fn render_prompt(problem: &Problem, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut toks = vec![BOS];
    toks.extend(vocab.tokenize(&problem.prompt_text)?);
    Ok(toks)
}

// ---------------------------------------------------------------------------
// dataset generation and persistence

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub moduli: Vec<i64>,
    pub recheck_prob: f64,
    /// Fraction of reversal-family problems; 0 disables the second family.
    pub reverse_frac: f64,
    pub reverse_len_min: usize,
    pub reverse_len_max: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            k_min: 2,
            k_max: 4,
            moduli: vec![5, 7, 11],
            recheck_prob: 0.2,
            reverse_frac: 0.0,
            reverse_len_min: 3,
            reverse_len_max: 6,
        }
    }
}

fn gen_one(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Problem> {
    if cfg.reverse_frac > 0.0 && rng.gen::<f64>() < cfg.reverse_frac {
        let len = rng.gen_range(cfg.reverse_len_min..=cfg.reverse_len_max);
        gen_reverse(len, rng)
    } else {
        let k = rng.gen_range(cfg.k_min..=cfg.k_max);
        let m = cfg.moduli[rng.gen_range(0..cfg.moduli.len())];
        gen_arith_chain(k, m, cfg.recheck_prob, rng)
    }
}

/// Generate a split, skipping any prompt already claimed by `taken`
/// (expression-identity split hygiene).
pub fn gen_split(
    cfg: &GenConfig,
    n: usize,
    split: Split,
    seed: u64,
    taken: &mut HashSet<String>,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => "train",
        Split::Eval => "eval",
        Split::Warmup => "warmup",
    };
    let mut problems = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while problems.len() < n {
        attempts += 1;
        if attempts > 200 * n + 1000 {
            return Err(Error::Config(format!(
                "could not generate {n} unique problems; task space too small"
            )));
        }
        let mut p = gen_one(cfg, &mut rng)?;
        if !taken.insert(p.prompt_text.clone()) {
            continue;
        }
        p.id = format!("{tag}-{:05}", problems.len());
        problems.push(p);
    }
    Ok(Dataset {
        problems,
        split,
        seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemRecord {
    id: String,
    prompt_text: String,
    solution_trace: String,
    canonical_answer: String,
    k: usize,
    m: i64,
    split: Split,
    family: TaskFamily,
}

/// One JSON record per line; field order fixed by the record struct.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for p in &ds.problems {
        let rec = ProblemRecord {
            id: p.id.clone(),
            prompt_text: p.prompt_text.clone(),
            solution_trace: p.solution_trace.clone(),
            canonical_answer: p.canonical_answer.clone(),
            k: p.k,
            m: p.m,
            split: ds.split,
            family: p.family,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let mut problems = Vec::new();
    let mut split = None;
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProblemRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}: malformed dataset record at line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        match split {
            None => split = Some(rec.split),
            Some(s) if s != rec.split => {
                return Err(Error::Data(format!(
                    "{}: mixed split tags at line {}",
                    path.display(),
                    lineno + 1
                )))
            }
            _ => {}
        }
        problems.push(Problem {
            id: rec.id,
            prompt_text: rec.prompt_text,
            solution_trace: rec.solution_trace,
            canonical_answer: rec.canonical_answer,
            k: rec.k,
            m: rec.m,
            family: rec.family,
        });
    }
    let split = split.ok_or_else(|| Error::Data(format!("{}: empty dataset", path.display())))?;
    Ok(Dataset {
        problems,
        split,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn direct_eval_oracle() {
        assert_eq!(eval_expr_text("((2+3)*4)", 5).unwrap(), 0);
        assert_eq!(eval_expr_text("(2-4)", 5).unwrap(), 3);
        assert_eq!(eval_expr_text("7", 5).unwrap(), 2);
    }

    #[test]
    fn k1_trace_has_one_step_plus_answer() {
        let p = gen_arith_chain(1, 5, 0.0, &mut rng(3)).unwrap();
        let lines: Vec<&str> = p.solution_trace.lines().collect();
        assert_eq!(lines.len(), 2, "trace: {:?}", p.solution_trace);
        assert!(lines[1].starts_with("Answer: "));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_arith_chain(3, 7, 0.2, &mut rng(11)).unwrap();
        let b = gen_arith_chain(3, 7, 0.2, &mut rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn privileged_solution_always_verifies() {
        let mut r = rng(1);
        for _ in 0..200 {
            let p = gen_arith_chain(1 + r.gen_range(0..4), [5, 7, 11][r.gen_range(0..3)], 0.3, &mut r)
                .unwrap();
            let v = verify(&p, &p.solution_trace);
            assert_eq!(v.r, 1, "trace failed verification: {:?}", p);
            assert!(v.format_ok);
        }
        for _ in 0..50 {
            let p = gen_reverse(1 + r.gen_range(0..6), &mut r).unwrap();
            assert_eq!(verify(&p, &p.solution_trace).r, 1);
        }
    }

    #[test]
    fn verifier_edge_cases() {
        let p = gen_arith_chain(2, 5, 0.0, &mut rng(5)).unwrap();
        let none = verify(&p, "no marker here");
        assert_eq!((none.r, none.format_ok), (0, false));
        let wrong = verify(&p, "Answer: 99999");
        assert!(wrong.format_ok);
        // last occurrence wins
        let text = format!("Answer: 99\nrecheck\nAnswer: {}", p.canonical_answer);
        assert_eq!(verify(&p, &text).r, 1);
        // mod-m normalization: canonical + m is accepted
        let shifted = format!("Answer: {}", p.canonical_answer.parse::<i64>().unwrap() + p.m);
        assert_eq!(verify(&p, &shifted).r, 1);
        // leading zeros are stripped
        let padded = format!("Answer: 00{}", p.canonical_answer);
        assert_eq!(verify(&p, &padded).r, 1);
    }

    #[test]
    fn prompt_round_trips_through_vocab() {
        let v = task_vocab();
        let mut r = rng(9);
        for _ in 0..50 {
            let p = gen_arith_chain(3, 11, 0.2, &mut r).unwrap();
            let toks = v.tokenize(&p.prompt_text).unwrap();
            assert_eq!(v.detokenize(&toks), p.prompt_text);
            let trace_toks = v.tokenize(&p.solution_trace).unwrap();
            assert_eq!(v.detokenize(&trace_toks), p.solution_trace);
        }
        let p = gen_reverse(5, &mut r).unwrap();
        let toks = v.tokenize(&p.solution_trace).unwrap();
        assert_eq!(v.detokenize(&toks), p.solution_trace);
    }

    #[test]
    fn render_prompt_is_bos_prefixed() {
        let v = task_vocab();
        let p = gen_arith_chain(2, 5, 0.0, &mut rng(2)).unwrap();
        let toks = render_prompt(&p, &v).unwrap();
        assert_eq!(toks[0], BOS);
        assert_eq!(v.detokenize(&toks), p.prompt_text);
    }

    #[test]
    fn split_hygiene_and_round_trip() {
        let cfg = GenConfig::default();
        let mut taken = HashSet::new();
        let train = gen_split(&cfg, 100, Split::Train, 7, &mut taken).unwrap();
        let eval = gen_split(&cfg, 30, Split::Eval, 8, &mut taken).unwrap();
        let train_set: HashSet<_> = train.problems.iter().map(|p| &p.prompt_text).collect();
        assert!(eval.problems.iter().all(|p| !train_set.contains(&p.prompt_text)));
        let ids: HashSet<_> = train.problems.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), train.problems.len());

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("train.jsonl");
        save_dataset(&train, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.problems, train.problems);
        assert_eq!(back.split, Split::Train);
        let n_lines = std::fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(n_lines, 100);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.jsonl");
        let cfg = GenConfig::default();
        let ds = gen_split(&cfg, 2, Split::Train, 1, &mut HashSet::new()).unwrap();
        save_dataset(&ds, &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("{truncated\n");
        std::fs::write(&path, content).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn canonical_matches_direct_eval_for_many_problems() {
        let mut r = rng(42);
        for _ in 0..300 {
            let k = 1 + r.gen_range(0..4);
            let m = [5, 7, 11][r.gen_range(0..3)];
            let p = gen_arith_chain(k, m, 0.0, &mut r).unwrap();
            let expr = p
                .prompt_text
                .strip_prefix("Compute ")
                .unwrap()
                .split(" mod ")
                .next()
                .unwrap();
            assert_eq!(
                eval_expr_text(expr, m).unwrap().to_string(),
                p.canonical_answer
            );
        }
    }
}
