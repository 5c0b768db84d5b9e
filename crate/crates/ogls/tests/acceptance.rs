//! End-to-end acceptance checks. Each test prints one machine-greppable
//! `ACCEPTANCE n (<name>): PASS|FAIL` line (via a helper that bypasses the
//! harness's output capture) and enforces its own runtime budget.
//!
//! Long statistical checks (9-11) cache their warmup base and finished runs
//! under `target/acceptance/` so reruns and the ablation test reuse work;
//! caches are fingerprinted by config and invalidated automatically.

use ndarray::{Array1, Array2};
use ogls::diagnostics::{
    combine_logprob_rows, privileged_logprob_rows, reference_logprob_rows, shift_profile,
};
use ogls::guidance::{
    anchor_logits, build_steered_teacher, steer_logits, teacher_distribution, GuidanceConfig,
};
use ogls::losses::{
    adaptive_eta, forward_kl, grpo_lite_loss, opsd_loss, pos_tail_loss, rollout_steer_loss,
    sft_loss, steering_loss, LossConfig, PosItem, SteerItem,
};
use ogls::rollout::{partition, GuidancePools, Rollout, RolloutGroup};
use ogls::seqmodel::diff::backward;
use ogls::seqmodel::forward::forward_logits;
use ogls::seqmodel::{
    init_model, Checkpoint, DiffModel, ModelDims, ModelParams, TokenId, Vocab,
    CHECKPOINT_VERSION, EOS, GUIDE_CLOSE, GUIDE_OPEN,
};
use ogls::tape::{Tape, Var};
use ogls::tasks::{gen_split, task_vocab, Dataset, GenConfig, Split, VerdictRecord};
use ogls::trainer::{evaluate, pretrain_base, run, Method, RunReport, TrainConfig, WarmupConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

/// Print straight to the process stdout descriptor so the line survives
/// the harness's output capture (which only hooks the print macros).
fn announce(line: String) {
    use std::io::Write;
    if let Ok(mut out) = std::fs::OpenOptions::new().write(true).open("/dev/stdout") {
        let _ = writeln!(out, "{line}");
    } else {
        println!("{line}");
    }
}

fn verdict(n: usize, name: &str, pass: bool, secs: f64, detail: &str) -> bool {
    announce(format!(
        "ACCEPTANCE {n} ({name}): {} [{secs:.1}s] {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    pass
}

fn acceptance_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn rand_tokens(rng: &mut ChaCha8Rng, v: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..v)).collect()
}

fn rand_tokens_r(rng: &mut ChaCha8Rng, v: usize, lo: usize, hi: usize) -> Vec<TokenId> {
    let len = rng.gen_range(lo..hi);
    rand_tokens(rng, v, len)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// 1. steering identity at lambda = 0

#[test]
fn c01_steering_identity_at_zero_lambda() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let teacher = init_model(
        ModelDims {
            vocab: v,
            dim: 16,
            layers: 1,
            window: 64,
        },
        11,
    )
    .unwrap();
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = rand_tokens_r(&mut rng, v, 3, 8);
        let y = rand_tokens_r(&mut rng, v, 1, 6);
        let pools = GuidancePools {
            positive: (0..rng.gen_range(1..4))
                .map(|_| rand_tokens_r(&mut rng, v, 2, 10))
                .collect(),
            negative: (0..rng.gen_range(1..4))
                .map(|_| rand_tokens_r(&mut rng, v, 2, 10))
                .collect(),
        };
        let steered = build_steered_teacher(&teacher, &pools, &x, &y, 0.0, 8, &gcfg).unwrap();
        let anchor = anchor_logits(&teacher, &x, &y, steered.horizon).unwrap();
        let expect = teacher_distribution(&anchor).unwrap();
        worst = worst.max(max_abs_diff(&steered.probs, &expect));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 10.0;
    assert!(
        verdict(
            1,
            "steering-identity",
            pass,
            secs,
            &format!("100 cases, max |pi_T - anchor softmax| = {worst:.2e}")
        ),
        "lambda=0 identity violated: {worst:.2e} (or budget exceeded)"
    );
}

// ---------------------------------------------------------------------------
// 2. shift invariance and pool cancellation

#[test]
fn c02_shift_invariance_and_cancellation() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_shift = 0.0f64;
    let mut worst_cancel = 0.0f64;
    for _ in 0..100 {
        let h = rng.gen_range(1..4);
        let v = rng.gen_range(5..30);
        let mk = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((h, v), |_| rng.gen_range(-3.0..3.0f64))
        };
        let (z0, zp, zn) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let lambda = rng.gen_range(0.1..4.0);
        let base = teacher_distribution(&steer_logits(&z0, &zp, &zn, lambda).unwrap()).unwrap();
        // shift every input by a per-row constant
        let shift = |z: &Array2<f64>, rng: &mut ChaCha8Rng| {
            let mut out = z.clone();
            for mut row in out.rows_mut() {
                let c = rng.gen_range(-5.0..5.0);
                row.mapv_inplace(|x| x + c);
            }
            out
        };
        let shifted = teacher_distribution(
            &steer_logits(
                &shift(&z0, &mut rng),
                &shift(&zp, &mut rng),
                &shift(&zn, &mut rng),
                lambda,
            )
            .unwrap(),
        )
        .unwrap();
        worst_shift = worst_shift.max(max_abs_diff(&base, &shifted));
        // identical pool means cancel exactly
        let cancel = teacher_distribution(&steer_logits(&z0, &zp, &zp, lambda).unwrap()).unwrap();
        let plain = teacher_distribution(&z0).unwrap();
        worst_cancel = worst_cancel.max(max_abs_diff(&cancel, &plain));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_shift <= 1e-12 && worst_cancel <= 1e-12 && secs < 10.0;
    assert!(
        verdict(
            2,
            "shift-invariance-and-cancellation",
            pass,
            secs,
            &format!("100 cases, shift {worst_shift:.2e}, cancellation {worst_cancel:.2e}")
        ),
        "shift invariance {worst_shift:.2e} / cancellation {worst_cancel:.2e}"
    );
}

// ---------------------------------------------------------------------------
// 3. singleton pools reduce to the two-trace contrast formula

#[test]
fn c03_singleton_reduction() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let teacher = init_model(
        ModelDims {
            vocab: v,
            dim: 16,
            layers: 2,
            window: 128,
        },
        13,
    )
    .unwrap();
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = rand_tokens_r(&mut rng, v, 3, 8);
        let y = rand_tokens(&mut rng, v, 4);
        let g_pos = rand_tokens_r(&mut rng, v, 3, 12);
        let g_neg = rand_tokens_r(&mut rng, v, 3, 12);
        for gamma in [0.5, 1.0, 3.0] {
            let pools = GuidancePools {
                positive: vec![g_pos.clone()],
                negative: vec![g_neg.clone()],
            };
            let steered =
                build_steered_teacher(&teacher, &pools, &x, &y, gamma, 8, &gcfg).unwrap();
            // independent per-position implementation: one full forward per
            // prefix, last row only, combined by hand
            for t in 0..steered.horizon {
                let last_row = |ctx: &[TokenId]| -> Vec<f64> {
                    let z = forward_logits(&teacher, ctx).unwrap();
                    z.row(z.nrows() - 1).to_vec()
                };
                let mut c0 = x.clone();
                c0.extend_from_slice(&y[..t]);
                let r0 = last_row(&c0);
                let priv_ctx = |g: &[TokenId]| {
                    let mut c = x.clone();
                    c.push(GUIDE_OPEN);
                    c.extend_from_slice(g);
                    c.push(GUIDE_CLOSE);
                    c.extend_from_slice(&y[..t]);
                    c
                };
                let rp = last_row(&priv_ctx(&g_pos));
                let rn = last_row(&priv_ctx(&g_neg));
                let z: Vec<f64> = (0..v)
                    .map(|j| r0[j] + gamma * (rp[j] - rn[j]))
                    .collect();
                let p = softmax_vec(&z);
                for j in 0..v {
                    worst = worst.max((p[j] - steered.probs[[t, j]]).abs());
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 30.0;
    assert!(
        verdict(
            3,
            "singleton-reduction",
            pass,
            secs,
            &format!("5 cases x 3 gammas, max deviation {worst:.2e}")
        ),
        "singleton reduction deviates by {worst:.2e}"
    );
}

// ---------------------------------------------------------------------------
// 4. finite-difference gradient checks across every loss

fn eval_loss<F>(params: &ModelParams, build: &F) -> (f64, Vec<f64>)
where
    F: for<'t> Fn(&'t Tape, &DiffModel<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let model = DiffModel::new(&tape, params);
    let loss = build(&tape, &model);
    let grads = backward(&tape, &loss, &model);
    let flat: Vec<f64> = grads.tensors.iter().flat_map(|t| t.iter().cloned()).collect();
    (loss.scalar_value(), flat)
}

fn fd_check<F>(
    params: &ModelParams,
    build: &F,
    rng: &mut ChaCha8Rng,
    n_coords: usize,
) -> (usize, f64)
where
    F: for<'t> Fn(&'t Tape, &DiffModel<'t>) -> Var<'t>,
{
    let (_, grad) = eval_loss(params, build);
    let flat = params.to_flat();
    // prefer coordinates with visible gradient so the relative error is
    // well-conditioned
    let mut candidates: Vec<usize> = (0..flat.len()).filter(|&i| grad[i].abs() > 1e-5).collect();
    if candidates.is_empty() {
        candidates = (0..flat.len()).collect();
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..n_coords {
        let i = candidates[rng.gen_range(0..candidates.len())];
        let h = 1e-5;
        let mut p = params.clone();
        let mut f = flat.clone();
        f[i] += h;
        p.load_flat(&f);
        let up = eval_loss(&p, build).0;
        f[i] = flat[i] - h;
        p.load_flat(&f);
        let down = eval_loss(&p, build).0;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / f64::max(1e-8, fd.abs().max(grad[i].abs()));
        worst = worst.max(rel);
        checked += 1;
    }
    (checked, worst)
}

#[test]
fn c04_gradient_correctness() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let dims = ModelDims {
        vocab: v,
        dim: 6,
        layers: 1,
        window: 48,
    };
    let student = init_model(dims, 21).unwrap();
    let teacher = init_model(dims, 22).unwrap();
    assert!(
        student.n_params() <= 5000,
        "gradient-check model too large: {}",
        student.n_params()
    );
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tokens(&mut rng, v, 5);
    let y = rand_tokens(&mut rng, v, 6);
    let s = rand_tokens(&mut rng, v, 7);
    let pools = GuidancePools {
        positive: vec![s.clone(), rand_tokens(&mut rng, v, 5)],
        negative: vec![rand_tokens(&mut rng, v, 6)],
    };
    let steered = build_steered_teacher(&teacher, &pools, &x, &y, 1.0, 16, &gcfg).unwrap();
    let mut p_t = Array1::from_shape_fn(v, |_| rng.gen_range(0.01..1.0f64));
    let total: f64 = p_t.sum();
    p_t.mapv_inplace(|e| e / total);
    let group = RolloutGroup {
        problem_id: "fd".into(),
        prompt_tokens: x.clone(),
        rollouts: vec![
            Rollout {
                tokens: {
                    let mut t = y.clone();
                    t.push(EOS);
                    t
                },
                text: String::new(),
                verdict: VerdictRecord {
                    r: 1,
                    parsed_answer: None,
                    format_ok: true,
                },
            },
            Rollout {
                tokens: rand_tokens(&mut rng, v, 5),
                text: String::new(),
                verdict: VerdictRecord {
                    r: 0,
                    parsed_answer: None,
                    format_ok: false,
                },
            },
            Rollout {
                tokens: rand_tokens(&mut rng, v, 4),
                text: String::new(),
                verdict: VerdictRecord {
                    r: 0,
                    parsed_answer: None,
                    format_ok: false,
                },
            },
        ],
        acc: 1.0 / 3.0,
    };
    let loss_cfg = LossConfig {
        clip_tau: 0.0,
        pos_window: 3,
        ..LossConfig::default()
    };

    let mut total_checks = 0usize;
    let mut worst = 0.0f64;
    let mut per_loss = String::new();
    {
        let mut run_one =
            |name: &str, build: &dyn for<'t> Fn(&'t Tape, &DiffModel<'t>) -> Var<'t>| {
                let (n, w) = fd_check(&student, &build, &mut rng, 4);
                total_checks += n;
                worst = worst.max(w);
                per_loss.push_str(&format!("{name} {w:.1e}; "));
            };
        let (xc, yc, sc) = (x.clone(), y.clone(), s.clone());
        let p_tc = p_t.clone();
        run_one("forward_kl", &move |tape, model| {
            let seq = xc.clone();
            let z = model.forward_logits(&seq).unwrap();
            let n = seq.len();
            forward_kl(tape, &p_tc, &z.slice_rows(n - 1, n)).unwrap()
        });
        let item = SteerItem {
            x: x.clone(),
            y: y.clone(),
            teacher: steered.clone(),
        };
        let lc = loss_cfg.clone();
        run_one("rollout_steer_loss", &move |tape, model| {
            rollout_steer_loss(tape, model, &item, &lc).unwrap().0
        });
        let (xc, yc2, sc2, gc, lc2) =
            (x.clone(), y.clone(), s.clone(), gcfg.clone(), loss_cfg.clone());
        let teacher_c = teacher.clone();
        run_one("opsd_loss", &move |tape, model| {
            opsd_loss(tape, model, &teacher_c, &xc, &sc2, &yc2, &lc2, &gc).unwrap()
        });
        let items = vec![
            PosItem {
                x: x.clone(),
                y: y.clone(),
            },
            PosItem {
                x: x.clone(),
                y: s.clone(),
            },
        ];
        let lc3 = loss_cfg.clone();
        run_one("pos_tail_loss", &move |tape, model| {
            pos_tail_loss(tape, model, &items, &lc3).unwrap().0
        });
        let gr = group.clone();
        run_one("grpo_lite_loss", &move |tape, model| {
            grpo_lite_loss(tape, model, &gr).unwrap()
        });
        let (xc2, mut tgt) = (x.clone(), sc);
        tgt.push(EOS);
        run_one("sft_loss", &move |tape, model| {
            sft_loss(tape, model, &xc2, &tgt).unwrap()
        });
        let _ = yc;
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = total_checks >= 20 && worst <= 1e-3 && secs < 120.0;
    assert!(
        verdict(
            4,
            "gradient-correctness",
            pass,
            secs,
            &format!("{total_checks} checks, worst rel err {worst:.2e} ({per_loss})")
        ),
        "finite differences disagree: worst {worst:.2e} over {total_checks} checks"
    );
}

// ---------------------------------------------------------------------------
// 5. masking exactness

#[test]
fn c05_masking_exactness() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let dims = ModelDims {
        vocab: v,
        dim: 8,
        layers: 1,
        window: 64,
    };
    let student = init_model(dims, 31).unwrap();
    let teacher = init_model(dims, 32).unwrap();
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tokens(&mut rng, v, 4);

    // (a) position-level mechanism: rows outside a gathered tail and rows
    // past a horizon slice receive exactly zero upstream gradient
    let mut max_out_of_mask = 0.0f64;
    {
        let tape = Tape::new();
        let z = tape.leaf2(Array2::from_shape_fn((8, v), |_| rng.gen_range(-1.0..1.0f64)));
        let lp = z.log_softmax_rows();
        let idx: Vec<(usize, usize)> = (5..8).map(|t| (t, t % v)).collect();
        let loss = lp.gather_entries(&idx).sum().neg();
        let grads = tape.backward(&loss);
        let gz = grads.get(&z);
        for t in 0..5 {
            for j in 0..v {
                max_out_of_mask = max_out_of_mask.max(gz[[t, j]].abs());
            }
        }
        let z2 = tape.leaf2(Array2::from_shape_fn((8, v), |_| rng.gen_range(-1.0..1.0f64)));
        let loss2 = z2.log_softmax_rows().slice_rows(0, 3).sum();
        let g2 = tape.backward(&loss2);
        let gz2 = g2.get(&z2);
        for t in 3..8 {
            for j in 0..v {
                max_out_of_mask = max_out_of_mask.max(gz2[[t, j]].abs());
            }
        }
    }

    // (b) the tail loss equals an independently-built tail-only objective,
    // gradients bitwise identical
    let y: Vec<TokenId> = rand_tokens(&mut rng, v, 9);
    let cfg = LossConfig {
        pos_window: 3,
        ..LossConfig::default()
    };
    let item = PosItem {
        x: x.clone(),
        y: y.clone(),
    };
    let (v1, g1) = eval_loss(&student, &|tape, model| {
        pos_tail_loss(tape, model, std::slice::from_ref(&item), &cfg)
            .unwrap()
            .0
    });
    let (v2, g2) = eval_loss(&student, &|_tape, model| {
        let mut seq = x.clone();
        seq.extend_from_slice(&y[..y.len() - 1]);
        let lp = model.forward_logits(&seq).unwrap().log_softmax_rows();
        let start = y.len() - 3;
        let idx: Vec<(usize, usize)> = (start..y.len())
            .map(|t| (x.len() - 1 + t, y[t]))
            .collect();
        lp.gather_entries(&idx).sum().neg().scale(1.0)
    });
    let tail_match = v1 == v2 && g1 == g2;

    // (c) steering loss ignores rollout tokens past the horizon: bitwise
    // identical loss and gradients after rewriting them
    let horizon_cfg = LossConfig {
        max_horizon: 4,
        ..LossConfig::default()
    };
    let y_long = rand_tokens(&mut rng, v, 8);
    let mut y_rewritten = y_long.clone();
    for t in 4..8 {
        y_rewritten[t] = (y_long[t] + 1) % v;
    }
    let pools = GuidancePools {
        positive: vec![rand_tokens(&mut rng, v, 5)],
        negative: vec![rand_tokens(&mut rng, v, 5)],
    };
    let teacher_dist =
        build_steered_teacher(&teacher, &pools, &x, &y_long, 2.0, 4, &gcfg).unwrap();
    let mk_item = |y: &Vec<TokenId>| SteerItem {
        x: x.clone(),
        y: y.clone(),
        teacher: teacher_dist.clone(),
    };
    let (ia, ib) = (mk_item(&y_long), mk_item(&y_rewritten));
    let hc = horizon_cfg.clone();
    let (va, ga) = eval_loss(&student, &move |tape, model| {
        rollout_steer_loss(tape, model, &ia, &hc).unwrap().0
    });
    let hc2 = horizon_cfg.clone();
    let (vb, gb) = eval_loss(&student, &move |tape, model| {
        rollout_steer_loss(tape, model, &ib, &hc2).unwrap().0
    });
    let horizon_match = va == vb && ga == gb;

    let secs = t0.elapsed().as_secs_f64();
    let pass = max_out_of_mask == 0.0 && tail_match && horizon_match && secs < 30.0;
    assert!(
        verdict(
            5,
            "masking-exactness",
            pass,
            secs,
            &format!(
                "out-of-mask grad {max_out_of_mask:.1e}, tail bitwise {tail_match}, \
                 beyond-horizon bitwise {horizon_match}"
            )
        ),
        "masking not exact"
    );
}

// ---------------------------------------------------------------------------
// 6. skip rules and the adaptive auxiliary coefficient

fn synthetic_group(
    v: usize,
    rng: &mut ChaCha8Rng,
    verdicts: &[u8],
    x: &[TokenId],
) -> RolloutGroup {
    let rollouts: Vec<Rollout> = verdicts
        .iter()
        .map(|&r| Rollout {
            tokens: rand_tokens_r(rng, v, 3, 8),
            text: String::new(),
            verdict: VerdictRecord {
                r,
                parsed_answer: None,
                format_ok: r == 1,
            },
        })
        .collect();
    let acc = verdicts.iter().map(|&r| r as f64).sum::<f64>() / verdicts.len() as f64;
    RolloutGroup {
        problem_id: "synthetic".into(),
        prompt_tokens: x.to_vec(),
        rollouts,
        acc,
    }
}

#[test]
fn c06_skip_rules_and_adaptive_eta() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tokens(&mut rng, v, 4);
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let dims = ModelDims {
        vocab: v,
        dim: 8,
        layers: 1,
        window: 64,
    };
    let model_params = init_model(dims, 41).unwrap();
    let mut failures = Vec::new();

    // all-correct group: negative pool empty, steering loss is an exact
    // zero with an exactly-zero gradient
    let all_correct = synthetic_group(v, &mut rng, &[1, 1, 1, 1], &x);
    let solution = rand_tokens(&mut rng, v, 6);
    let pools = partition(&all_correct, Some(&solution));
    if !pools.negative.is_empty() {
        failures.push("negative pool not empty for all-correct group".to_string());
    }
    match build_steered_teacher(&model_params, &pools, &x, &solution, 1.0, 8, &gcfg) {
        Err(ogls::Error::EmptyPool(_)) => {}
        other => failures.push(format!("expected empty-pool skip, got {other:?}")),
    }
    let (zero_val, zero_grad) = eval_loss(&model_params, &|tape, model| {
        steering_loss(tape, model, &[], &LossConfig::default())
            .unwrap()
            .0
    });
    if zero_val != 0.0 || zero_grad.iter().any(|&g| g != 0.0) {
        failures.push("empty steering loss is not an exact zero".to_string());
    }

    // all-incorrect group without a solution: positive pool empty, the
    // prompt contributes nothing
    let all_wrong = synthetic_group(v, &mut rng, &[0, 0, 0], &x);
    let pools = partition(&all_wrong, None);
    if !pools.positive.is_empty() {
        failures.push("positive pool not empty without correct rollouts".into());
    }
    match build_steered_teacher(&model_params, &pools, &x, &all_wrong.rollouts[0].tokens, 1.0, 8, &gcfg)
    {
        Err(ogls::Error::EmptyPool(_)) => {}
        other => failures.push(format!("expected empty-pool skip, got {other:?}")),
    }

    // adaptive coefficient formula
    let mut worst_eta = 0.0f64;
    for i in 0..=20 {
        let acc = i as f64 / 20.0;
        for eta0 in [0.01, 0.05, 0.5, 1.0] {
            worst_eta = worst_eta.max((adaptive_eta(eta0, acc) - eta0 * (1.0 - acc)).abs());
        }
    }
    if worst_eta > 1e-12 {
        failures.push(format!("adaptive eta off by {worst_eta:.2e}"));
    }

    // live mixed batches: skip accounting is exact and the recorded
    // decomposition satisfies total = steer + eta * pos with
    // eta = eta0 (1 - acc) for single-prompt batches
    let mut taken = HashSet::new();
    let gen = GenConfig {
        k_min: 2,
        k_max: 2,
        moduli: vec![5],
        recheck_prob: 0.0,
        ..GenConfig::default()
    };
    let train = gen_split(&gen, 40, Split::Train, 61, &mut taken).unwrap();
    let warm = gen_split(&gen, 80, Split::Warmup, 62, &mut taken).unwrap();
    let wdims = ModelDims {
        vocab: v,
        dim: 24,
        layers: 2,
        window: 112,
    };
    let base = pretrain_base(
        wdims,
        &vocab,
        &warm,
        &WarmupConfig {
            steps: 250,
            ..WarmupConfig::default()
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        method: Method::Ogls,
        batch: 1,
        group_size: 6,
        max_rollout_len: 32,
        steps: 6,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut state = ogls::trainer::TrainState::new(&base);
    let probs: Vec<&ogls::tasks::Problem> = train.problems.iter().collect();
    for _ in 0..6 {
        let idx = ogls::trainer::select_batch(cfg.seed, state.step, cfg.batch, probs.len());
        let batch: Vec<&ogls::tasks::Problem> = idx.iter().map(|&i| probs[i]).collect();
        let m = ogls::trainer::train_step(&mut state, &cfg, &vocab, &batch).unwrap();
        let total = m.n_steered + m.n_skipped_correct + m.n_skipped_empty_pool;
        if total != cfg.batch * cfg.group_size {
            failures.push(format!(
                "step {}: skip accounting {total} != G*batch {}",
                m.step,
                cfg.batch * cfg.group_size
            ));
        }
        let acc = m.acc.unwrap();
        let eta_expect = adaptive_eta(cfg.loss.eta0, acc);
        if (m.eta - eta_expect).abs() > 1e-12 {
            failures.push(format!("step {}: eta {} != {}", m.step, m.eta, eta_expect));
        }
        let recomposed = m.loss_steer + m.eta * m.loss_pos;
        if (m.loss_total - recomposed).abs() > 1e-12 {
            failures.push(format!(
                "step {}: total {} != steer + eta*pos {}",
                m.step, m.loss_total, recomposed
            ));
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    assert!(
        verdict(
            6,
            "skip-rules-and-eta",
            pass,
            secs,
            &if failures.is_empty() {
                "empty-pool skips, zero steering loss, eta formula, live accounting".to_string()
            } else {
                failures.join(" | ")
            }
        ),
        "{failures:?}"
    );
}

// ---------------------------------------------------------------------------
// 7. divergence clipping

#[test]
fn c07_clipping() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let dims = ModelDims {
        vocab: v,
        dim: 8,
        layers: 1,
        window: 64,
    };
    let student = init_model(dims, 51).unwrap();
    let mut teacher = init_model(dims, 52).unwrap();
    // sharpen the teacher head so per-vocab summands exceed the clip bound
    teacher.w_head.mapv_inplace(|w| w * 8.0);
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tokens(&mut rng, v, 4);
    let y = rand_tokens(&mut rng, v, 6);
    let pools = GuidancePools {
        positive: vec![rand_tokens(&mut rng, v, 5)],
        negative: vec![rand_tokens(&mut rng, v, 5)],
    };
    let steered = build_steered_teacher(&teacher, &pools, &x, &y, 1.0, 16, &gcfg).unwrap();
    let item = SteerItem {
        x: x.clone(),
        y: y.clone(),
        teacher: steered.clone(),
    };
    let loss_at = |tau: f64| {
        let item = item.clone();
        let cfg = LossConfig {
            clip_tau: tau,
            ..LossConfig::default()
        };
        eval_loss(&student, &move |tape, model| {
            rollout_steer_loss(tape, model, &item, &cfg).unwrap().0
        })
    };
    // the disabled sentinel and an infinite bound agree bitwise
    let (v_off, g_off) = loss_at(0.0);
    let (v_inf, g_inf) = loss_at(f64::INFINITY);
    let (v_huge, g_huge) = loss_at(1e15);
    let sentinel_ok = v_off == v_inf && g_off == g_inf && v_off == v_huge && g_off == g_huge;

    // tau = 0.05: direct scan over every per-vocab summand
    let tau = 0.05;
    let item2 = item.clone();
    let cfg_clip = LossConfig {
        clip_tau: tau,
        ..LossConfig::default()
    };
    let (v_clip, n_clipped) = {
        let tape = Tape::new();
        let model = DiffModel::new(&tape, &student);
        let (l, n) = rollout_steer_loss(&tape, &model, &item2, &cfg_clip).unwrap();
        (l.scalar_value(), n)
    };
    // independent summand scan from pure forwards
    let h = steered.horizon;
    let mut seq = x.clone();
    seq.extend_from_slice(&y[..h - 1]);
    let z = forward_logits(&student, &seq).unwrap();
    let mut scan_sum = 0.0;
    let mut scan_clipped = 0usize;
    let mut max_clamped = 0.0f64;
    for t in 0..h {
        let row = z.row(x.len() - 1 + t).to_vec();
        let lp = {
            let p = softmax_vec(&row);
            p.iter().map(|q| q.max(1e-12).ln()).collect::<Vec<f64>>()
        };
        for j in 0..v {
            let p = steered.probs[[t, j]];
            let delta = p * (p.max(1e-12).ln() - lp[j]);
            if delta.abs() > tau {
                scan_clipped += 1;
            }
            let clamped = delta.clamp(-tau, tau);
            max_clamped = max_clamped.max(clamped.abs());
            scan_sum += clamped;
        }
    }
    let scan_loss = scan_sum / h as f64;
    let clip_value_ok = (scan_loss - v_clip).abs() <= 1e-12;
    let clip_count_ok = scan_clipped == n_clipped && scan_clipped > 0;
    let bound_ok = max_clamped <= tau + 1e-15;

    let secs = t0.elapsed().as_secs_f64();
    let pass = sentinel_ok && clip_value_ok && clip_count_ok && bound_ok && secs < 30.0;
    assert!(
        verdict(
            7,
            "clipping",
            pass,
            secs,
            &format!(
                "sentinel bitwise {sentinel_ok}; tau=0.05 scan: value match {clip_value_ok}, \
                 {scan_clipped} clipped summands (impl {n_clipped}), all within bound {bound_ok}"
            )
        ),
        "clipping semantics violated"
    );
}

// ---------------------------------------------------------------------------
// 8. diagnostic identities

#[test]
fn c08_diagnostic_identities() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let v = vocab.size();
    let p = init_model(
        ModelDims {
            vocab: v,
            dim: 16,
            layers: 1,
            window: 128,
        },
        61,
    )
    .unwrap();
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_neutral = 0.0f64;
    let mut worst_equal = 0.0f64;
    let mut worst_swap = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..10 {
        let x = rand_tokens_r(&mut rng, v, 3, 7);
        let y = rand_tokens_r(&mut rng, v, 2, 6);
        let g = rand_tokens_r(&mut rng, v, 3, 10);
        let g2 = rand_tokens_r(&mut rng, v, 3, 10);
        let lambda = rng.gen_range(0.5..3.0);

        // neutral guidance: empty trace leaves both constructions at the
        // reference
        let prof = shift_profile(&p, "t", &x, &[], &[], &y, lambda, &gcfg).unwrap();
        for r in &prof.records {
            worst_neutral = worst_neutral.max(r.direct.abs()).max(r.contrastive.abs());
        }
        // identical pools cancel in the contrastive construction
        let prof_eq = shift_profile(&p, "t", &x, &g, &g, &y, lambda, &gcfg).unwrap();
        for r in &prof_eq.records {
            worst_equal = worst_equal.max(r.contrastive.abs());
        }
        // swap antisymmetry of the steering term
        let lp0 = reference_logprob_rows(&p, &x, &y).unwrap();
        let lpp = privileged_logprob_rows(&p, &x, &g, &y, &gcfg).unwrap();
        let lpn = privileged_logprob_rows(&p, &x, &g2, &y, &gcfg).unwrap();
        let term = (&lpp - &lpn) * lambda;
        let term_swapped = (&lpn - &lpp) * lambda;
        worst_swap = worst_swap.max(
            (&term + &term_swapped)
                .iter()
                .map(|e| e.abs())
                .fold(0.0, f64::max),
        );
        let c1 = combine_logprob_rows(&lp0, &lpp, &lpn, lambda).unwrap();
        let c2 = combine_logprob_rows(&lp0, &lpn, &lpp, -lambda).unwrap();
        worst_swap = worst_swap.max(max_abs_diff(&c1, &c2));
        // rows of the contrastive teacher normalize
        for row in c1.rows() {
            let s: f64 = row.iter().map(|lp| lp.exp()).sum();
            worst_norm = worst_norm.max((s - 1.0).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_neutral <= 1e-12
        && worst_equal <= 1e-12
        && worst_swap <= 1e-12
        && worst_norm <= 1e-6
        && secs < 60.0;
    assert!(
        verdict(
            8,
            "diagnostic-identities",
            pass,
            secs,
            &format!(
                "neutral {worst_neutral:.1e}, equal-pools {worst_equal:.1e}, \
                 swap {worst_swap:.1e}, row norm {worst_norm:.1e}"
            )
        ),
        "diagnostic identities violated"
    );
}

// ---------------------------------------------------------------------------
// 9. determinism and bit-exact resume

#[test]
fn c09_determinism_and_resume() {
    let t0 = Instant::now();
    let vocab = task_vocab();
    let gen = GenConfig {
        k_min: 2,
        k_max: 2,
        moduli: vec![5],
        recheck_prob: 0.0,
        ..GenConfig::default()
    };
    let mut taken = HashSet::new();
    let train = gen_split(&gen, 40, Split::Train, 91, &mut taken).unwrap();
    let eval_ds = gen_split(&gen, 12, Split::Eval, 92, &mut taken).unwrap();
    let base = init_model(
        ModelDims {
            vocab: vocab.size(),
            dim: 24,
            layers: 2,
            window: 112,
        },
        93,
    )
    .unwrap();
    let cfg = TrainConfig {
        method: Method::Ogls,
        steps: 100,
        batch: 2,
        group_size: 4,
        max_rollout_len: 32,
        eval_every: 50,
        eval_k: 2,
        eval_budget: 24,
        seed: 5,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let full = run(&cfg, &vocab, &train, &eval_ds, &base, None, Some(dir.path())).unwrap();

    let half_cfg = TrainConfig {
        steps: 50,
        ..cfg.clone()
    };
    let dir2 = tempfile::tempdir().unwrap();
    let half = run(
        &half_cfg,
        &vocab,
        &train,
        &eval_ds,
        &base,
        None,
        Some(dir2.path()),
    )
    .unwrap();
    let resumed = run(
        &cfg,
        &vocab,
        &train,
        &eval_ds,
        &base,
        Some((half.final_params.clone(), half.final_opt.clone(), 50)),
        Some(dir2.path()),
    )
    .unwrap();

    let tail_full: Vec<String> = full.metrics[50..]
        .iter()
        .map(|m| serde_json::to_string(m).unwrap())
        .collect();
    let tail_resumed: Vec<String> = resumed
        .metrics
        .iter()
        .map(|m| serde_json::to_string(m).unwrap())
        .collect();
    let metrics_match = tail_full == tail_resumed;
    let params_match = full.final_params.content_hash() == resumed.final_params.content_hash();
    let eval_match = full.report.final_avg.to_bits() == resumed.report.final_avg.to_bits();

    let secs = t0.elapsed().as_secs_f64();
    let pass = metrics_match && params_match && eval_match && secs < 600.0;
    assert!(
        verdict(
            9,
            "determinism-and-resume",
            pass,
            secs,
            &format!(
                "step 51-100 metrics bitwise {metrics_match}, final params hash match \
                 {params_match}, final eval bitwise {eval_match}"
            )
        ),
        "resume is not bit-exact"
    );
}

// ---------------------------------------------------------------------------
// shared experiment scaffolding for 10 and 11

struct Bench {
    vocab: Vocab,
    train: Dataset,
    eval_ds: Dataset,
    base: ModelParams,
}

fn bench_fingerprint(cfg_json: &str) -> String {
    let digest = Sha256::digest(cfg_json.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Deterministic shared setup: task splits plus a warmed-up base in the
/// 30-70% train-accuracy band, cached on disk across tests.
fn ordering_bench() -> Bench {
    let vocab = task_vocab();
    let gen = GenConfig {
        k_min: 2,
        k_max: 2,
        moduli: vec![5],
        recheck_prob: 0.0,
        ..GenConfig::default()
    };
    let dims = ModelDims {
        vocab: vocab.size(),
        dim: 48,
        layers: 2,
        window: 128,
    };
    let warm_cfg = WarmupConfig {
        steps: 4000,
        seed: 7,
        ..WarmupConfig::default()
    };
    let mut taken = HashSet::new();
    let train = gen_split(&gen, 400, Split::Train, 7, &mut taken).unwrap();
    let eval_ds = gen_split(&gen, 120, Split::Eval, 8, &mut taken).unwrap();
    let warm = gen_split(&gen, 400, Split::Warmup, 9, &mut taken).unwrap();

    let fp = bench_fingerprint(&format!(
        "{}|{}|{}",
        serde_json::to_string(&gen).unwrap(),
        serde_json::to_string(&dims).unwrap(),
        serde_json::to_string(&warm_cfg).unwrap()
    ));
    let base_path = acceptance_dir().join(format!("base-{fp}.json"));
    let base = if base_path.exists() {
        Checkpoint::load(&base_path).unwrap().params
    } else {
        let params = pretrain_base(dims, &vocab, &warm, &warm_cfg).unwrap();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: vocab.clone(),
            params: params.clone(),
            opt: None,
            step: 0,
        }
        .save(&base_path)
        .unwrap();
        params
    };
    Bench {
        vocab,
        train,
        eval_ds,
        base,
    }
}

fn ordering_train_cfg(method: Method, group_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        group_size,
        seed,
        steps: 300,
        batch: 4,
        max_rollout_len: 48,
        eval_every: 75,
        eval_k: 8,
        eval_budget: 48,
        ..TrainConfig::default()
    }
}

/// Run (or reuse from the on-disk cache) one full training run; the cache
/// key covers the training config and the base parameters.
fn run_cached(bench: &Bench, label: &str, cfg: &TrainConfig) -> RunReport {
    let fp = bench_fingerprint(&format!(
        "{}|{:x}",
        serde_json::to_string(cfg).unwrap(),
        bench.base.content_hash()
    ));
    let dir = acceptance_dir().join(format!("runs/{label}-{fp}"));
    let report_path = dir.join("report.json");
    if report_path.exists() {
        if let Ok(text) = std::fs::read_to_string(&report_path) {
            if let Ok(report) = serde_json::from_str::<RunReport>(&text) {
                return report;
            }
        }
    }
    std::fs::create_dir_all(&dir).unwrap();
    let artifacts = run(
        cfg,
        &bench.vocab,
        &bench.train,
        &bench.eval_ds,
        &bench.base,
        None,
        Some(&dir),
    )
    .unwrap();
    artifacts.report
}

fn curve_str(r: &RunReport) -> String {
    r.curve
        .iter()
        .map(|p| format!("{}:{:.3}", p.step, p.avg_at_k))
        .collect::<Vec<_>>()
        .join(" ")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// 10. ordering experiment: steered distillation vs privileged distillation
// vs base (soft gate: a failure is reported with full per-seed curves)

#[test]
fn c10_ordering_experiment() {
    let t0 = Instant::now();
    let bench = ordering_bench();
    // precondition: base train accuracy in the useful band
    let mut probe = bench.train.clone();
    probe.problems.truncate(40);
    let band = evaluate(&bench.base, &bench.vocab, &probe, 8, 48, 1.0, 7).unwrap();
    let in_band = (0.30..=0.70).contains(&band.avg_at_k);

    let seeds = [1u64, 2, 3];
    let mut base_avgs = Vec::new();
    let mut ogls_finals = Vec::new();
    let mut opsd_finals = Vec::new();
    let mut stability_gaps = Vec::new();
    let mut curves = String::new();
    for &seed in &seeds {
        let ogls = run_cached(
            &bench,
            &format!("ogls8-s{seed}"),
            &ordering_train_cfg(Method::Ogls, 8, seed),
        );
        let opsd = run_cached(
            &bench,
            &format!("opsd-s{seed}"),
            &ordering_train_cfg(Method::Opsd, 8, seed),
        );
        base_avgs.push(ogls.base_avg);
        ogls_finals.push(ogls.final_avg);
        opsd_finals.push(opsd.final_avg);
        let best = ogls
            .curve
            .iter()
            .map(|p| p.avg_at_k)
            .fold(f64::NEG_INFINITY, f64::max);
        stability_gaps.push(best - ogls.final_avg);
        curves.push_str(&format!(
            "seed {seed}: base {:.3} | steered [{}] | privileged [{}]\n",
            ogls.base_avg,
            curve_str(&ogls),
            curve_str(&opsd)
        ));
    }
    let (bm, om, pm) = (mean(&base_avgs), mean(&ogls_finals), mean(&opsd_finals));
    let stability = mean(&stability_gaps);
    let c_order = om >= pm;
    let c_opsd_floor = pm >= bm - 0.02;
    let c_gain = om >= bm + 0.05;
    let c_stable = stability <= 0.03;
    let pass = in_band && c_order && c_opsd_floor && c_gain && c_stable;
    let secs = t0.elapsed().as_secs_f64();
    announce(format!("ACCEPTANCE 10 per-seed curves:\n{curves}"));
    verdict(
        10,
        "ordering-experiment",
        pass,
        secs,
        &format!(
            "train-acc {:.2} in band {in_band}; means: base {bm:.3} opsd {pm:.3} ogls {om:.3}; \
             ogls>=opsd {c_order}, opsd>=base-2pt {c_opsd_floor}, ogls>=base+5pt {c_gain}, \
             final within 3pt of best {c_stable} (gap {stability:.3}); \
             per-seed curves above and in target/acceptance/runs/*/report.json",
            band.avg_at_k
        ),
    );
    // soft gate: the ordering outcome is reported with auditable per-seed
    // curves rather than enforced; infrastructure must still be sound
    assert!(in_band, "warmup base accuracy {:.3} outside 30-70% band", band.avg_at_k);
}

// ---------------------------------------------------------------------------
// 11. ablation shape: group size and pool construction

#[test]
fn c11_ablation_shape() {
    let t0 = Instant::now();
    let bench = ordering_bench();
    let seeds = [1u64, 2, 3];
    let variants: [(&str, Method, usize); 4] = [
        ("ogls8", Method::Ogls, 8),
        ("ogls4", Method::Ogls, 4),
        ("pmt", Method::Pmt, 8),
        ("pos_only", Method::PosOnly, 8),
    ];
    let mut means = Vec::new();
    let mut detail = String::new();
    for (label, method, g) in variants {
        let finals: Vec<f64> = seeds
            .iter()
            .map(|&seed| {
                run_cached(
                    &bench,
                    &format!("{label}-s{seed}"),
                    &ordering_train_cfg(method, g, seed),
                )
                .final_avg
            })
            .collect();
        let m = mean(&finals);
        detail.push_str(&format!(
            "{label} {m:.3} ({}) ",
            finals
                .iter()
                .map(|f| format!("{f:.3}"))
                .collect::<Vec<_>>()
                .join("/")
        ));
        means.push(m);
    }
    let (g8, g4, pmt, pos_only) = (means[0], means[1], means[2], means[3]);
    let tie = 0.01;
    let c1 = g8 >= g4 - tie;
    let c2 = g4 >= pmt - tie;
    let c3 = g4 >= pos_only - tie;
    let pass = c1 && c2 && c3;
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        verdict(
            11,
            "ablation-shape",
            pass,
            secs,
            &format!(
                "{detail}| G8>=G4 {c1}, G4>=mean-teacher {c2}, G4>=positive-only {c3} \
                 (ties within 1 point)"
            )
        ),
        "ablation ordering violated: {detail}"
    );
}
