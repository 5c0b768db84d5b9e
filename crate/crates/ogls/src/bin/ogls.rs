//! Command-line surface: dataset generation, warmup pretraining, training
//! runs, evaluation, diagnostics, ablation sweeps, metrics validation, and
//! plot emission.

use clap::{Args, Parser, Subcommand};
use ogls::diagnostics::{select_guidance_pair, shift_profile, support_change_table};
use ogls::guidance::GuidanceConfig;
use ogls::rollout::SampleConfig;
use ogls::seqmodel::{Checkpoint, ModelDims, ModelParams, Vocab, CHECKPOINT_VERSION};
use ogls::tasks::{gen_split, load_dataset, save_dataset, task_vocab, GenConfig, Split};
use ogls::trainer::{
    evaluate, pretrain_base, Method, RunReport, TrainConfig, WarmupConfig,
};
use ogls::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ogls",
    about = "Desk-scale laboratory for outcome-guided logit steering in on-policy self-distillation"
)]
struct Cli {
    /// Worker-thread bound (this build computes on a single thread).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/eval/warmup splits of verifiable arithmetic tasks.
    GenData(GenDataArgs),
    /// Pretrain a base model on the warmup split (the backbone stand-in).
    Warmup(WarmupArgs),
    /// Train a method against a frozen base-model teacher.
    Train(TrainArgs),
    /// Evaluate a checkpoint: Avg@k, answer-format rate, marker frequency.
    Eval(EvalArgs),
    /// Shift profiles and support-change tables under both teacher
    /// constructions.
    Diagnose(DiagnoseArgs),
    /// Run the ablation sweep and emit a ranked comparison table.
    Ablate(AblateArgs),
    /// Render metric curves to CSV and SVG.
    Plot(PlotArgs),
    /// Check that a metrics file is valid line-delimited records.
    ValidateMetrics(ValidateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    eval: usize,
    #[arg(long, default_value_t = 500)]
    warmup: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    /// Comma-separated moduli.
    #[arg(long, default_value = "5,7,11")]
    moduli: String,
    #[arg(long, default_value_t = 0.2)]
    recheck_prob: f64,
}

#[derive(Args)]
struct WarmupArgs {
    /// Directory containing warmup.jsonl (and eval.jsonl for the report).
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "base.json")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    guided_frac: Option<f64>,
    /// Report Avg@k on this many eval problems (0 skips the report).
    #[arg(long, default_value_t = 50)]
    report_problems: usize,
    #[arg(long, default_value_t = 8)]
    report_k: usize,
    #[arg(long, default_value_t = 64)]
    report_budget: usize,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Base checkpoint; omitted → warm up from data_dir/warmup.jsonl.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    /// Continue from <run dir>/latest.json.
    #[arg(long, default_value_t = false)]
    resume: bool,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    max_rollout_len: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_k: Option<usize>,
    #[arg(long)]
    eval_budget: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data/eval.jsonl")]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    budget: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data/eval.jsonl")]
    data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Problems to analyze.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 64)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated expressions for the support-change table.
    #[arg(long, default_value = "recheck,Answer:,mod")]
    expressions: String,
    #[arg(long, default_value = "diagnostics")]
    out_dir: PathBuf,
    /// Also render a color-map of the first profile's shifts.
    #[arg(long, default_value_t = false)]
    svg: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long, default_value = "ablation")]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated seeds; one full run per variant per seed.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Comma-separated subset of {ogls_g8, ogls_g4, pmt, pos_only, opsd, base}.
    #[arg(long)]
    only: Option<String>,
    #[arg(long)]
    eval_k: Option<usize>,
    #[arg(long)]
    eval_budget: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Comma-separated metrics.jsonl paths; labels come from parent dirs.
    #[arg(long)]
    metrics: String,
    #[arg(long, default_value = "plots")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    path: PathBuf,
}

// ---------------------------------------------------------------------------
// configuration file

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct DimsConfig {
    dim: usize,
    layers: usize,
    window: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        DimsConfig {
            dim: 48,
            layers: 2,
            window: 128,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    dims: DimsConfig,
    train: TrainConfig,
    warmup: WarmupConfig,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Resolve a relative output path against OGLS_OUT_ROOT when set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("OGLS_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "ogls" => Ok(Method::Ogls),
        "opsd" => Ok(Method::Opsd),
        "pmt" => Ok(Method::Pmt),
        "pos_only" => Ok(Method::PosOnly),
        "grpo" => Ok(Method::Grpo),
        "sft" => Ok(Method::Sft),
        "routed" => Ok(Method::Routed),
        other => Err(Error::Config(format!(
            "unknown method '{other}'; valid: ogls, opsd, pmt, pos_only, grpo, sft, routed"
        ))),
    }
}

fn parse_csv_u64(s: &str, what: &str) -> Result<Vec<u64>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

fn load_checkpoint_model(path: &Path) -> Result<(ModelParams, Vocab)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.params, ckpt.vocab))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), value)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// subcommand bodies

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let moduli: Vec<i64> = a
        .moduli
        .split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<i64>()
                .map_err(|_| Error::Config(format!("bad modulus '{p}'")))
        })
        .collect::<Result<_>>()?;
    if a.k_min < 1 || a.k_max < a.k_min {
        return Err(Error::Config("need 1 <= k_min <= k_max".into()));
    }
    let cfg = GenConfig {
        k_min: a.k_min,
        k_max: a.k_max,
        moduli,
        recheck_prob: a.recheck_prob,
        ..GenConfig::default()
    };
    let out = resolve_out(&a.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut taken = HashSet::new();
    for (n, split, name) in [
        (a.train, Split::Train, "train.jsonl"),
        (a.eval, Split::Eval, "eval.jsonl"),
        (a.warmup, Split::Warmup, "warmup.jsonl"),
    ] {
        let seed = match split {
            Split::Train => a.seed,
            Split::Eval => a.seed.wrapping_add(1),
            Split::Warmup => a.seed.wrapping_add(2),
        };
        let ds = gen_split(&cfg, n, split, seed, &mut taken)?;
        save_dataset(&ds, &out.join(name))?;
        println!("{name}: {} problems", ds.problems.len());
    }
    Ok(())
}

fn cmd_warmup(a: &WarmupArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let dims = ModelDims {
        vocab: task_vocab().size(),
        dim: a.dim.unwrap_or(file.dims.dim),
        layers: a.layers.unwrap_or(file.dims.layers),
        window: a.window.unwrap_or(file.dims.window),
    };
    let mut wcfg = file.warmup;
    if let Some(s) = a.steps {
        wcfg.steps = s;
    }
    if let Some(s) = a.seed {
        wcfg.seed = s;
    }
    if let Some(lr) = a.lr {
        wcfg.optim.lr = lr;
    }
    if let Some(f) = a.guided_frac {
        wcfg.guided_frac = f;
    }
    let vocab = task_vocab();
    let warmup_ds = load_dataset(&a.data_dir.join("warmup.jsonl"))?;
    let params = pretrain_base(dims, &vocab, &warmup_ds, &wcfg)?;
    let out = resolve_out(&a.out);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Checkpoint {
        version: CHECKPOINT_VERSION,
        vocab: vocab.clone(),
        params: params.clone(),
        opt: None,
        step: 0,
    }
    .save(&out)?;
    println!("saved base checkpoint to {}", out.display());

    if a.report_problems > 0 {
        let eval_path = a.data_dir.join("eval.jsonl");
        if eval_path.exists() {
            let mut eval_ds = load_dataset(&eval_path)?;
            eval_ds.problems.truncate(a.report_problems);
            let rep = evaluate(
                &params,
                &vocab,
                &eval_ds,
                a.report_k,
                a.report_budget,
                1.0,
                wcfg.seed,
            )?;
            println!(
                "base eval: avg@{} = {:.4}, answer_format_rate = {:.4}",
                a.report_k, rep.avg_at_k, rep.answer_format_rate
            );
            if !(0.05..=0.95).contains(&rep.avg_at_k) {
                println!(
                    "note: base accuracy {:.2} is outside the useful 0.30-0.70 band; \
                     adjust --steps or --lr",
                    rep.avg_at_k
                );
            }
        }
        // quick train-accuracy probe for the 30-70% warmup target
        let train_path = a.data_dir.join("train.jsonl");
        if train_path.exists() {
            let mut train_ds = load_dataset(&train_path)?;
            train_ds.problems.truncate(a.report_problems);
            let rep = evaluate(&params, &vocab, &train_ds, 4, a.report_budget, 1.0, wcfg.seed)?;
            println!("train-acc probe (avg@4): {:.4}", rep.avg_at_k);
        }
    }
    Ok(())
}

fn apply_train_overrides(cfg: &mut TrainConfig, a: &TrainArgs) -> Result<()> {
    if let Some(m) = &a.method {
        cfg.method = parse_method(m)?;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.group_size {
        cfg.group_size = v;
    }
    if let Some(v) = a.max_rollout_len {
        cfg.max_rollout_len = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.lambda_max {
        cfg.schedule.lambda_max = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.eval_k {
        cfg.eval_k = v;
    }
    if let Some(v) = a.eval_budget {
        cfg.eval_budget = v;
    }
    Ok(())
}

fn prepare_base(
    a: &TrainArgs,
    file: &FileConfig,
    vocab: &Vocab,
    run_dir: &Path,
) -> Result<ModelParams> {
    if let Some(base) = &a.base {
        let (params, ckpt_vocab) = load_checkpoint_model(base)?;
        if ckpt_vocab.size() != vocab.size() {
            return Err(Error::Data(format!(
                "base checkpoint vocabulary size {} != task vocabulary size {}",
                ckpt_vocab.size(),
                vocab.size()
            )));
        }
        return Ok(params);
    }
    let warmup_ds = load_dataset(&a.data_dir.join("warmup.jsonl"))?;
    let dims = ModelDims {
        vocab: vocab.size(),
        dim: file.dims.dim,
        layers: file.dims.layers,
        window: file.dims.window,
    };
    let params = pretrain_base(dims, vocab, &warmup_ds, &file.warmup)?;
    Checkpoint {
        version: CHECKPOINT_VERSION,
        vocab: vocab.clone(),
        params: params.clone(),
        opt: None,
        step: 0,
    }
    .save(&run_dir.join("base.json"))?;
    Ok(params)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let mut cfg = file.train.clone();
    apply_train_overrides(&mut cfg, a)?;
    cfg.validate()?;

    let run_id = a
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-s{}", cfg.method.name(), cfg.seed));
    let run_dir = resolve_out(&a.out_dir).join(&run_id);
    std::fs::create_dir_all(&run_dir)?;

    let vocab = task_vocab();
    let train_ds = load_dataset(&a.data_dir.join("train.jsonl"))?;
    let eval_ds = load_dataset(&a.data_dir.join("eval.jsonl"))?;
    let base = prepare_base(a, &file, &vocab, &run_dir)?;

    #[derive(Serialize)]
    struct Effective<'a> {
        schema_version: u32,
        run_id: &'a str,
        dims: DimsConfig,
        train: &'a TrainConfig,
    }
    let effective = Effective {
        schema_version: 1,
        run_id: &run_id,
        dims: file.dims,
        train: &cfg,
    };
    let hash = config_hash(&effective);
    write_json(
        &run_dir.join("effective_config.json"),
        &serde_json::json!({
            "schema_version": 1,
            "run_id": run_id,
            "config_hash": hash,
            "dims": file.dims,
            "train": cfg,
        }),
    )?;

    let resume = if a.resume {
        let ckpt = Checkpoint::load(&run_dir.join("latest.json"))?;
        let opt = ckpt.opt.ok_or_else(|| {
            Error::Data("checkpoint has no optimizer state; cannot resume".into())
        })?;
        Some((ckpt.params, opt, ckpt.step))
    } else {
        None
    };

    let artifacts = ogls::trainer::run(
        &cfg,
        &vocab,
        &train_ds,
        &eval_ds,
        &base,
        resume,
        Some(&run_dir),
    )?;

    #[derive(Serialize)]
    struct FinalReport<'a> {
        schema_version: u32,
        run_id: &'a str,
        config_hash: &'a str,
        #[serde(flatten)]
        report: &'a RunReport,
    }
    write_json(
        &run_dir.join("report.json"),
        &FinalReport {
            schema_version: 1,
            run_id: &run_id,
            config_hash: &hash,
            report: &artifacts.report,
        },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "run_id": run_id,
            "config_hash": hash,
            "method": cfg.method.name(),
            "base_avg": artifacts.report.base_avg,
            "final_avg": artifacts.report.final_avg,
        }))?
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (params, vocab) = load_checkpoint_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if a.k == 0 {
        return Err(Error::Config("--k must be >= 1".into()));
    }
    let rep = evaluate(&params, &vocab, &ds, a.k, a.budget, a.temperature, a.seed)?;
    let json = serde_json::to_string_pretty(&rep)?;
    println!("{json}");
    if let Some(out) = &a.out {
        std::fs::write(resolve_out(out), json)?;
    }
    Ok(())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let (params, vocab) = load_checkpoint_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let out = resolve_out(&a.out_dir);
    std::fs::create_dir_all(&out)?;
    let gcfg = GuidanceConfig::for_vocab(&vocab);
    let scfg = SampleConfig {
        group_size: a.group_size,
        temperature: 1.0,
        max_len: a.budget,
    };
    let mut profiles = Vec::new();
    let mut skipped = 0usize;
    let profile_path = out.join("profiles.jsonl");
    let f = std::fs::File::create(&profile_path)?;
    let mut w = std::io::BufWriter::new(f);
    for (i, problem) in ds.problems.iter().take(a.n).enumerate() {
        let seed = ogls::rollout::derive_seed(a.seed, 0xD1A6 ^ i as u64);
        match select_guidance_pair(&params, &vocab, problem, &scfg, seed)? {
            None => skipped += 1,
            Some((g_pos, g_neg)) => {
                let x = ogls::tasks::render_prompt(problem, &vocab)?;
                // analyze the incorrect rollout itself: the sequence
                // steering actually retargets during training
                let prof = shift_profile(
                    &params,
                    &problem.id,
                    &x,
                    &g_pos,
                    &g_neg,
                    &g_neg.clone(),
                    a.lambda,
                    &gcfg,
                )?;
                serde_json::to_writer(&mut w, &prof)?;
                w.write_all(b"\n")?;
                profiles.push(prof);
            }
        }
    }
    w.flush()?;

    let expressions: Vec<String> = a
        .expressions
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect();
    let table = support_change_table(&profiles, &expressions, &vocab)?;
    write_json(&out.join("support_change.json"), &table)?;
    let mut text = String::from("expression\tcount\tdirect\tcontrastive\tdifference\n");
    for row in &table {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        };
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.expression,
            row.count,
            fmt(row.direct),
            fmt(row.contrastive),
            fmt(row.difference)
        ));
    }
    std::fs::write(out.join("support_change.txt"), &text)?;

    if a.svg {
        if let Some(prof) = profiles.first() {
            let svg = shift_map_svg(prof);
            std::fs::write(out.join("shift_map.svg"), svg)?;
        }
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "profiles": profiles.len(),
            "skipped_no_pair": skipped,
            "table_rows": table.len(),
            "out_dir": out.display().to_string(),
        }))?
    );
    Ok(())
}

/// One colored cell per token; red = suppressed, green = supported,
/// intensity saturating at |Δ| = 2 nats.
fn shift_map_svg(prof: &ogls::diagnostics::ShiftProfile) -> String {
    let cell = 12;
    let rows = 2;
    let w = prof.records.len() * cell;
    let h = rows * cell + 16;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n"
    );
    for (row, pick) in [0usize, 1].iter().zip([
        |r: &ogls::diagnostics::ShiftPair| r.direct,
        |r: &ogls::diagnostics::ShiftPair| r.contrastive,
    ]) {
        for (i, rec) in prof.records.iter().enumerate() {
            let d = pick(rec).clamp(-2.0, 2.0) / 2.0;
            let (r, g) = if d >= 0.0 {
                (((1.0 - d) * 255.0) as u8, 255u8)
            } else {
                (255u8, ((1.0 + d) * 255.0) as u8)
            };
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},128)\"/>\n",
                i * cell,
                row * cell
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"0\" y=\"{}\" font-size=\"10\">rows: direct, contrastive; scale |shift| ≤ 2 nats</text>\n</svg>\n",
        rows * cell + 12
    ));
    s
}

#[derive(Debug, Serialize)]
struct AblationRow {
    label: String,
    mean_final_avg: f64,
    per_seed: Vec<f64>,
    config_hash: String,
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let seeds = parse_csv_u64(&a.seeds, "seed")?;
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let all = ["ogls_g8", "ogls_g4", "pmt", "pos_only", "opsd", "base"];
    let chosen: Vec<String> = match &a.only {
        None => all.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            let picked: Vec<String> = list
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().to_string())
                .collect();
            for p in &picked {
                if !all.contains(&p.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown ablation variant '{p}'; valid: {}",
                        all.join(", ")
                    )));
                }
            }
            picked
        }
    };

    let vocab = task_vocab();
    let train_ds = load_dataset(&a.data_dir.join("train.jsonl"))?;
    let eval_ds = load_dataset(&a.data_dir.join("eval.jsonl"))?;
    let (base, ckpt_vocab) = load_checkpoint_model(&a.base)?;
    if ckpt_vocab.size() != vocab.size() {
        return Err(Error::Data("base checkpoint vocabulary mismatch".into()));
    }
    let out = resolve_out(&a.out_dir);
    std::fs::create_dir_all(&out)?;

    let mut rows = Vec::new();
    for label in &chosen {
        let mut per_seed = Vec::new();
        let mut cfg = file.train.clone();
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        if let Some(k) = a.eval_k {
            cfg.eval_k = k;
        }
        if let Some(b) = a.eval_budget {
            cfg.eval_budget = b;
        }
        match label.as_str() {
            "ogls_g8" => {
                cfg.method = Method::Ogls;
                cfg.group_size = 8;
            }
            "ogls_g4" => {
                cfg.method = Method::Ogls;
                cfg.group_size = 4;
            }
            "pmt" => cfg.method = Method::Pmt,
            "pos_only" => cfg.method = Method::PosOnly,
            "opsd" => cfg.method = Method::Opsd,
            "base" => {}
            _ => unreachable!(),
        }
        let hash = config_hash(&(label.clone(), &cfg));
        for &seed in &seeds {
            cfg.seed = seed;
            let avg = if label == "base" {
                evaluate(
                    &base,
                    &vocab,
                    &eval_ds,
                    cfg.eval_k,
                    cfg.eval_budget,
                    cfg.temperature,
                    ogls::rollout::derive_seed(seed, 0xE0A1),
                )?
                .avg_at_k
            } else {
                let run_dir = out.join(format!("{label}-s{seed}"));
                std::fs::create_dir_all(&run_dir)?;
                let artifacts = ogls::trainer::run(
                    &cfg,
                    &vocab,
                    &train_ds,
                    &eval_ds,
                    &base,
                    None,
                    Some(&run_dir),
                )?;
                artifacts.report.final_avg
            };
            per_seed.push(avg);
            println!("{label} seed {seed}: final avg@{} = {avg:.4}", cfg.eval_k);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow {
            label: label.clone(),
            mean_final_avg: mean,
            per_seed,
            config_hash: hash,
        });
    }
    rows.sort_by(|x, y| y.mean_final_avg.total_cmp(&x.mean_final_avg));
    write_json(&out.join("ablation.json"), &rows)?;
    let mut text = String::from("rank\tvariant\tmean_final_avg\tconfig_hash\n");
    for (i, r) in rows.iter().enumerate() {
        text.push_str(&format!(
            "{}\t{}\t{:.4}\t{}\n",
            i + 1,
            r.label,
            r.mean_final_avg,
            r.config_hash
        ));
    }
    std::fs::write(out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let paths: Vec<PathBuf> = a
        .metrics
        .split(',')
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    let out = resolve_out(&a.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut series: Vec<(String, Vec<(u64, f64, Option<f64>)>)> = Vec::new();
    for p in &paths {
        let label = p
            .parent()
            .and_then(|d| d.file_name())
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| p.display().to_string());
        let text = std::fs::read_to_string(p)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", p.display(), i + 1))
            })?;
            let step = v["step"].as_u64().ok_or_else(|| {
                Error::Data(format!("{}:{}: missing step", p.display(), i + 1))
            })?;
            let loss = v["loss_total"].as_f64().unwrap_or(f64::NAN);
            let acc = v["acc"].as_f64();
            rows.push((step, loss, acc));
        }
        series.push((label, rows));
    }
    if series.iter().all(|(_, r)| r.is_empty()) {
        eprintln!("warning: no metric rows found; nothing to plot");
        return Ok(());
    }
    // CSV overlay per metric
    let mut csv = String::from("label,step,loss_total,acc\n");
    for (label, rows) in &series {
        for (step, loss, acc) in rows {
            let acc_s = acc.map(|a| format!("{a}")).unwrap_or_default();
            csv.push_str(&format!("{label},{step},{loss},{acc_s}\n"));
        }
    }
    std::fs::write(out.join("curves.csv"), &csv)?;
    std::fs::write(
        out.join("loss_total.svg"),
        line_chart_svg(&series, |r| Some(r.1), "loss_total"),
    )?;
    std::fs::write(
        out.join("acc.svg"),
        line_chart_svg(&series, |r| r.2, "rollout accuracy"),
    )?;
    println!("wrote plots for {} series to {}", series.len(), out.display());
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn line_chart_svg(
    series: &[(String, Vec<(u64, f64, Option<f64>)>)],
    pick: impl Fn(&(u64, f64, Option<f64>)) -> Option<f64>,
    title: &str,
) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let mut pts: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, (_, rows)) in series.iter().enumerate() {
        let mut v = Vec::new();
        for r in rows {
            if let Some(y) = pick(r) {
                if y.is_finite() {
                    let x = r.0 as f64;
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                    v.push((x, y));
                }
            }
        }
        pts.push((i, v));
    }
    if !xmin.is_finite() {
        return format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"><text x=\"10\" y=\"20\">{title}: no data</text></svg>\n"
        );
    }
    if (xmax - xmin).abs() < 1e-9 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-9 {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - ymin) / (ymax - ymin) * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    s.push_str(&format!(
        "<text x=\"{pad}\" y=\"20\" font-size=\"14\">{title}</text>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad
    ));
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad
    ));
    s.push_str(&format!(
        "<text x=\"{pad}\" y=\"{}\" font-size=\"10\">{xmin:.0}</text><text x=\"{}\" y=\"{}\" font-size=\"10\">{xmax:.0}</text>\n",
        h - pad + 14.0,
        w - pad - 20.0,
        h - pad + 14.0
    ));
    s.push_str(&format!(
        "<text x=\"2\" y=\"{}\" font-size=\"10\">{ymax:.3}</text><text x=\"2\" y=\"{}\" font-size=\"10\">{ymin:.3}</text>\n",
        pad + 4.0,
        h - pad
    ));
    for (i, v) in &pts {
        if v.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = v
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - pad + 2.0,
            pad + 14.0 * (*i as f64 + 1.0),
            series[*i].0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_validate_metrics(a: &ValidateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.path)?;
    let mut rows = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", a.path.display(), i + 1)))?;
        if !v.is_object() || !v["step"].is_u64() {
            return Err(Error::Data(format!(
                "{}:{}: record lacks an integer 'step' field",
                a.path.display(),
                i + 1
            )));
        }
        rows += 1;
    }
    println!("{} valid rows in {}", rows, a.path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) | Error::ContextWindow(_) => 4,
        Error::Io(_) | Error::Serde(_) => 5,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        std::process::exit(2);
    }
    let result = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Warmup(a) => cmd_warmup(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Plot(a) => cmd_plot(a),
        Cmd::ValidateMetrics(a) => cmd_validate_metrics(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

