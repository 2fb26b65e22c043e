use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use itt_core::model::{Model, ModelConfig, Variant};
use itt_core::probes::early_exit::early_exit_probe;
use itt_core::probes::flops::{compare_with_loop, count_flops, ratio_f64};
use itt_core::probes::gnn::{arithmetic_samples, gnn_probe};
use itt_core::probes::sweep::{elastic_sweep, format_capacities, parse_grid, reference_grid};
use itt_core::probes::trace::export_routing_trace;
use itt_core::tensor::{DType, Scalar};
use itt_core::thinking::{parse_capacity_override, StepCapacity};
use itt_core::train::checkpoint::{decode, read_header};
use itt_core::train::data::chunk;
use itt_core::train::{
    byte_tokenize, evaluate_perplexity, train, Checkpoint, MetricsRecord, RunConfig, RunFiles,
};
use itt_core::verify::{run_suite, DEFAULT_SEEDS};

use crate::{Command, Flags, Usage};

const GNN_SAMPLES: usize = 50;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Rejects flags the subcommand does not use, naming all of them.
fn check_flags(name: &str, f: &Flags, allowed: &[&str]) -> Result<()> {
    let given = [
        ("config", f.config.is_some()),
        ("ckpt", f.ckpt.is_some()),
        ("data", f.data.is_some()),
        ("capacity-override", f.capacity_override.is_some()),
        ("grid", f.grid.is_some()),
        ("seed", f.seed.is_some()),
        ("threads", f.threads.is_some()),
        ("out", f.out.is_some()),
        ("text", f.text.is_some()),
        ("epsilon", f.epsilon.is_some()),
    ];
    let conflicts: Vec<String> = given
        .iter()
        .filter(|(flag, set)| *set && !allowed.contains(flag))
        .map(|(flag, _)| format!("--{flag}"))
        .collect();
    if !conflicts.is_empty() {
        return Err(usage(format!("{} cannot be used with `{name}`", conflicts.join(", "))));
    }
    if f.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("`{name}` requires --{flag}")))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(f) => {
            check_flags("train", &f, &["config", "data", "capacity-override", "seed", "threads", "out"])?;
            cmd_train(&f)
        }
        Command::Eval(f) => {
            check_flags("eval", &f, &["ckpt", "data", "capacity-override", "threads", "out", "epsilon"])?;
            cmd_eval(&f)
        }
        Command::Sweep(f) => {
            check_flags("sweep", &f, &["ckpt", "data", "grid", "threads", "out"])?;
            cmd_sweep(&f)
        }
        Command::Trace(f) => {
            check_flags("trace", &f, &["ckpt", "text", "capacity-override", "threads", "out"])?;
            cmd_trace(&f)
        }
        Command::ProbeGnn(f) => {
            check_flags("probe-gnn", &f, &["ckpt", "seed", "threads", "out"])?;
            cmd_gnn(&f)
        }
        Command::Gradcheck(f) => {
            check_flags("gradcheck", &f, &["seed", "threads", "out"])?;
            cmd_gradcheck(&f)
        }
        Command::Flops(f) => {
            check_flags("flops", &f, &["config", "ckpt", "capacity-override", "threads", "out"])?;
            cmd_flops(&f)
        }
    }
}

fn threads(f: &Flags) -> usize {
    f.threads.unwrap_or(1)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn read_ids(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(byte_tokenize(&bytes))
}

enum Loaded {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn load(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ctx = || format!("loading {}", path.display());
    let (header, _) = read_header(&bytes).with_context(ctx)?;
    Ok(match header.tensors.first().map(|t| t.dtype) {
        Some(DType::F64) => Loaded::F64(decode(&bytes).with_context(ctx)?),
        _ => Loaded::F32(decode(&bytes).with_context(ctx)?),
    })
}

macro_rules! with_checkpoint {
    ($loaded:expr, $ck:ident => $body:expr) => {
        match $loaded {
            Loaded::F32($ck) => $body,
            Loaded::F64($ck) => $body,
        }
    };
}

fn eval_seq_len<F: Scalar>(ck: &Checkpoint<F>) -> usize {
    ck.run
        .as_ref()
        .map_or(ck.model.config.max_seq_len, |r| r.seq_len)
        .min(ck.model.config.max_seq_len)
}

fn base_capacities(cfg: &ModelConfig) -> Vec<StepCapacity> {
    match cfg.variant {
        Variant::Itt => cfg.routing.active_capacities(),
        _ => Vec::new(),
    }
}

fn capacities(cfg: &ModelConfig, spec: Option<&String>) -> Result<Vec<StepCapacity>> {
    let base = base_capacities(cfg);
    match spec {
        None => Ok(base),
        Some(_) if cfg.variant != Variant::Itt => {
            Err(usage("--capacity-override needs an inner-thinking (itt) model"))
        }
        Some(s) => parse_capacity_override(s, &base).map_err(|e| usage(format!("--capacity-override: {e}"))),
    }
}

#[derive(Serialize)]
struct Invocation<'a> {
    subcommand: &'a str,
    seed: u64,
    threads: usize,
}

fn cmd_train(f: &Flags) -> Result<()> {
    let out = required(&f.out, "out", "train")?;
    let mut cfg = match &f.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = f.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &f.data {
        cfg.train_data = Some(d.clone());
    }
    if let Some(spec) = &f.capacity_override {
        let caps = capacities(&cfg.model()?, Some(spec))?;
        let mut values = Vec::with_capacity(caps.len());
        for (i, c) in caps.iter().enumerate() {
            match c {
                StepCapacity::Active(v) => values.push(*v),
                StepCapacity::Removed => bail!("step s{} cannot be removed during training", i + 1),
            }
        }
        cfg.capacities = Some(values);
    }
    cfg.validate()?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| usage("`train` needs training data: pass --data or set train_data in the config"))?;
    let train_ids = read_ids(&train_path)?;
    let eval_ids = cfg.eval_data.as_deref().map(read_ids).transpose()?;

    let files = RunFiles::in_dir(out)?;
    let invocation = Invocation {
        subcommand: "train",
        seed: cfg.seed,
        threads: threads(f),
    };
    fs::write(out.join("invocation.json"), serde_json::to_string_pretty(&invocation)?)?;
    let log = |r: &MetricsRecord| {
        let eval = r.eval_loss.map_or(String::new(), |l| format!(" eval_loss {l:.4}"));
        eprintln!("step {} train_loss {:.4}{eval} lr {:.3e}", r.step, r.train_loss, r.lr);
    };
    let eval = eval_ids.as_deref();
    let (steps, loss, reached) = match cfg.dtype {
        DType::F32 => {
            let o = train::<f32>(&cfg, &train_ids, eval, Some(&files), log)?;
            (o.steps_run, o.final_loss, o.reached_target)
        }
        DType::F64 => {
            let o = train::<f64>(&cfg, &train_ids, eval, Some(&files), log)?;
            (o.steps_run, o.final_loss, o.reached_target)
        }
    };
    let target = if reached { " (target reached)" } else { "" };
    println!(
        "trained {steps} steps, final train loss {loss:.4}{target}; checkpoint {}",
        files.checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EarlyExitSummary {
    epsilon: f64,
    /// Counts of tokens by the number of extra steps they needed; the last
    /// entry counts tokens the full model misses.
    histogram: Vec<usize>,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    data: PathBuf,
    capacities: String,
    loss: f64,
    ppl: f64,
    tokens: usize,
    flops_per_token: f64,
    threads: usize,
    early_exit: Option<EarlyExitSummary>,
}

fn cmd_eval(f: &Flags) -> Result<()> {
    let ckpt = required(&f.ckpt, "ckpt", "eval")?;
    let data = required(&f.data, "data", "eval")?;
    if let Some(e) = f.epsilon {
        if e.is_nan() || e < 0.0 {
            return Err(usage(format!("--epsilon {e} must be non-negative")));
        }
    }
    let loaded = load(ckpt)?;
    let ids = read_ids(data)?;
    let report = with_checkpoint!(loaded, ck => {
        let caps = capacities(&ck.model.config, f.capacity_override.as_ref())?;
        let seq = eval_seq_len(&ck);
        let result = evaluate_perplexity(&ck.model, &ids, seq, None, Some(caps.clone()))?;
        let early_exit = match f.epsilon {
            None => None,
            Some(eps) => Some(early_exit(&ck.model, &ids, seq, eps, &caps)?),
        };
        EvalReport {
            checkpoint: ckpt.clone(),
            data: data.clone(),
            capacities: format_capacities(&caps),
            loss: result.loss,
            ppl: result.ppl,
            tokens: result.tokens,
            flops_per_token: result.flops_per_token,
            threads: threads(f),
            early_exit,
        }
    });
    let caps = if report.capacities.is_empty() { "-" } else { &report.capacities };
    println!(
        "loss {:.4} ppl {:.4} tokens {} flops/token {:.0} capacities {caps}",
        report.loss, report.ppl, report.tokens, report.flops_per_token
    );
    if let Some(e) = &report.early_exit {
        let (never, steps) = e.histogram.split_last().expect("histogram has a final bucket");
        let parts: Vec<String> = steps.iter().enumerate().map(|(t, n)| format!("t{t}={n}")).collect();
        println!("early exit eps {}: {} never={never}", e.epsilon, parts.join(" "));
    }
    if let Some(out) = &f.out {
        emit(Some(out), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

fn early_exit<F: Scalar>(
    model: &Model<F>,
    ids: &[usize],
    seq: usize,
    eps: f64,
    caps: &[StepCapacity],
) -> Result<EarlyExitSummary> {
    let mut histogram = vec![0; caps.len() + 2];
    for (input, target) in chunk(ids, seq)? {
        let r = early_exit_probe(model, &input, &target, eps, Some(caps.to_vec()))?;
        for (h, n) in histogram.iter_mut().zip(r.histogram) {
            *h += n;
        }
    }
    Ok(EarlyExitSummary { epsilon: eps, histogram })
}

fn cmd_sweep(f: &Flags) -> Result<()> {
    let ckpt = required(&f.ckpt, "ckpt", "sweep")?;
    let data = required(&f.data, "data", "sweep")?;
    let loaded = load(ckpt)?;
    let ids = read_ids(data)?;
    let mut csv = Vec::new();
    with_checkpoint!(loaded, ck => {
        if ck.model.config.variant != Variant::Itt {
            bail!("`sweep` needs an inner-thinking checkpoint, got {:?}", ck.model.config.variant);
        }
        let extra = ck.model.config.extra_steps();
        let grid = match &f.grid {
            Some(p) => parse_grid(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => reference_grid(extra),
        };
        if let Some(bad) = grid.iter().find(|g| g.len() != extra) {
            bail!("grid vector {} has {} steps, the model has {extra}", format_capacities(bad), bad.len());
        }
        let sweep = elastic_sweep(&ck.model, &ids, eval_seq_len(&ck), None, &grid, false)?;
        sweep.write_csv(&mut csv)?;
    });
    emit(f.out.as_deref(), &csv)
}

fn cmd_trace(f: &Flags) -> Result<()> {
    let ckpt = required(&f.ckpt, "ckpt", "trace")?;
    let text = required(&f.text, "text", "trace")?;
    let json = with_checkpoint!(load(ckpt)?, ck => {
        let caps = capacities(&ck.model.config, f.capacity_override.as_ref())?;
        let caps = (ck.model.config.variant == Variant::Itt).then_some(caps);
        serde_json::to_string_pretty(&export_routing_trace(&ck.model, text, caps)?)?
    });
    emit(f.out.as_deref(), format!("{json}\n").as_bytes())
}

fn cmd_gnn(f: &Flags) -> Result<()> {
    let ckpt = required(&f.ckpt, "ckpt", "probe-gnn")?;
    let model = with_checkpoint!(load(ckpt)?, ck => ck.model.cast::<f64>()?);
    let samples = arithmetic_samples(GNN_SAMPLES, f.seed.unwrap_or(0));
    let report = gnn_probe(&model, &samples)?;
    eprintln!("{} easy, {} hard samples", report.easy, report.hard);
    match &f.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            report.write_csv(fs::File::create(dir.join("gnn.csv"))?)?;
            report.write_summary_csv(fs::File::create(dir.join("gnn_summary.csv"))?)?;
            Ok(())
        }
        None => Ok(report.write_csv(io::stdout())?),
    }
}

fn cmd_gradcheck(f: &Flags) -> Result<()> {
    let seeds = match f.seed {
        Some(s) => vec![s],
        None => DEFAULT_SEEDS.to_vec(),
    };
    let results = run_suite(&seeds, None)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("{r}\n"));
    }
    match &f.out {
        Some(p) => emit(Some(p), serde_json::to_string_pretty(&results)?.as_bytes())?,
        None => emit(None, text.as_bytes())?,
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    eprintln!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_flops(f: &Flags) -> Result<()> {
    let (cfg, seq) = match (&f.config, &f.ckpt) {
        (Some(_), Some(_)) => return Err(usage("--config and --ckpt are mutually exclusive for `flops`")),
        (None, None) => return Err(usage("`flops` requires --config or --ckpt")),
        (Some(p), None) => {
            let run = RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
            (run.model()?, run.seq_len)
        }
        (None, Some(p)) => with_checkpoint!(load(p)?, ck => (ck.model.config.clone(), eval_seq_len(&ck))),
    };
    let caps = capacities(&cfg, f.capacity_override.as_ref())?;
    let breakdown = count_flops(&cfg, &caps, seq)?;
    let mut text = format!("{breakdown}\n");
    if cfg.variant == Variant::Itt {
        let (itt, lp) = compare_with_loop(&cfg, &caps, seq)?;
        text.push_str(&format!(
            "capacities {}: layer FLOPs {:.2}% of Loop x{} (routers excluded), {:.2}% including routers and head\n",
            format_capacities(&caps),
            100.0 * ratio_f64(itt.layer_ratio(&lp)),
            cfg.thinking_steps,
            100.0 * ratio_f64(itt.total_ratio(&lp)),
        ));
    }
    emit(f.out.as_deref(), text.as_bytes())
}
