use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mcu_encoder_core::{
    load_model_file, peak_memory_model, plan_tile_size, run_encoder, write_model_file, Arena, ClusterSpec,
    EncoderConfig, EncoderModel, Error, Mode, OpCounts, SchedulePlan, StagePeaks,
};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mcu-encoder", version, about = "Memory-budgeted int8 encoder inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args)]
struct Budget {
    /// SRAM budget in KiB.
    #[arg(long, conflicts_with = "sram_bytes", required_unless_present = "sram_bytes")]
    sram_kb: Option<usize>,
    /// SRAM budget in bytes.
    #[arg(long)]
    sram_bytes: Option<usize>,
}

impl Budget {
    fn bytes(&self) -> usize {
        self.sram_bytes.unwrap_or_else(|| self.sram_kb.unwrap_or(0) * 1024)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    BertTiny,
    Small,
}

#[derive(Subcommand)]
enum Command {
    /// Run one sequence under an SRAM budget.
    Run {
        #[arg(long)]
        model: PathBuf,
        /// Whitespace-separated token ids.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        budget: Budget,
        /// `auto` or an explicit tile size.
        #[arg(long, default_value = "auto")]
        tile: String,
        #[arg(long)]
        naive: bool,
        /// Write the arena event log as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        report: ReportFormat,
    },
    /// Pick the largest tile size that fits.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seq_len: usize,
        #[command(flatten)]
        budget: Budget,
    },
    /// Print config, cluster spec and parameter counts.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Peaks and op counts over sequence lengths and modes.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        seq_lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "naive,tiled")]
        modes: Vec<String>,
        /// Budget for the runs; unlimited when omitted.
        #[arg(long)]
        sram_kb: Option<usize>,
        /// Tile size for tiled runs; planned from the budget when omitted.
        #[arg(long)]
        tile: Option<usize>,
    },
    /// Write a procedurally generated model.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "bert-tiny")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        d_ffn: Option<usize>,
        #[arg(long)]
        max_seq: Option<usize>,
        #[arg(long)]
        n_classes: Option<usize>,
        /// Cluster sizes; one full-rank cluster when omitted.
        #[arg(long, value_delimiter = ',', requires = "cluster_ranks")]
        cluster_sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', requires = "cluster_sizes")]
        cluster_ranks: Option<Vec<usize>>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    fn usage(msg: impl Into<String>) -> Self {
        Self::new(2, msg)
    }
}

fn stage_of(tag: &str) -> &str {
    tag.split('.').next().unwrap_or(tag)
}

/// Maps a runtime error; `bottleneck` names the stage for infeasible budgets.
fn runtime_failure(e: Error, bottleneck: &str) -> Failure {
    match &e {
        Error::OutOfMemory { tag, .. } => Failure::new(3, format!("stage {}: {e}", stage_of(tag))),
        Error::InfeasibleBudget { .. } => Failure::new(3, format!("stage {bottleneck}: {e}")),
        Error::InvalidTile { .. } | Error::InvalidSequence { .. } => Failure::usage(e.to_string()),
        _ => Failure::new(1, e.to_string()),
    }
}

fn load(path: &Path) -> Result<EncoderModel, Failure> {
    load_model_file(path).map_err(|e| Failure::new(4, format!("{}: {e}", path.display())))
}

fn read_tokens(path: &Path) -> Result<Vec<usize>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
    text.split_whitespace()
        .map(|w| w.parse::<usize>().map_err(|_| Failure::new(1, format!("{}: bad token id `{w}`", path.display()))))
        .collect()
}

fn parse_tile(tile: &str) -> Result<Option<usize>, Failure> {
    if tile == "auto" {
        return Ok(None);
    }
    match tile.parse::<usize>() {
        Ok(t) if t > 0 => Ok(Some(t)),
        _ => Err(Failure::usage(format!("--tile must be `auto` or a positive integer, got `{tile}`"))),
    }
}

fn print_json(v: &impl Serialize) {
    let text = serde_json::to_string_pretty(v).expect("serializable report");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Naive => "naive",
        Mode::Tiled => "tiled",
    }
}

#[derive(Serialize)]
struct Ops {
    macs: u64,
    dot4_ops: u64,
    loads: u64,
    stores: u64,
}

impl From<OpCounts> for Ops {
    fn from(o: OpCounts) -> Self {
        Self {
            macs: o.macs,
            dot4_ops: o.dot4_ops,
            loads: o.loads,
            stores: o.stores,
        }
    }
}

#[derive(Serialize)]
struct RunReport {
    mode: Mode,
    seq_len: usize,
    tile: usize,
    budget_bytes: usize,
    logits: Vec<i8>,
    logits_f32: Vec<f32>,
    predicted_class: usize,
    predicted_peaks: StagePeaks,
    measured_peaks: StagePeaks,
    predicted_peak_bytes: usize,
    measured_peak_bytes: usize,
    ops: Ops,
    wall_time_ms: f64,
}

fn write_trace(arena: &Arena, path: &Path) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
    arena
        .write_trace(std::io::BufWriter::new(file))
        .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn cmd_run(
    model: &Path,
    input: &Path,
    budget: usize,
    tile: &str,
    naive: bool,
    trace: Option<&Path>,
    report: ReportFormat,
) -> Result<(), Failure> {
    let tile = parse_tile(tile)?;
    let model = load(model)?;
    let tokens = read_tokens(input)?;
    let cfg = &model.config;
    let s = tokens.len();
    if s == 0 || s > cfg.max_seq {
        return Err(Failure::new(1, format!("input has {s} tokens, model accepts 1..={}", cfg.max_seq)));
    }
    let bottleneck = peak_memory_model(cfg, s, 1, Mode::Tiled)
        .map(|p| p.bottleneck())
        .unwrap_or("embedding");
    let plan = match (naive, tile) {
        (true, _) => SchedulePlan::naive(cfg, s),
        (false, Some(t)) => SchedulePlan::tiled(cfg, s, t),
        (false, None) => plan_tile_size(cfg, s, budget),
    }
    .map_err(|e| runtime_failure(e, bottleneck))?;

    let mut arena = Arena::new(budget);
    let start = Instant::now();
    let result = run_encoder(&tokens, &model, &plan, &mut arena);
    let wall = start.elapsed();
    if let Some(path) = trace {
        write_trace(&arena, path)?;
    }
    let out = result.map_err(|e| runtime_failure(e, bottleneck))?;

    let r = RunReport {
        mode: plan.mode,
        seq_len: s,
        tile: plan.t,
        budget_bytes: budget,
        logits: out.logits,
        logits_f32: out.logits_f32,
        predicted_class: out.predicted,
        predicted_peaks: plan.stage_peaks,
        measured_peaks: out.stage_peaks,
        predicted_peak_bytes: plan.predicted_peak(),
        measured_peak_bytes: out.peak_bytes,
        ops: out.ops.into(),
        wall_time_ms: wall.as_secs_f64() * 1e3,
    };
    match report {
        ReportFormat::Json => print_json(&r),
        ReportFormat::Text => {
            println!("mode {}  s={}  t={}  budget={} B", mode_name(r.mode), r.seq_len, r.tile, r.budget_bytes);
            println!("{:<10} {:>12} {:>12}", "stage", "predicted", "measured");
            for ((name, p), (_, m)) in r.predicted_peaks.iter().zip(r.measured_peaks.iter()) {
                println!("{name:<10} {p:>12} {m:>12}");
            }
            println!("{:<10} {:>12} {:>12}", "peak", r.predicted_peak_bytes, r.measured_peak_bytes);
            println!("macs {}  dot4 {}  loads {}  stores {}", r.ops.macs, r.ops.dot4_ops, r.ops.loads, r.ops.stores);
            println!("logits {:?}  class {}", r.logits_f32, r.predicted_class);
            println!("wall {:.3} ms", r.wall_time_ms);
        }
    }
    Ok(())
}

fn cmd_plan(model: &Path, s: usize, budget: usize) -> Result<(), Failure> {
    let model = load(model)?;
    let cfg = &model.config;
    if s == 0 || s > cfg.max_seq {
        return Err(Failure::usage(format!("--seq-len must be in 1..={}", cfg.max_seq)));
    }
    let bottleneck = peak_memory_model(cfg, s, 1, Mode::Tiled).map_err(|e| runtime_failure(e, ""))?.bottleneck();
    let plan = plan_tile_size(cfg, s, budget).map_err(|e| runtime_failure(e, bottleneck))?;
    let naive = peak_memory_model(cfg, s, s, Mode::Naive).map_err(|e| runtime_failure(e, ""))?;
    print_json(&json!({
        "seq_len": s,
        "budget_bytes": budget,
        "tile": plan.t,
        "predicted_peak_bytes": plan.predicted_peak(),
        "bottleneck": plan.stage_peaks.bottleneck(),
        "stage_peaks": plan.stage_peaks,
        "naive_stage_peaks": naive,
        "naive_peak_bytes": naive.max(),
        "naive_fits": naive.max() <= budget,
    }));
    Ok(())
}

fn cmd_inspect(model: &Path) -> Result<(), Failure> {
    let path = model;
    let model = load(path)?;
    let bytes = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    print_json(&json!({
        "config": model.config,
        "cluster_spec": model.embedding.spec(),
        "param_counts": model.param_counts(),
        "file_bytes": bytes,
    }));
    Ok(())
}

fn cmd_bench(model: &Path, seq_lens: &[usize], modes: &[String], sram_kb: Option<usize>, tile: Option<usize>) -> Result<(), Failure> {
    let modes = modes
        .iter()
        .map(|m| match m.as_str() {
            "naive" => Ok(Mode::Naive),
            "tiled" => Ok(Mode::Tiled),
            other => Err(Failure::usage(format!("unknown mode `{other}`"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = load(model)?;
    let cfg = &model.config;
    let budget = sram_kb.map_or(usize::MAX, |kb| kb * 1024);
    let mut rows = Vec::new();
    for &s in seq_lens {
        if s == 0 || s > cfg.max_seq {
            return Err(Failure::usage(format!("sequence length {s} outside 1..={}", cfg.max_seq)));
        }
        let tokens: Vec<usize> = (0..s).map(|i| (i * 7919 + 1) % cfg.vocab).collect();
        for &mode in &modes {
            let plan = match mode {
                Mode::Naive => SchedulePlan::naive(cfg, s),
                Mode::Tiled => match tile {
                    Some(t) => SchedulePlan::tiled(cfg, s, t.min(s)),
                    None if budget == usize::MAX => SchedulePlan::tiled(cfg, s, 4.min(s)),
                    None => plan_tile_size(cfg, s, budget),
                },
            };
            let plan = match plan {
                Ok(p) => p,
                Err(e @ Error::InfeasibleBudget { .. }) => {
                    rows.push(json!({"seq_len": s, "mode": mode, "status": "oom", "error": e.to_string()}));
                    continue;
                }
                Err(e) => return Err(runtime_failure(e, "")),
            };
            let mut arena = Arena::new(budget);
            let start = Instant::now();
            let run = run_encoder(&tokens, &model, &plan, &mut arena);
            let wall = start.elapsed().as_secs_f64() * 1e3;
            rows.push(match run {
                Ok(out) => json!({
                    "seq_len": s,
                    "mode": mode,
                    "status": "ok",
                    "tile": plan.t,
                    "predicted_peak_bytes": plan.predicted_peak(),
                    "measured_peak_bytes": out.peak_bytes,
                    "stage_peaks": out.stage_peaks,
                    "ops": Ops::from(out.ops),
                    "wall_time_ms": wall,
                }),
                Err(e @ Error::OutOfMemory { .. }) => json!({
                    "seq_len": s,
                    "mode": mode,
                    "status": "oom",
                    "tile": plan.t,
                    "predicted_peak_bytes": plan.predicted_peak(),
                    "error": runtime_failure(e, "").msg,
                }),
                Err(e) => return Err(runtime_failure(e, "")),
            });
        }
    }
    print_json(&json!({
        "budget_bytes": sram_kb.map(|kb| kb * 1024),
        "rows": rows,
    }));
    Ok(())
}

fn cmd_synth(
    out: &Path,
    preset: Preset,
    seed: u64,
    overrides: [Option<usize>; 7],
    sizes: Option<Vec<usize>>,
    ranks: Option<Vec<usize>>,
) -> Result<(), Failure> {
    let mut cfg = match preset {
        Preset::BertTiny => EncoderConfig::bert_tiny(),
        Preset::Small => EncoderConfig {
            vocab: 1000,
            d_model: 32,
            heads: 2,
            layers: 2,
            d_ffn: 128,
            max_seq: 128,
            n_classes: 3,
        },
    };
    let fields = [
        &mut cfg.vocab,
        &mut cfg.d_model,
        &mut cfg.heads,
        &mut cfg.layers,
        &mut cfg.d_ffn,
        &mut cfg.max_seq,
        &mut cfg.n_classes,
    ];
    for (field, v) in fields.into_iter().zip(overrides) {
        if let Some(v) = v {
            *field = v;
        }
    }
    let spec = match (sizes, ranks) {
        (Some(sizes), Some(ranks)) => ClusterSpec { sizes, ranks },
        _ => ClusterSpec::full(cfg.vocab, cfg.d_model),
    };
    let model = EncoderModel::random(cfg, spec, seed).map_err(|e| Failure::usage(e.to_string()))?;
    let n = write_model_file(&model, out).map_err(|e| Failure::new(1, format!("{}: {e}", out.display())))?;
    print_json(&json!({
        "path": out.display().to_string(),
        "bytes": n,
        "param_counts": model.param_counts(),
    }));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Command::Run {
            model,
            input,
            budget,
            tile,
            naive,
            trace,
            report,
        } => cmd_run(&model, &input, budget.bytes(), &tile, naive, trace.as_deref(), report),
        Command::Plan { model, seq_len, budget } => cmd_plan(&model, seq_len, budget.bytes()),
        Command::Inspect { model } => cmd_inspect(&model),
        Command::Bench {
            model,
            seq_lens,
            modes,
            sram_kb,
            tile,
        } => cmd_bench(&model, &seq_lens, &modes, sram_kb, tile),
        Command::Synth {
            out,
            preset,
            seed,
            vocab,
            d_model,
            heads,
            layers,
            d_ffn,
            max_seq,
            n_classes,
            cluster_sizes,
            cluster_ranks,
        } => cmd_synth(
            &out,
            preset,
            seed,
            [vocab, d_model, heads, layers, d_ffn, max_seq, n_classes],
            cluster_sizes,
            cluster_ranks,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
