use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use primal_core::config::{
    parse_config, ConfigFile, HardwareSpec, LoraSpec, MatrixId, ModelSection, ModelSpec, WorkloadSpec,
};
use primal_core::metrics::{check_tables, emit_reports, Format, SimReport};
use primal_core::pipeline::{simulate, Mode, RunOptions};

const SWEEP_MODELS: [&str; 3] = ["llama3.2-1b", "llama3-8b", "llama2-13b"];

#[derive(Parser)]
#[command(name = "primal", version, about = "Spatial PIM accelerator simulator for LoRA-adapted transformer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one model and workload.
    Sim(SimArgs),
    /// Run a grid of presets, LoRA target sets and context lengths.
    Sweep(SweepArgs),
    /// Check the reference rows for internal consistency.
    CheckTables(CheckArgs),
}

#[derive(Args)]
struct Common {
    /// Hardware description: a full config file or a bare hardware object.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// LoRA rank; 0 disables the adapters.
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long, default_value = "analytical", value_parser = parse_mode)]
    mode: Mode,
    /// Decode positions simulated per layer; others are interpolated.
    #[arg(long, default_value_t = 32)]
    decode_samples: u32,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "table", value_parser = parse_format)]
    format: Format,
    /// Fault injection: drop the N-th ejected flit of every cycle-level run.
    #[arg(long, hide = true)]
    drop_flit: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Preset name or config file; defaults to the model of `--hw` or the 1B preset.
    #[arg(long)]
    model: Option<String>,
    /// Adapted projections, e.g. `q,v`.
    #[arg(long, value_parser = parse_targets)]
    lora_targets: Option<Targets>,
    #[arg(long)]
    in_len: Option<u32>,
    #[arg(long)]
    out_len: Option<u32>,
    /// Write the per-tile power-state schedule as CSV.
    #[arg(long)]
    gantt: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Models to sweep (presets or config files); defaults to the three presets.
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    /// Target sets to sweep; repeat the flag for several sets.
    #[arg(long, value_parser = parse_targets)]
    lora_targets: Vec<Targets>,
    /// Context lengths L; each runs L input and L output tokens.
    #[arg(long, value_delimiter = ',', default_values_t = [1024u32, 2048])]
    context: Vec<u32>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value = "table", value_parser = parse_format)]
    format: Format,
}

#[derive(Clone)]
struct Targets(Vec<MatrixId>);

fn parse_targets(s: &str) -> std::result::Result<Targets, String> {
    s.split(',')
        .map(|t| MatrixId::parse(t).ok_or_else(|| format!("unknown projection `{t}`")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Targets)
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: primal_core::Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: primal_core::Error| e.to_string())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// A config file is recognised by its `schema_version` key.
fn is_config_file(text: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(text).is_ok_and(|v| v.get("schema_version").is_some())
}

struct Base {
    hw: HardwareSpec,
    model: Option<ModelSpec>,
    workload: Option<WorkloadSpec>,
}

fn load_hw(path: Option<&Path>) -> Result<Base> {
    let Some(path) = path else {
        return Ok(Base { hw: HardwareSpec::default(), model: None, workload: None });
    };
    let text = read(path)?;
    if is_config_file(&text) {
        let file: ConfigFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if file.model.preset.is_some() || file.model.name.is_some() {
            let c = file.into_config()?;
            return Ok(Base { hw: c.hardware, model: Some(c.model), workload: Some(c.workload) });
        }
        file.hardware.validate()?;
        file.workload.validate()?;
        return Ok(Base { hw: file.hardware, model: None, workload: Some(file.workload) });
    }
    let hw: HardwareSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    hw.validate()?;
    Ok(Base { hw, model: None, workload: None })
}

fn load_model(arg: &str) -> Result<ModelSpec> {
    if let Ok(m) = ModelSpec::preset(arg) {
        return Ok(m);
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!("`{arg}` is neither a model preset nor a readable file");
    }
    let text = read(path)?;
    if is_config_file(&text) {
        return Ok(parse_config(&text)?.model);
    }
    let section: ModelSection = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(section.resolve()?)
}

fn apply_lora(m: &mut ModelSpec, rank: Option<u32>, targets: Option<&Targets>) -> Result<()> {
    let mut lora = m.lora.clone();
    if let Some(r) = rank {
        lora.rank = r;
    }
    if let Some(t) = targets {
        lora.targets = t.0.clone();
    }
    if lora.rank == 0 {
        lora = LoraSpec { scale: lora.scale, ..LoraSpec::none() };
    }
    m.lora = lora;
    m.validate()?;
    Ok(())
}

fn run_options(c: &Common) -> RunOptions {
    let mut o = RunOptions { mode: c.mode, decode_samples: c.decode_samples, ..Default::default() };
    o.sim.drop_flit = c.drop_flit;
    o
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_violations(label: &str, v: &[String]) {
    for msg in v {
        eprintln!("violation [{label}]: {msg}");
    }
}

fn sim(a: SimArgs) -> Result<bool> {
    let base = load_hw(a.common.hw.as_deref())?;
    let mut model = match (&a.model, base.model) {
        (Some(arg), _) => load_model(arg)?,
        (None, Some(m)) => m,
        (None, None) => ModelSpec::preset("llama3.2-1b")?,
    };
    apply_lora(&mut model, a.common.rank, a.lora_targets.as_ref())?;
    let mut w = base.workload.unwrap_or_default();
    if let Some(n) = a.in_len {
        w.input_len = n;
    }
    if let Some(n) = a.out_len {
        w.output_len = n;
    }
    let r = simulate(&base.hw, &model, &w, &run_options(&a.common))?;
    for warn in &r.report.warnings {
        eprintln!("warning: {warn}");
    }
    report_violations(&model.name, &r.violations);
    if let Some(p) = &a.gantt {
        std::fs::write(p, r.schedule.gantt_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_output(a.common.report.as_deref(), &emit_reports(&[r.report], a.common.format)?)?;
    Ok(r.violations.is_empty())
}

fn sweep(a: SweepArgs) -> Result<bool> {
    let base = load_hw(a.common.hw.as_deref())?;
    let names: Vec<String> = if a.model.is_empty() {
        SWEEP_MODELS.iter().map(|s| s.to_string()).collect()
    } else {
        a.model.clone()
    };
    let target_sets = if a.lora_targets.is_empty() {
        vec![Targets(vec![MatrixId::Q]), Targets(vec![MatrixId::Q, MatrixId::V])]
    } else {
        a.lora_targets.clone()
    };
    let mut jobs = Vec::new();
    for name in &names {
        let m = load_model(name)?;
        for t in &target_sets {
            let mut m = m.clone();
            apply_lora(&mut m, Some(a.common.rank.unwrap_or(8)), Some(t))?;
            for &len in &a.context {
                jobs.push((m.clone(), WorkloadSpec::new(len, len)));
            }
        }
    }
    let opts = run_options(&a.common);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(workers) {
        let out: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> =
                chunk.iter().map(|(m, w)| s.spawn(|| simulate(&base.hw, m, w, &opts))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        results.extend(out);
    }
    let mut ok = true;
    let mut reports: Vec<SimReport> = Vec::with_capacity(results.len());
    for ((m, w), r) in jobs.iter().zip(results) {
        let label = format!("{} {} {}", m.name, m.lora.target_label(), w.context_label());
        let r = r.with_context(|| label.clone())?;
        for warn in &r.report.warnings {
            eprintln!("warning [{label}]: {warn}");
        }
        report_violations(&label, &r.violations);
        ok &= r.violations.is_empty();
        reports.push(r.report);
    }
    write_output(a.common.report.as_deref(), &emit_reports(&reports, a.common.format)?)?;
    Ok(ok)
}

fn check(a: CheckArgs) -> Result<bool> {
    let rows = check_tables()?;
    let ok = rows.iter().all(|r| r.efficiency_ok() && r.throughput_ok());
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
        Format::Csv => {
            println!("row,efficiency,efficiency_rel_err,efficiency_ok,throughput,throughput_rel_err,throughput_ok");
            for r in &rows {
                println!(
                    "{},{:.4},{:.6},{},{:.4},{:.6},{}",
                    r.label,
                    r.efficiency,
                    r.efficiency_rel_err,
                    r.efficiency_ok(),
                    r.throughput,
                    r.throughput_rel_err,
                    r.throughput_ok()
                );
            }
        }
        Format::Table => {
            println!("{:<28} {:>10} {:>8} {:>10} {:>8}", "row", "tok/J", "err %", "tok/s", "err %");
            for r in &rows {
                let mark = |ok: bool| if ok { "" } else { " !" };
                println!(
                    "{:<28} {:>10.2} {:>8.3}{} {:>10.2} {:>8.3}{}",
                    r.label,
                    r.efficiency,
                    r.efficiency_rel_err * 100.0,
                    mark(r.efficiency_ok()),
                    r.throughput,
                    r.throughput_rel_err * 100.0,
                    mark(r.throughput_ok())
                );
            }
            println!("{}", if ok { "all rows consistent" } else { "inconsistent rows found" });
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sim(a) => sim(a),
        Command::Sweep(a) => sweep(a),
        Command::CheckTables(a) => check(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
