use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dimmpim_core::config::SchedulerPolicy;
use dimmpim_core::sim::{run_simulation, Policy, RunMetrics, RunOptions};
use dimmpim_core::trace::{shape, synth_trace, with_poisson_arrivals, Trace};
use dimmpim_core::SimConfig;
use dimmpim_sim::report::{self, Format};
use dimmpim_sim::{config_io, dump, sweep, trace_io};

#[derive(Parser)]
#[command(name = "simrun", about = "GPU + DIMM-PIM LLM inference simulator", args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Option<Cmd>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a rankset × capacity grid.
    Sweep(SweepArgs),
    /// Write a synthetic JSONL trace.
    Synth {
        #[arg(long, default_value = "openr1")]
        shape: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Poisson arrival rate in requests/s; all arrive at 0 when omitted.
        #[arg(long)]
        poisson: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print chip images of one burst before and after re-layout, in hex.
    RelayoutDump {
        #[arg(long, default_value_t = 16)]
        elem_bits: u32,
        #[arg(long, default_value_t = 8)]
        chip_io_bits: u32,
        #[arg(long, default_value_t = 64)]
        bus_bits: u32,
        #[arg(long, default_value_t = 2)]
        beats: u32,
    },
    /// CSV of KV placement for a few synthetic requests.
    PlacementDump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        requests: u64,
        #[arg(long, default_value_t = 16)]
        tokens: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CSV of the DDR command stream of one head kernel.
    PimTrace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        tokens: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the default configuration as TOML.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedArg {
    L3,
    PrefillPriority,
    SingleBatch,
}

impl From<SchedArg> for SchedulerPolicy {
    fn from(s: SchedArg) -> Self {
        match s {
            SchedArg::L3 => SchedulerPolicy::L3,
            SchedArg::PrefillPriority => SchedulerPolicy::PrefillPriority,
            SchedArg::SingleBatch => SchedulerPolicy::SingleBatch,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML config; the built-in GPT-175B / DGX-A100 system when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL trace file.
    #[arg(long, conflicts_with = "synth")]
    trace: Option<PathBuf>,
    /// Synthesize a trace of `--sample` requests with a named shape instead.
    #[arg(long)]
    synth: Option<String>,
    /// Draw this many requests from the trace (or synthesize this many).
    #[arg(long)]
    sample: Option<usize>,
    /// Poisson arrival rate in requests/s; closed-loop when omitted.
    #[arg(long)]
    poisson: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Overrides the configured sub-batch scheduler for the l3 policy.
    #[arg(long, value_enum)]
    scheduler: Option<SchedArg>,
    /// Use the analytical cost models instead of learned predictors.
    #[arg(long)]
    oracle: bool,
    /// Disable DRAM refresh modelling.
    #[arg(long)]
    no_refresh: bool,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    /// Policy runs are normalized against.
    #[arg(long, default_value = "gpu-only")]
    baseline: String,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated policies: l3, gpu-only, hbm-pim, rank-pim, cpu-offload, or all.
    #[arg(long, default_value = "l3")]
    policy: String,
    /// Also write per-run timelines as JSON.
    #[arg(long)]
    timeline: bool,
    /// Also write the learned predictor windows as CSV.
    #[arg(long)]
    dump_predictor: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "l3")]
    policy: String,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    ranksets: Vec<u32>,
    /// Host capacities in GiB; the configured geometry when omitted.
    #[arg(long, value_delimiter = ',')]
    capacity_gb: Vec<u64>,
    #[arg(long, default_value_t = std::thread::available_parallelism().map_or(1, |n| n.get()))]
    workers: usize,
}

fn policies(s: &str) -> Result<Vec<Policy>> {
    if s == "all" {
        return Ok(Policy::ALL.to_vec());
    }
    s.split(',').map(|p| Policy::parse(p.trim()).with_context(|| format!("unknown policy `{p}`"))).collect()
}

fn load_config(c: &Common) -> Result<SimConfig> {
    let mut cfg = match &c.config {
        Some(p) => config_io::load_config(p)?,
        None => SimConfig::dgx_gpt175b(),
    };
    cfg.scheduler.seed = c.seed;
    if let Some(s) = c.scheduler {
        cfg.scheduler.policy = s.into();
    }
    Ok(cfg)
}

fn load_trace(c: &Common) -> Result<Trace> {
    let t = match (&c.trace, &c.synth) {
        (Some(p), _) => trace_io::load_trace(p, c.sample, c.seed)?,
        (None, Some(name)) => {
            let s = shape(name).with_context(|| format!("unknown trace shape `{name}`"))?;
            synth_trace(c.sample.unwrap_or(1000), &s, c.seed).map_err(dimmpim_core::Error::from)?
        }
        (None, None) => bail!("one of --trace or --synth is required"),
    };
    Ok(match c.poisson {
        Some(rate) => with_poisson_arrivals(&t, rate, c.seed).map_err(dimmpim_core::Error::from)?,
        None => t,
    })
}

fn options(c: &Common, timeline: bool) -> RunOptions {
    RunOptions { record_timeline: timeline, refresh: !c.no_refresh, oracle: c.oracle, ..Default::default() }
}

fn format(c: &Common) -> Result<Format> {
    Format::parse(&c.format).with_context(|| format!("unknown format `{}` (csv or json)", c.format))
}

fn finish(c: &Common, runs: &[RunMetrics]) -> Result<()> {
    let files = report::report(runs, &c.out, format(c)?, &c.baseline)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let trace = load_trace(&a.common)?;
    format(&a.common)?;
    fs::create_dir_all(&a.common.out).with_context(|| a.common.out.display().to_string())?;
    let mut runs = Vec::new();
    for p in policies(&a.policy)? {
        log::info!("running {} on {} ({} requests)", p.as_str(), trace.provenance, trace.len());
        let out = run_simulation(&trace, &cfg, p, options(&a.common, a.timeline))?;
        let m = &out.metrics;
        println!(
            "{:<12} {:>10.1} tok/s  tbt p50 {:>8.2} ms  p99 {:>8.2} ms  iterations {}",
            p.as_str(),
            m.throughput_tps,
            m.tbt_p50_ns / 1e6,
            m.tbt_p99_ns / 1e6,
            m.iterations
        );
        if a.timeline {
            report::write_timeline(&out.timeline, &a.common.out.join(format!("timeline-{}.json", p.as_str())))?;
        }
        if let (true, Some(pred)) = (a.dump_predictor, &out.predictor) {
            let path = a.common.out.join(format!("predictor-{}.csv", p.as_str()));
            dump::predictor_window(pred, fs::File::create(&path)?)?;
        }
        runs.push(out.metrics);
    }
    finish(&a.common, &runs)
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let trace = load_trace(&a.common)?;
    let caps: Vec<Option<u64>> =
        if a.capacity_gb.is_empty() { vec![None] } else { a.capacity_gb.iter().map(|g| Some(g << 30)).collect() };
    let points = sweep::grid(&a.ranksets, &caps, &policies(&a.policy)?);
    let mut runs = Vec::new();
    for (pt, r) in sweep::sweep(&trace, &cfg, &points, options(&a.common, false), a.workers) {
        let m = r.with_context(|| format!("{} {}", pt.label(), pt.policy.as_str()))?;
        println!("{:<16} {:<12} {:>10.1} tok/s", pt.label(), pt.policy.as_str(), m.throughput_tps);
        runs.push(m);
    }
    finish(&a.common, &runs)
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn io::Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| p.display().to_string())?),
        None => Box::new(io::stdout().lock()),
    })
}

fn config_or_default(p: &Option<PathBuf>) -> Result<SimConfig> {
    Ok(match p {
        Some(p) => config_io::load_config(Path::new(p))?,
        None => SimConfig::dgx_gpt175b(),
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        None => run(&cli.run),
        Some(Cmd::Sweep(a)) => run_sweep(&a),
        Some(Cmd::Synth { shape: name, n, seed, poisson, out }) => {
            let s = shape(&name).with_context(|| format!("unknown trace shape `{name}`"))?;
            let mut t = synth_trace(n, &s, seed).map_err(dimmpim_core::Error::from)?;
            if let Some(rate) = poisson {
                t = with_poisson_arrivals(&t, rate, seed).map_err(dimmpim_core::Error::from)?;
            }
            Ok(trace_io::save_trace(&t, out)?)
        }
        Some(Cmd::RelayoutDump { elem_bits, chip_io_bits, bus_bits, beats }) => {
            print!("{}", dump::relayout_dump(bus_bits, chip_io_bits, elem_bits, beats)?);
            Ok(())
        }
        Some(Cmd::PlacementDump { config, requests, tokens, out }) => {
            dump::placement_dump(&config_or_default(&config)?, requests, tokens, sink(&out)?)
                .map_err(|e| anyhow::anyhow!("{e}"))
        }
        Some(Cmd::PimTrace { config, tokens, out }) => {
            dump::pim_trace(&config_or_default(&config)?, tokens, sink(&out)?).map_err(|e| anyhow::anyhow!("{e}"))
        }
        Some(Cmd::DefaultConfig { out }) => {
            sink(&out)?.write_all(config_io::config_to_toml(&SimConfig::dgx_gpt175b()).as_bytes())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let audit = e.chain().any(|c| {
                matches!(c.downcast_ref::<dimmpim_core::Error>(), Some(dimmpim_core::Error::Audit { .. }))
                    || matches!(
                        c.downcast_ref::<dimmpim_sim::IoError>(),
                        Some(dimmpim_sim::IoError::Sim(dimmpim_core::Error::Audit { .. }))
                    )
            });
            eprintln!("error: {e:#}");
            ExitCode::from(if audit { 3 } else { 1 })
        }
    }
}
