use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fogalloc::audit::{self, FuzzConfig};
use fogalloc::orchestrator::{Orchestrator, OrchestratorConfig};
use fogalloc::simnet::{self, Load, RaaClock, Scenario, SimConfig, TopologyGen};
use fogalloc::southbound::SimFabric;
use fogalloc::topology::{Bps, NodeKind, Topology, DEFAULT_CONTROL_BW};

/// Fog resource orchestration: topology generation, scenario replay,
/// scalability sweeps and invariant checks.
#[derive(Parser, Debug)]
#[command(name = "fogalloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a generated topology as JSON.
    Gen(GenArgs),
    /// Replay a scenario and write metrics.csv and summary.json.
    Run(RunArgs),
    /// Run a scalability sweep and write one CSV row per point and metric.
    Sweep(SweepArgs),
    /// Fuzz the orchestrator against the oracle and the ledger audit.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct Shape {
    /// Fog-devices per top-level switch for generated topologies.
    #[arg(long, env = "FOGALLOC_FOGS")]
    fogs: Option<usize>,
    /// End-device count for generated topologies.
    #[arg(long, env = "FOGALLOC_ENDS")]
    ends: Option<usize>,
    /// Bandwidth set aside on every link for control traffic, in bit/s.
    #[arg(long, env = "FOGALLOC_CONTROL_BW", default_value_t = DEFAULT_CONTROL_BW)]
    control_bw: Bps,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Topology JSON file.
    #[arg(long, env = "FOGALLOC_TOPOLOGY")]
    topology: Option<PathBuf>,
    /// Generator spec, `a:L1,L2` (leaf-spine) or `b:L1,L2,L3` (tree).
    #[arg(long = "gen", env = "FOGALLOC_GEN")]
    generator: Option<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Generator spec, `a:L1,L2` or `b:L1,L2,L3`.
    #[arg(long = "gen", env = "FOGALLOC_GEN")]
    generator: String,
    #[command(flatten)]
    shape: Shape,
    /// Output file; stdout when absent.
    #[arg(long, env = "FOGALLOC_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    shape: Shape,
    #[arg(long, env = "FOGALLOC_SCENARIO")]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, env = "FOGALLOC_OUT")]
    out: PathBuf,
    #[arg(long, env = "FOGALLOC_SEED")]
    seed: Option<u64>,
    /// Simulator settings as JSON; missing fields keep their defaults.
    #[arg(long, env = "FOGALLOC_SIM_CONFIG")]
    sim_config: Option<PathBuf>,
    /// Allocation time charged per request: seconds, or `wall` to measure.
    #[arg(long, env = "FOGALLOC_RAA_TIME", default_value = "0.001")]
    raa_time: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SweepKind {
    RaaTime,
    AllocDelay,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, env = "FOGALLOC_SWEEP")]
    sweep: SweepKind,
    /// Generator specs to sweep, separated by `;`.
    #[arg(long = "gen", env = "FOGALLOC_GEN", default_value = "b:25,12,6")]
    generator: String,
    /// Parameter ranges: `fogs=5,10,20` for raa_time; `x=..;y=..` (bit/s)
    /// for alloc_delay.
    #[arg(long, env = "FOGALLOC_GRID", default_value = "")]
    grid: String,
    #[command(flatten)]
    shape: Shape,
    /// Timing repetitions per end-device; the minimum is kept.
    #[arg(long, env = "FOGALLOC_REPS", default_value_t = 5)]
    reps: usize,
    #[arg(long, env = "FOGALLOC_SEED")]
    seed: Option<u64>,
    /// Output CSV; stdout when absent.
    #[arg(long, env = "FOGALLOC_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    shape: Shape,
    /// Random operations to run.
    #[arg(long, env = "FOGALLOC_OPS", default_value_t = 500)]
    ops: usize,
    #[arg(long, env = "FOGALLOC_SEED", default_value_t = 0)]
    seed: u64,
    /// Charge a phantom byte of memory before checking.
    #[arg(long)]
    corrupt_ledger: bool,
    /// Where to write a counterexample; stderr when absent.
    #[arg(long, env = "FOGALLOC_OUT")]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Invariant(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant violated: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn generator(spec: &str, shape: &Shape) -> Result<TopologyGen> {
    let mut g = TopologyGen::parse(spec)?;
    if let Some(f) = shape.fogs {
        g.fogs_per_top_switch = f;
    }
    g.end_devices = shape.ends.or(g.end_devices);
    g.control_bw = shape.control_bw;
    Ok(g)
}

fn load_topology(source: &Source, shape: &Shape) -> Result<Topology> {
    match (&source.topology, &source.generator) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Topology::from_json(&text, shape.control_bw).with_context(|| format!("loading {}", path.display()))
        }
        (None, Some(spec)) => Ok(generator(spec, shape)?.generate()?),
        _ => bail!("give exactly one of --topology and --gen"),
    }
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), Failure> {
    let snap = generator(&a.generator, &a.shape)?
        .snapshot()
        .map_err(anyhow::Error::from)?;
    let mut text = snap.to_json();
    text.push('\n');
    write_out(a.out.as_deref(), text.as_bytes())?;
    Ok(())
}

fn raa_clock(s: &str) -> Result<RaaClock> {
    if s == "wall" {
        return Ok(RaaClock::WallTime);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(RaaClock::Fixed(v)),
        _ => bail!("--raa-time must be `wall` or a non-negative number of seconds, got {s:?}"),
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let t = load_topology(&a.source, &a.shape)?;
    let text = fs::read_to_string(&a.scenario).with_context(|| format!("reading {}", a.scenario.display()))?;
    let scenario = Scenario::from_json(&text).with_context(|| format!("parsing {}", a.scenario.display()))?;
    let mut cfg = match &a.sim_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SimConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    cfg.raa_clock = raa_clock(&a.raa_time)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let metrics = simnet::run_scenario(t, &scenario, &cfg).context("running scenario")?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = Vec::new();
    metrics.write_csv(&mut csv).context("formatting metrics")?;
    fs::write(a.out.join("metrics.csv"), csv).context("writing metrics.csv")?;
    let summary = metrics.summary();
    let mut json = serde_json::to_string_pretty(&summary).context("formatting summary")?;
    json.push('\n');
    fs::write(a.out.join("summary.json"), json).context("writing summary.json")?;
    match summary.reconciliation_error {
        None => Ok(()),
        Some(e) => Err(Failure::Invariant(e)),
    }
}

fn parse_grid(grid: &str, allowed: &[&str]) -> Result<BTreeMap<String, Vec<u64>>> {
    let mut out = BTreeMap::new();
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .with_context(|| format!("grid entry {part:?} is not key=values"))?;
        let k = k.trim();
        if !allowed.contains(&k) {
            bail!("unknown grid key {k:?}; expected one of {allowed:?}");
        }
        let vals = vs
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .with_context(|| format!("bad value {v:?} for {k}"))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.is_empty() {
            bail!("grid key {k} has no values");
        }
        out.insert(k.to_string(), vals);
    }
    Ok(out)
}

#[derive(Serialize)]
struct Row {
    config: String,
    metric: String,
    median: f64,
    q1: f64,
    q3: f64,
    n: usize,
}

fn row(config: String, metric: String, values: &[f64]) -> Option<Row> {
    let (q1, median, q3) = simnet::quartiles(values)?;
    Some(Row {
        config,
        metric,
        median,
        q1,
        q3,
        n: values.len(),
    })
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let specs: Vec<&str> = a
        .generator
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if specs.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("--gen names no topology")));
    }
    let mut rows = Vec::new();
    match a.sweep {
        SweepKind::RaaTime => {
            let grid = parse_grid(&a.grid, &["fogs"])?;
            let fogs: Vec<Option<usize>> = match grid.get("fogs") {
                Some(v) => v.iter().map(|&f| Some(f as usize)).collect(),
                None => vec![None],
            };
            for spec in &specs {
                for f in &fogs {
                    let mut g = generator(spec, &a.shape)?;
                    if let Some(f) = f {
                        g.fogs_per_top_switch = *f;
                    }
                    let t = g.generate().map_err(anyhow::Error::from)?;
                    let samples = simnet::raa_time_samples(&t, a.reps);
                    let config = format!("{} fogs={}", g.label(), g.fogs_per_top_switch);
                    rows.extend(row(config, "raa_time_s".into(), &samples));
                }
            }
        }
        SweepKind::AllocDelay => {
            let grid = parse_grid(&a.grid, &["x", "y"])?;
            let xs = grid.get("x").cloned().unwrap_or_else(|| vec![0]);
            let ys = grid.get("y").cloned().unwrap_or_else(|| vec![a.shape.control_bw]);
            let mut cfg = SimConfig::default().fixed_clock(0.001);
            cfg.seed = a.seed.unwrap_or(0);
            for spec in &specs {
                let g = generator(spec, &a.shape)?;
                let t = g.generate().map_err(anyhow::Error::from)?;
                for &x in &xs {
                    for &y in &ys {
                        let samples = simnet::alloc_delay_samples(t.clone(), Load { x, y }, &cfg)
                            .with_context(|| format!("x={x} y={y}"))?;
                        let mut by_hops: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                        for (h, d) in samples {
                            by_hops.entry(h).or_default().push(d);
                        }
                        for (h, ds) in by_hops {
                            let config = format!("{} x={x} y={y}", g.label());
                            rows.extend(row(config, format!("alloc_delay_s hops={h}"), &ds));
                        }
                    }
                }
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).context("formatting sweep row")?;
    }
    if rows.is_empty() {
        w.write_record(["config", "metric", "median", "q1", "q3", "n"])
            .context("formatting sweep header")?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_out(a.out.as_deref(), &bytes)?;
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<(), Failure> {
    let t = load_topology(&a.source, &a.shape)?;
    let ocfg = OrchestratorConfig {
        control_bw: a.shape.control_bw,
        ..OrchestratorConfig::default()
    };
    let orch = Orchestrator::new(t, SimFabric::new(Default::default()), &ocfg).context("starting orchestrator")?;
    if a.corrupt_ledger {
        orch.with_topology_mut(|t| {
            let fog = t.nodes_of(NodeKind::FogDevice).next().map(|n| n.id.clone());
            match fog {
                Some(f) => t.charge_compute(&f, Default::default(), 1).map_err(anyhow::Error::from),
                None => Err(anyhow::anyhow!("--corrupt-ledger needs a fog-device")),
            }
        })?;
    }
    let cfg = FuzzConfig {
        ops: a.ops,
        seed: a.seed,
        ..FuzzConfig::default()
    };
    match audit::fuzz(&orch, &cfg) {
        Ok(report) => {
            println!("{}", serde_json::to_string(&report).context("formatting report")?);
            Ok(())
        }
        Err(cx) => {
            let dump = serde_json::to_string_pretty(&cx).context("formatting counterexample")?;
            match &a.out {
                Some(p) => fs::write(p, dump + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => eprintln!("{dump}"),
            }
            Err(Failure::Invariant(cx.to_string()))
        }
    }
}
