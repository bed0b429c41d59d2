//! Command-line front end: `train` runs a job (threads on loopback, one OS
//! process per rank on tcp), `simulate` and `sweep-threshold` drive the
//! timing model, and the hidden `worker` subcommand is what `train` spawns
//! for each tcp rank.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ringtrain::harness::{
    parse_log, render_csv, run_process_rank, run_training, RunConfig, Scheduling, Transport,
};
use ringtrain::sched::TraceEvent;
use ringtrain::sim::{
    fastest, scalability_curve, simulate_iteration, threshold_sweep, SimFileConfig,
};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

/// Carries the fully merged run configuration from the `train` parent to
/// its spawned `worker` processes.
const WORKER_CONFIG_ENV: &str = "RINGTRAIN_WORKER_CONFIG_TOML";

const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ringtrain",
    version,
    about = "Data-parallel SGD training over a deterministic ring allreduce"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the synthetic dataset and report accuracy and throughput.
    Train(TrainArgs),
    /// Predict iteration time and weak-scaling efficiency for a hardware
    /// profile.
    Simulate(SimulateArgs),
    /// Time the same profile under several bucketing thresholds and name
    /// the fastest.
    SweepThreshold(SweepArgs),
    /// One rank of a multi-process tcp run. Spawned by `train`.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key-value run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    world_size: Option<usize>,
    #[arg(long, value_enum)]
    transport: Option<Transport>,
    /// host:port every rank meets at (tcp transport).
    #[arg(long)]
    rendezvous: Option<String>,
    /// Gradient bucket threshold in bytes.
    #[arg(long)]
    bucket_bytes: Option<u64>,
    /// Quantize gradient payloads to fp16 on the wire.
    #[arg(long)]
    fp16_comm: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scheduling: Option<Scheduling>,
    /// Write the run log here.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write per-iteration metrics here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write rank 0's schedule trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl TrainArgs {
    fn merged_config(&self) -> Result<RunConfig> {
        let text = fs::read_to_string(&self.config)
            .with_context(|| format!("read {}", self.config.display()))?;
        let mut cfg = RunConfig::from_toml(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", self.config.display()))?;
        if let Some(w) = self.world_size {
            cfg.world_size = w;
        }
        if let Some(t) = self.transport {
            cfg.transport = t;
        }
        if let Some(r) = &self.rendezvous {
            cfg.rendezvous = r.clone();
        }
        if let Some(b) = self.bucket_bytes {
            cfg.bucket_bytes = b;
        }
        if self.fp16_comm {
            cfg.fp16_comm = true;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scheduling {
            cfg.scheduling = s;
        }
        cfg.validate().map_err(|e| anyhow::anyhow!("config: {e}"))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Flat key-value simulator configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the scaling curve here.
    #[arg(long)]
    csv: PathBuf,
    /// Write the simulated single-iteration schedule here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Flat key-value simulator configuration.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated bucket thresholds in bytes; "inf" disables bucketing.
    #[arg(long, value_delimiter = ',', required = true)]
    thresholds: Vec<String>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::SweepThreshold(args) => cmd_sweep(args),
        Cmd::Worker(args) => cmd_worker(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).with_context(|| format!("write {}", path.display()))
}

fn trace_text(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(out, "{e}");
    }
    out
}

fn report_run(elapsed: f64, final_accuracy: Option<f64>, images_per_sec: f64, updates: u64) {
    println!("elapsed_seconds: {elapsed:.6}");
    match final_accuracy {
        Some(a) => println!("final_accuracy: {a}"),
        None => println!("final_accuracy: none"),
    }
    println!("images_per_sec: {images_per_sec:.1}");
    println!("updates: {updates}");
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let cfg = args.merged_config()?;
    match cfg.transport {
        Transport::Loopback => {
            let summary = run_training(&cfg)?;
            if let Some(p) = &args.log {
                write_file(p, &summary.log_text())?;
            }
            if let Some(p) = &args.csv {
                write_file(p, &render_csv(&summary.rows))?;
            }
            if let Some(p) = &args.trace {
                write_file(p, &trace_text(&summary.per_rank[0].trace))?;
            }
            report_run(
                summary.elapsed_seconds,
                summary.final_accuracy(),
                summary.images_per_sec,
                summary.updates,
            );
            if summary.diverged {
                println!("status: diverged");
                Ok(EXIT_DIVERGED)
            } else {
                Ok(0)
            }
        }
        Transport::Tcp => spawn_workers(&cfg, &args),
    }
}

/// Launches one `worker` process per rank and folds their exit codes.
/// Rank 0 binds the rendezvous listener, so the port must be a real one.
fn spawn_workers(cfg: &RunConfig, args: &TrainArgs) -> Result<u8> {
    if cfg.rendezvous.ends_with(":0") {
        bail!("process workers need a fixed rendezvous port, got {}", cfg.rendezvous);
    }
    let exe = std::env::current_exe().context("locate own executable")?;
    let toml = cfg.to_toml();
    let mut children = Vec::with_capacity(cfg.world_size);
    for rank in 0..cfg.world_size {
        let mut c = Command::new(&exe);
        c.arg("worker")
            .arg("--rank")
            .arg(rank.to_string())
            .env(WORKER_CONFIG_ENV, &toml);
        if rank == 0 {
            if let Some(p) = &args.log {
                c.arg("--log").arg(p);
            }
            if let Some(p) = &args.csv {
                c.arg("--csv").arg(p);
            }
            if let Some(p) = &args.trace {
                c.arg("--trace").arg(p);
            }
        }
        let child = c.spawn().with_context(|| format!("spawn rank {rank}"))?;
        children.push((rank, child));
    }
    let mut code = 0u8;
    for (rank, mut child) in children {
        let status = child.wait().with_context(|| format!("wait for rank {rank}"))?;
        match status.code() {
            Some(0) => {}
            Some(c) if c == EXIT_DIVERGED as i32 => {
                if code == 0 {
                    code = EXIT_DIVERGED;
                }
            }
            other => {
                eprintln!("rank {rank} exited with {other:?}");
                code = 1;
            }
        }
    }
    if code == EXIT_DIVERGED {
        println!("status: diverged");
    }
    Ok(code)
}

fn cmd_worker(args: WorkerArgs) -> Result<u8> {
    let toml = std::env::var(WORKER_CONFIG_ENV)
        .with_context(|| format!("worker needs {WORKER_CONFIG_ENV}"))?;
    let cfg = RunConfig::from_toml(&toml).map_err(|e| anyhow::anyhow!("worker config: {e}"))?;
    let out = run_process_rank(&cfg, args.rank)?;
    if args.rank == 0 {
        let text = {
            let mut t = out.log_lines.join("\n");
            t.push('\n');
            t
        };
        if let Some(p) = &args.log {
            write_file(p, &text)?;
        }
        if let Some(p) = &args.csv {
            write_file(p, &render_csv(&out.rows))?;
        }
        if let Some(p) = &args.trace {
            write_file(p, &trace_text(&out.result.trace))?;
        }
        let parsed = parse_log(&text).map_err(|e| anyhow::anyhow!("own log: {e}"))?;
        report_run(
            parsed.elapsed_seconds,
            out.result.evals.last().map(|e| e.accuracy),
            out.result.images as f64 / parsed.elapsed_seconds.max(1e-9),
            out.result.updates,
        );
        if out.diverged {
            println!("status: diverged");
        }
    }
    Ok(if out.diverged { EXIT_DIVERGED } else { 0 })
}

fn load_sim_config(path: &Path) -> Result<SimFileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    SimFileConfig::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let file = load_sim_config(&args.config)?;
    let cfg = file.to_sim_config().map_err(|e| anyhow::anyhow!("config: {e}"))?;
    let curve = scalability_curve(&cfg, &file.worlds);

    let mut csv = String::from("world,iteration_time_us,images_per_sec,efficiency\n");
    println!("{:>8} {:>20} {:>16} {:>12}", "world", "iteration_time_us", "images_per_sec", "efficiency");
    for point in &curve {
        let mut c = cfg.clone();
        c.world = point.world;
        let tl = simulate_iteration(&c);
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            point.world, tl.iteration_time_us, point.throughput_images_per_sec, point.efficiency
        );
        println!(
            "{:>8} {:>20.3} {:>16.1} {:>12.4}",
            point.world, tl.iteration_time_us, point.throughput_images_per_sec, point.efficiency
        );
    }
    write_file(&args.csv, &csv)?;

    if let Some(p) = &args.trace {
        write_file(p, &trace_text(&simulate_iteration(&cfg).events))?;
    }
    Ok(0)
}

fn parse_threshold(text: &str) -> Result<u64> {
    let t = text.trim();
    if t.eq_ignore_ascii_case("inf") {
        return Ok(u64::MAX);
    }
    t.parse::<u64>()
        .with_context(|| format!("threshold {t:?} is neither a byte count nor \"inf\""))
}

fn cmd_sweep(args: SweepArgs) -> Result<u8> {
    let file = load_sim_config(&args.config)?;
    let cfg = file.to_sim_config().map_err(|e| anyhow::anyhow!("config: {e}"))?;
    let thresholds: Vec<u64> = args
        .thresholds
        .iter()
        .map(|t| parse_threshold(t))
        .collect::<Result<_>>()?;
    let points = threshold_sweep(&cfg, &thresholds);
    println!("{:>20} {:>20}", "threshold_bytes", "iteration_time_us");
    for p in &points {
        let shown = if p.threshold_bytes == u64::MAX {
            "inf".to_string()
        } else {
            p.threshold_bytes.to_string()
        };
        println!("{shown:>20} {:>20.3}", p.iteration_time_us);
    }
    let best = fastest(&points);
    let shown = if best.threshold_bytes == u64::MAX {
        "inf".to_string()
    } else {
        best.threshold_bytes.to_string()
    };
    println!("fastest: {shown} ({:.3} us)", best.iteration_time_us);
    Ok(0)
}
