use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nbo_core::features::{read_events_file, write_events};
use nbo_core::loadgen::{run_bench, write_report, BenchConfig, Pcts};
use nbo_core::pipeline::{cmd_startup, Calibration, StartupPaths};
use nbo_core::synth::{generate_events, generate_models, DataConfig, ModelConfig};
use nbo_core::{read_snapshot, run_server, FeatureSpec, ServerConfig};

#[derive(Parser)]
#[command(name = "nbo", version, about = "Next-best-offer engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build features and LSTM states from a transaction history, calibrate
    /// the ensemble and write a snapshot.
    Startup(StartupArgs),
    /// Serve recommendations and feature updates from a snapshot.
    Serve(ServeArgs),
    /// Drive a running server with paced load and write a CSV report.
    Bench(BenchArgs),
    /// Write a seeded synthetic transaction CSV.
    GenData(GenDataArgs),
    /// Write seeded random LSTM and tree-ensemble model files.
    GenModel(GenModelArgs),
}

#[derive(Args)]
struct StartupArgs {
    #[arg(long)]
    transactions: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    lstm: PathBuf,
    #[arg(long)]
    gbdt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, default_value_t = 2)]
    partitions: usize,
    #[arg(long, default_value_t = 2)]
    inference_workers: usize,
    /// Micro-batch collection window; 0 disables batching.
    #[arg(long, default_value_t = 0)]
    batch_window_us: u64,
    #[arg(long, default_value_t = 64)]
    max_batch: usize,
    /// Pin each worker thread to its own core.
    #[arg(long)]
    pin_workers: bool,
    #[arg(long, default_value_t = 1000)]
    monitor_period_ms: u64,
    #[arg(long, default_value_t = 0.8)]
    monitor_threshold: f64,
    #[arg(long, default_value_t = 3)]
    monitor_consecutive: u32,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Total message rate in msg/s, or the first step of a ramp.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    /// Last step of a linear ramp starting at --rate.
    #[arg(long)]
    ramp: Option<f64>,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    /// Fraction of messages that are feature updates.
    #[arg(long, default_value_t = 0.8)]
    mix: f64,
    /// Seconds per step.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Seconds to wait for late responses after each step.
    #[arg(long, default_value_t = 2.0)]
    drain: f64,
    #[arg(long, default_value_t = 2)]
    update_connections: usize,
    #[arg(long, default_value_t = 4)]
    recommend_connections: usize,
    #[arg(long, default_value = "bench_report.csv")]
    report: PathBuf,
    /// Transaction CSV to draw events from; synthetic events otherwise.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    users: u64,
    #[arg(long, default_value_t = 100_000)]
    events: usize,
    #[arg(long, default_value_t = 2000)]
    products: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Feature spec to size the models from; overrides --input-dim and --features.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long, default_value_t = 50)]
    trees: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long)]
    out_lstm: PathBuf,
    #[arg(long)]
    out_gbdt: PathBuf,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn startup(a: StartupArgs) -> Result<()> {
    let report = cmd_startup(&StartupPaths {
        transactions: a.transactions,
        spec: a.spec,
        lstm: a.lstm,
        gbdt: a.gbdt,
        out: a.out.clone(),
    })?;
    println!("events: {}", report.n_events);
    println!("users: {}", report.n_users);
    match report.as_of {
        Some(ts) => println!("as_of: {ts}"),
        None => println!("as_of: none"),
    }
    println!("T0 feature build: {:.3} ms", ms(report.t0));
    println!("T2 model load, warm-up and calibration: {:.3} ms", ms(report.t2));
    let e = report.ensemble;
    match report.calibration {
        Calibration::Calibrated {
            holdout_users,
            positives,
            cutoff,
        } => println!(
            "calibration: {holdout_users} holdout users, {positives} positive, cutoff {cutoff}: w={} tau={} auc={:.4} fscore={:.4}",
            e.w,
            e.tau,
            e.auc.unwrap_or(f64::NAN),
            e.fscore.unwrap_or(f64::NAN)
        ),
        Calibration::Skipped(reason) => println!("calibration skipped ({reason}): w={} tau={}", e.w, e.tau),
    }
    println!("snapshot: {} ({} bytes)", a.out.display(), report.snapshot_bytes);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let snapshot = read_snapshot(&a.snapshot).with_context(|| format!("loading {}", a.snapshot.display()))?;
    let config = ServerConfig {
        listen: a.listen,
        partitions: a.partitions,
        inference_workers: a.inference_workers,
        batch_window_us: a.batch_window_us,
        max_batch: a.max_batch,
        pin_workers: a.pin_workers,
        monitor_period: Duration::from_millis(a.monitor_period_ms),
        monitor_threshold: a.monitor_threshold,
        monitor_consecutive: a.monitor_consecutive,
        ..ServerConfig::default()
    };
    config.validate()?;
    let (models, store) = snapshot.into_store(config.partitions);
    let users = store.len();
    let server = run_server(config, models, store)?;

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("installing signal handler")?;

    println!("listening on {} ({users} users)", server.addr());
    std::io::stdout().flush()?;
    let _ = rx.recv();

    let stats = server.stats();
    server.shutdown();
    println!(
        "stopped: {} recommends, {} updates ({} stale), {} batches, utilization {:.2}, scale_out {}",
        stats.recommends, stats.updates, stats.stale, stats.batches, stats.utilization, stats.scale_out
    );
    Ok(())
}

fn show(p: Pcts) -> String {
    match p {
        Some([a, b, c]) => format!("{a:.0}/{b:.0}/{c:.0}"),
        None => "-".into(),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let secs = |name: &str, v: f64| -> Result<Duration> {
        if !(v.is_finite() && v >= 0.0) {
            bail!("--{name} must be a non-negative number of seconds");
        }
        Ok(Duration::from_secs_f64(v))
    };
    let cfg = BenchConfig {
        addr: a.addr,
        rate: a.rate,
        ramp_to: a.ramp,
        steps: a.steps,
        mix: a.mix,
        duration: secs("duration", a.duration)?,
        update_connections: a.update_connections,
        recommend_connections: a.recommend_connections,
        drain: secs("drain", a.drain)?,
        seed: a.seed,
    };
    cfg.validate()?;
    let events = match &a.events {
        Some(path) => read_events_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => generate_events(&DataConfig {
            seed: a.seed,
            users: 1000,
            events: 100_000,
            products: 2000,
        })?,
    };
    if events.is_empty() {
        bail!("no events to send");
    }
    let rows = run_bench(&cfg, &events)?;
    let file = File::create(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    write_report(BufWriter::new(file), &rows)?;
    println!("step  target  rec/s  upd/s  rl p50/p90/p99 us  client p50/p90/p99 us  util  scale_out");
    for r in &rows {
        println!(
            "{:>4}  {:>6.0}  {:>5.1}  {:>5.1}  {:>17}  {:>21}  {:>4}  {}",
            r.step,
            r.target_rate,
            r.recommend_throughput,
            r.update_throughput,
            show(r.server_rl),
            show(r.client_rl),
            r.utilization.map_or("-".into(), |u| format!("{u:.2}")),
            r.scale_out.map_or("-".into(), |s| s.to_string())
        );
        if !r.reconciles() || r.rl_mismatch > 0 {
            log::warn!(
                "step {}: {} in flight, {} errors, {} rl mismatches",
                r.step,
                r.in_flight,
                r.errors,
                r.rl_mismatch
            );
        }
    }
    println!("report: {}", a.report.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let events = generate_events(&DataConfig {
        seed: a.seed,
        users: a.users,
        events: a.events,
        products: a.products,
    })?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    write_events(&mut w, &events)?;
    w.flush()?;
    println!("wrote {} events to {}", events.len(), a.out.display());
    Ok(())
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => Some(FeatureSpec::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };
    let (input_dim, features) = match &spec {
        Some(s) => (s.lstm_input_dim(), s.n_features()),
        None => match (a.input_dim, a.features) {
            (Some(d), Some(f)) => (d, f),
            _ => bail!("pass --spec, or both --input-dim and --features"),
        },
    };
    let cfg = ModelConfig {
        seed: a.seed,
        hidden: a.hidden,
        input_dim,
        trees: a.trees,
        depth: a.depth,
        features,
    };
    let (lstm, gbdt) = generate_models(&cfg, spec.as_ref())?;
    lstm.save(&a.out_lstm)?;
    gbdt.save(&a.out_gbdt)?;
    println!(
        "wrote LSTM {}x{} to {} and {} trees of depth {} to {}",
        input_dim,
        a.hidden,
        a.out_lstm.display(),
        a.trees,
        a.depth,
        a.out_gbdt.display()
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Startup(a) => startup(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
        Command::GenData(a) => gen_data(a),
        Command::GenModel(a) => gen_model(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
