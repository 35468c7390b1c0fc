use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use odtta_core::adapter::adapt;
use odtta_core::config::{ExperimentConfig, Prepared};
use odtta_core::harness::{evaluate, read_trace, run, write_trace, PolicyConfig, RunSettings, Summary};
use odtta_core::io;
use odtta_core::meter::Usage;
use odtta_core::nn::Model;
use odtta_core::pool::{CandidatePool, Provenance};
use odtta_core::stream::{generate, split_stream, CorruptionKind, DomainSpec};

#[derive(Parser)]
#[command(name = "odtta", version, about = "On-demand test-time adaptation over BN statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default experiment config as TOML.
    Config,
    /// Fit the source model on clean task data.
    FitSource {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build, inspect or query a candidate pool.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Write task samples to a file.
    Stream {
        #[command(subcommand)]
        command: StreamCommand,
    },
    /// Adapt a model on a sample file and write the adapted model.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        /// Adaptation settings are read from this config's `[adapt]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one policy over the configured stream.
    Run(RunArgs),
    /// Score a trace against the stream its config describes.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the summaries of one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PoolCommand {
    Build {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect {
        #[arg(long)]
        pool: PathBuf,
    },
    /// Rank candidates by distance to the feature of a probe sample file.
    Select {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
}

#[derive(Subcommand)]
enum StreamCommand {
    /// Sample one domain of the configured task.
    Dump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Kind::Identity)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        severity: u8,
        #[arg(long, default_value_t = 128)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    policy: Policy,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continual batch size.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Use this source model instead of fitting one.
    #[arg(long, requires = "pool")]
    model: Option<PathBuf>,
    /// Use this pool instead of building one.
    #[arg(long, requires = "model")]
    pool: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Source,
    Continual,
    Ondemand,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Identity,
    Gaussian,
    Brightness,
    Contrast,
    Occlusion,
    Permute,
}

impl From<Kind> for CorruptionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Identity => CorruptionKind::Identity,
            Kind::Gaussian => CorruptionKind::AdditiveGaussian,
            Kind::Brightness => CorruptionKind::Brightness,
            Kind::Contrast => CorruptionKind::Contrast,
            Kind::Occlusion => CorruptionKind::Occlusion,
            Kind::Permute => CorruptionKind::Permute,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    io::load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn load_pool(path: &Path) -> Result<CandidatePool> {
    io::load_pool(path).with_context(|| format!("reading pool {}", path.display()))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn provenance(p: &Provenance) -> String {
    match p {
        Provenance::SourceModel => "source".into(),
        Provenance::InitialCluster { cluster } => format!("cluster {cluster}"),
        Provenance::Progressive { adaptation } => format!("adaptation {adaptation}"),
    }
}

/// Task, model, pool and schedule for `cfg`, reusing saved files when given.
fn prepare(cfg: &ExperimentConfig, model: Option<&Path>, pool: Option<&Path>) -> Result<Prepared> {
    let (Some(model), Some(pool)) = (model, pool) else {
        return Ok(cfg.prepare()?);
    };
    let task = cfg.task_spec()?;
    let source = load_model(model)?;
    let pool = load_pool(pool)?;
    let (clean_accuracy, drops) = cfg.measure_drops(&task, &source)?;
    let schedule = cfg.build_schedule(&drops)?;
    Ok(Prepared { task, source, clean_accuracy, pool, schedule, drops })
}

fn run_policy(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.policy = match args.policy {
        Policy::Source => PolicyConfig::SourceOnly,
        Policy::Continual => PolicyConfig::Continual { batch: args.batch },
        Policy::Ondemand => PolicyConfig::OnDemand,
    };
    cfg.validate()?;
    let p = prepare(&cfg, args.model.as_deref(), args.pool.as_deref())?;
    let (obs, truth) = p.stream();
    let settings = RunSettings { policy: cfg.policy, ..cfg.settings() };
    let mut out = run(&p.source, &p.pool, &obs, &settings)?;
    let summary = evaluate(&mut out.records, &truth, &p.schedule)?;

    fs::create_dir_all(&args.out)?;
    let trace = fs::File::create(args.out.join("trace.csv"))?;
    write_trace(trace, &out.records)?;
    fs::write(args.out.join("summary.json"), json(&summary)?)?;
    fs::write(args.out.join("adaptations.json"), json(&out.adaptations)?)?;
    fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    print_summary(cfg.policy.name(), &summary);
    Ok(())
}

fn print_summary(name: &str, s: &Summary) {
    println!(
        "{name}: accuracy {:.4}, detected {}/{}, false {}, backward samples {}, compute proxy {}",
        s.accuracy,
        s.detected,
        s.shifts.len(),
        s.false_triggers,
        s.counters.backward_samples,
        s.compute_proxy
    );
}

fn report(runs: &[PathBuf]) -> Result<()> {
    println!(
        "{:<24} {:>8} {:>8} {:>6} {:>6} {:>8} {:>12} {:>12}",
        "run", "accuracy", "detected", "missed", "false", "latency", "backward", "proxy"
    );
    for dir in runs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: Summary = serde_json::from_str(&text)?;
        let latency = s.mean_latency.map_or("-".to_string(), |l| format!("{l:.1}"));
        println!(
            "{:<24} {:>8.4} {:>8} {:>6} {:>6} {:>8} {:>12} {:>12}",
            dir.display(),
            s.accuracy,
            s.detected,
            s.missed,
            s.false_triggers,
            latency,
            s.counters.backward_samples,
            s.compute_proxy
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Config => print!("{}", ExperimentConfig::default().to_toml()?),
        Command::FitSource { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, model, acc) = cfg.fit_source()?;
            io::save_model(&out, &model)?;
            println!("clean accuracy {acc:.4}, model written to {}", out.display());
        }
        Command::Pool { command: PoolCommand::Build { config, model, out } } => {
            let cfg = load_config(config.as_deref())?;
            let task = cfg.task_spec()?;
            let pool = cfg.build_pool(&task, &load_model(&model)?)?;
            io::save_pool(&out, &pool)?;
            println!("{} candidates written to {}", pool.len(), out.display());
        }
        Command::Pool { command: PoolCommand::Inspect { pool } } => {
            let pool = load_pool(&pool)?;
            println!("fingerprint {}", pool.fingerprint());
            println!("feature layer {}, capacity {:?}", pool.feature_layer(), pool.capacity());
            let reference = pool.candidates().first().map(|c| c.feature.clone());
            for c in pool.candidates() {
                let d = reference.as_ref().map_or(0.0, |r| r.distance(&c.feature));
                println!("{:>4}  {:<16} distance to first {d:.6}", c.id, provenance(&c.provenance));
            }
        }
        Command::Pool { command: PoolCommand::Select { pool, model, probe, batch } } => {
            let pool = load_pool(&pool)?;
            let model = load_model(&model)?;
            let samples = io::sample_inputs_from_str(&io::read(&probe)?)?;
            let feature = pool.estimate_feature(&model, &samples, batch, &mut Usage::default())?;
            for (rank, (c, d)) in pool.ranked(&feature).into_iter().enumerate() {
                let mark = if rank == 0 { "*" } else { " " };
                println!("{mark} {:>4}  {:<16} distance {d:.6}", c.id, provenance(&c.provenance));
            }
        }
        Command::Stream { command: StreamCommand::Dump { config, kind, severity, count, seed, out } } => {
            let cfg = load_config(config.as_deref())?;
            let domain = DomainSpec::new(1, kind.into(), severity)?;
            let samples = cfg.task_spec()?.sample(&domain, count, seed);
            io::save_samples(&out, &samples)?;
            println!("{count} samples of {} written to {}", domain.label(), out.display());
        }
        Command::Adapt { model, pool, samples, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let mut model = load_model(&model)?;
            let pool = load_pool(&pool)?;
            let samples = io::sample_inputs_from_str(&io::read(&samples)?)?;
            if samples.rows() != cfg.adapt.cache_size {
                bail!("adapt needs exactly {} samples, file has {}", cfg.adapt.cache_size, samples.rows());
            }
            let outcome = adapt(&mut model, &pool, &samples, &cfg.adapt)?;
            io::save_model(&out, &model)?;
            println!("{}", json(&outcome.report)?);
        }
        Command::Run(args) => run_policy(args)?,
        Command::Evaluate { config, trace, model, out } => {
            let cfg = load_config(config.as_deref())?;
            let task = cfg.task_spec()?;
            let source = match model {
                Some(m) => load_model(&m)?,
                None => cfg.fit_source()?.1,
            };
            let (_, drops) = cfg.measure_drops(&task, &source)?;
            let schedule = cfg.build_schedule(&drops)?;
            let (_, truth) = split_stream(generate(&task, &schedule).collect());
            let file = fs::File::open(&trace).with_context(|| format!("reading trace {}", trace.display()))?;
            let mut records = read_trace(file)?;
            let summary = evaluate(&mut records, &truth, &schedule)?;
            match out {
                Some(path) => fs::write(path, json(&summary)?)?,
                None => println!("{}", json(&summary)?),
            }
        }
        Command::Report { runs } => report(&runs)?,
    }
    Ok(())
}
