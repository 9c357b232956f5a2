use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use graspwise_core::config::ExperimentConfig;
use graspwise_core::dataset::{self, export_session_samples, gen_synthetic, Corpus};
use graspwise_core::eval::{
    compare_baselines, evaluate, render_table, sweep_intervention, EvalReport, Method, DEFAULT_RHO_GRID,
};
use graspwise_core::session::{read_log, replay};
use graspwise_server::{serve, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "graspwise", version, about = "Language-guided collision-free grasping simulator")]
struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenScenes(GenArgs),
    /// Evaluate one method on a corpus.
    RunEval(EvalArgs),
    /// Evaluate the description pipeline over a grid of intervention rates.
    SweepIntervention(SweepArgs),
    /// Evaluate every baseline and print one table.
    CompareBaselines(CompareArgs),
    /// Check every record of a corpus.
    Validate(ValidateArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Rebuild a session from its event log.
    Replay(ReplayArgs),
    /// Convert session logs into fine-tuning samples.
    ExportSamples(ExportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    /// Give every scene at least one stacked pair.
    #[arg(long)]
    stacked: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    End2end,
    Scenegraph,
    Scenetext,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Cutoffs for R@k and P@k.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "scenetext")]
    baseline: Baseline,
    /// Description error rate.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Fraction of wrong descriptions a human corrects.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Scene-graph edge flip rate.
    #[arg(long, default_value_t = 0.1)]
    flip: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.4)]
    eps: f64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RHO_GRID)]
    rho_grid: Vec<f64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "session-logs")]
    log_dir: PathBuf,
    /// fsync each event.
    #[arg(long)]
    durable: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long = "log", required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Invalid(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn rate(name: &str, v: f64) -> Result<(), Failure> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be in [0, 1], got {v}")))
    }
}

fn experiment(cli_config: &Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    match cli_config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_common(cfg: &mut ExperimentConfig, c: &Common) -> Result<(), Failure> {
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(k) = &c.k {
        if k.is_empty() || k.contains(&0) {
            return Err(usage("--k needs positive integers, e.g. 1,3,5,10"));
        }
        cfg.ks = k.clone();
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    dataset::load(path).map_err(|e| match e {
        dataset::DatasetError::Invalid(issues) => {
            let lines: Vec<String> = issues
                .iter()
                .map(|i| format!("  record {} ({}): {}", i.record, i.scene_id, i.message))
                .collect();
            Failure::Invalid(format!("{}: {} problem(s)\n{}", path.display(), issues.len(), lines.join("\n")))
        }
        other => Failure::Runtime(anyhow::Error::new(other)),
    })
}

fn emit(reports: &[EvalReport], out: Option<&Path>, single: bool) -> Result<(), Failure> {
    print!("{}", render_table(reports));
    if let Some(path) = out {
        let body = if single {
            serde_json::to_string_pretty(&reports[0])
        } else {
            serde_json::to_string_pretty(reports)
        }
        .context("serializing report")?;
        fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))?;
        log::info!("report written to {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = experiment(&cli.config)?;
    match cli.command {
        Command::GenScenes(a) => {
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            if let Some(v) = a.min_objects {
                cfg.generator.min_objects = v;
            }
            if let Some(v) = a.max_objects {
                cfg.generator.max_objects = v;
            }
            cfg.generator.require_stack |= a.stacked;
            cfg.generator.validate().map_err(|e| usage(e.to_string()))?;
            let corpus = gen_synthetic(a.n, cfg.seed, &cfg.generator).context("generating scenes")?;
            dataset::save(&corpus, &a.out).context("saving corpus")?;
            eprintln!("wrote {} scenes to {}", corpus.records.len(), a.out.display());
        }
        Command::RunEval(a) => {
            apply_common(&mut cfg, &a.common)?;
            rate("eps", a.eps)?;
            rate("rho", a.rho)?;
            rate("flip", a.flip)?;
            let method = match a.baseline {
                Baseline::End2end => Method::End2End,
                Baseline::Scenegraph => Method::SceneGraph { flip: a.flip },
                Baseline::Scenetext => Method::SceneText { eps: a.eps, rho: a.rho },
            };
            let corpus = load_corpus(&a.common.corpus)?;
            if corpus.records.is_empty() {
                return Err(Failure::Runtime(anyhow::anyhow!("corpus is empty; metrics are undefined")));
            }
            let report = evaluate(&corpus.scenes(), &method, &cfg.eval()).context("evaluation")?;
            emit(&[report], a.common.report.as_deref(), true)?;
        }
        Command::SweepIntervention(a) => {
            apply_common(&mut cfg, &a.common)?;
            rate("eps", a.eps)?;
            for &r in &a.rho_grid {
                rate("rho-grid", r)?;
            }
            let corpus = load_corpus(&a.common.corpus)?;
            let reports =
                sweep_intervention(&corpus.scenes(), a.eps, &a.rho_grid, &cfg.eval()).context("intervention sweep")?;
            emit(&reports, a.common.report.as_deref(), false)?;
        }
        Command::CompareBaselines(a) => {
            apply_common(&mut cfg, &a.common)?;
            let corpus = load_corpus(&a.common.corpus)?;
            let reports =
                compare_baselines(&corpus.scenes(), &cfg.baselines, &cfg.eval()).context("baseline comparison")?;
            emit(&reports, a.common.report.as_deref(), false)?;
        }
        Command::Validate(a) => {
            let corpus = load_corpus(&a.corpus)?;
            println!("{}: {} records, all valid", a.corpus.display(), corpus.records.len());
        }
        Command::Serve(a) => {
            let corpus = match &a.corpus {
                Some(p) => Some(Arc::new(load_corpus(p)?)),
                None => None,
            };
            let addr: SocketAddr = format!("{}:{}", a.host, a.port)
                .parse()
                .map_err(|_| usage(format!("bad host {:?}", a.host)))?;
            let config = ServerConfig {
                log_dir: a.log_dir,
                corpus,
                durable: a.durable,
            };
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(serve(addr, config)).context("server")?;
        }
        Command::Replay(a) => {
            let events = read_log(&a.log).context("reading log")?;
            let state = replay(&events).map_err(|e| Failure::Invalid(format!("{}: {e}", a.log.display())))?;
            println!("{}", serde_json::to_string_pretty(&state).context("serializing state")?);
        }
        Command::ExportSamples(a) => {
            let mut events = Vec::new();
            for p in &a.logs {
                events.extend(read_log(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let export = export_session_samples(&events);
            for w in &export.warnings {
                log::warn!("{w}");
            }
            let body = serde_json::to_string_pretty(&export.set).context("serializing samples")?;
            fs::write(&a.out, body + "\n").with_context(|| format!("writing {}", a.out.display()))?;
            eprintln!(
                "wrote {} samples ({} human-corrected) to {}",
                export.set.records.len(),
                export.set.count(graspwise_core::lang::Source::Human),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRASPWISE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invalid(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
