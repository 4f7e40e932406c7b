use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::Context;
use clap::{Parser, Subcommand};
use macfair_core::config::EndpointConfig;
use macfair_core::pipeline::{self, PipelineError, StageOptions};
use macfair_core::RunConfig;

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_FATAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "macfair", version, about = "Prompt-instability and multi-agent conversation fairness studies")]
struct Cli {
    /// Run configuration (TOML)
    #[arg(long, global = true, default_value = "macfair.toml")]
    config: PathBuf,

    /// Override the top-level rng seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the base URL of every HTTP endpoint
    #[arg(long, global = true)]
    endpoint_url: Option<String>,

    /// Print grid sizes and request estimates, then stop
    #[arg(long, global = true)]
    dry_run: bool,

    /// Continue a previous run in the same output directory
    #[arg(long, global = true)]
    resume: bool,

    /// Significance level
    #[arg(long, global = true)]
    alpha: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load benchmark sources and write the sampled corpus
    Ingest,
    /// Query every (model, variant, run, question) cell and report score instability
    Instability,
    /// Run the two-agent conversation grid into the transcript store
    Conversations,
    /// Shift rates, contrasts and cross-benchmark table from the store
    Analyze,
    /// Rebuild all reports from persisted data
    Report,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(alpha) = cli.alpha {
        cfg.alpha = alpha;
    }
    if let Some(url) = &cli.endpoint_url {
        for e in &mut cfg.endpoints {
            if let EndpointConfig::Http(ep) = e {
                ep.base_url = url.clone();
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_grid(cfg: &RunConfig) {
    let c = &cfg.conversations;
    let profiles = c.identity_profiles().len();
    println!(
        "conversation grid per question: {profiles} identity profiles x {} reveal conditions x {} runs, {} rounds",
        c.reveals.len(),
        c.runs,
        c.rounds
    );
    println!(
        "instability grid per question: {} variants x {} runs, {} endpoints",
        cfg.instability.selected_variants().len(),
        cfg.instability.runs,
        cfg.endpoints.len()
    );
}

async fn run(cli: &Cli, cfg: &RunConfig) -> Result<u8, PipelineError> {
    let opts = StageOptions { dry_run: cli.dry_run, resume: cli.resume, ..StageOptions::default() };
    let stop = opts.stop.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupt: finishing in-flight work, then checkpointing");
            stop.store(true, Ordering::SeqCst);
        }
    });
    println!("config digest {}", cfg.digest());
    match cli.command {
        Command::Ingest => {
            if cli.dry_run {
                println!("{} sources would be ingested", cfg.corpus.sources.len());
                return Ok(0);
            }
            let s = pipeline::cmd_ingest(cfg)?;
            for (b, i) in &s.benchmarks {
                println!("{b}: pool {} sampled {} rejected {} ({} subcategories)", i.pool, i.sampled, i.rejected, i.per_subcategory.len());
            }
            Ok(0)
        }
        Command::Instability => {
            print_grid(cfg);
            let backends = pipeline::build_backends(cfg)?;
            let s = pipeline::cmd_instability(cfg, &backends, &opts).await?;
            println!(
                "requests planned {} (already done {}), answered {}, failed {}",
                s.planned_requests, s.skipped_existing, s.answered, s.failed
            );
            if let Some(r) = &s.report {
                print!("{}", pipeline::instability_text(r));
            }
            let partial = s.parse_success_rate() < 1.0 - cfg.conversations.failure_threshold;
            Ok(if partial || s.interrupted { EXIT_PARTIAL } else { 0 })
        }
        Command::Conversations => {
            print_grid(cfg);
            let backends = pipeline::build_backends(cfg)?;
            let s = pipeline::cmd_conversations(cfg, &backends, &opts).await?;
            println!(
                "conversations planned {}, estimated requests {}, already complete {}, completed {}, failed {}, rows written {}",
                s.planned, s.estimated_requests, s.already_complete, s.completed, s.failed, s.rows_written
            );
            if let Some(d) = &s.store_digest {
                println!("store digest {d}");
            }
            for f in &s.flagged {
                println!("flagged condition (failures above threshold): {f}");
            }
            Ok(if s.flagged.is_empty() && !s.interrupted { 0 } else { EXIT_PARTIAL })
        }
        Command::Analyze => {
            let s = pipeline::cmd_analyze(cfg)?;
            print!("{}", pipeline::analysis_text(&s, cfg.alpha));
            Ok(0)
        }
        Command::Report => {
            print!("{}", pipeline::cmd_report(cfg)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli).with_context(|| format!("loading {}", cli.config.display())) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_FATAL);
        }
    };
    match runtime.block_on(run(&cli, &cfg)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_FATAL })
        }
    }
}
