use std::io::BufRead;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gwaudit_cli::{commands, exit_code, AuditReport, Overrides, RunConfig, EXIT_FAILURE};
use gwaudit_core::client::SystemClock;
use gwaudit_sim::{serve_http, MockGateway};

#[derive(Parser)]
#[command(
    name = "gwaudit",
    version,
    about = "Audit OpenAI-compatible LLM API gateways"
)]
struct Cli {
    /// Run configuration (TOML)
    #[arg(long, global = true, default_value = "gwaudit.toml")]
    config: PathBuf,
    /// Probe suite, overriding the config
    #[arg(long, global = true)]
    suite: Option<PathBuf>,
    /// Output directory, overriding the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repetitions per probe, overriding the config
    #[arg(long, global = true)]
    reps: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect probe responses (baseline gateway unless --gateway is given)
    Collect {
        #[arg(long)]
        gateway: Option<String>,
    },
    /// Train per-model classifiers and select elite probes
    Train {
        /// Train (or add) only this model's classifier
        #[arg(long)]
        model: Option<String>,
    },
    /// Probe, converse, bill and time every gateway, then report
    Audit,
    /// Run the 25-turn memory conversations only
    Converse,
    /// Reconcile billing from saved transcripts and ledgers
    Bill,
    /// Latency statistics of a record log
    Latency {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Serve a simulated gateway over HTTP until stdin closes
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 8)]
        threads: usize,
    },
    /// Rebuild the audit report from saved artifacts
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.apply(&Overrides {
        suite: cli.suite.clone(),
        out: cli.out.clone(),
        seed: cli.seed,
        reps: cli.reps,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn finish(report: &AuditReport) -> i32 {
    print!("{}", report.summary_text());
    exit_code(report.flags().next().is_some())
}

fn simulate(scenario: &PathBuf, addr: &str, threads: usize) -> Result<i32> {
    let gw = MockGateway::from_file(scenario, Arc::new(SystemClock::new()))?;
    let server = serve_http(Arc::new(gw), addr, threads)?;
    println!("serving {} on {}", scenario.display(), server.base_url());
    println!("close stdin (Ctrl-D) to stop");
    for line in std::io::stdin().lock().lines() {
        if line.is_err() {
            break;
        }
    }
    let stats = server.gateway().stats();
    server.shutdown()?;
    println!("served {} requests", stats.requests);
    Ok(0)
}

fn run(cli: Cli) -> Result<i32> {
    if let Command::Simulate {
        scenario,
        addr,
        threads,
    } = &cli.command
    {
        return simulate(scenario, addr, *threads);
    }
    let cfg = load_config(&cli).with_context(|| format!("config {}", cli.config.display()))?;
    match &cli.command {
        Command::Collect { gateway } => {
            for o in commands::cmd_collect(&cfg, gateway.as_deref())? {
                match (o.summary, o.error) {
                    (Some(s), _) => println!(
                        "{}: {} attempted, {} succeeded, {} failed, {} skipped",
                        o.gateway, s.attempted, s.succeeded, s.failed, s.skipped
                    ),
                    (None, e) => println!("{}: failed: {}", o.gateway, e.unwrap_or_default()),
                }
            }
            Ok(0)
        }
        Command::Train { model } => {
            println!("model\tthreshold\tprecision\trecall\tf1\telite");
            for r in commands::cmd_train(&cfg, model.as_deref())? {
                println!(
                    "{}\t{:.2}\t{:.3}\t{:.3}\t{:.3}\t{}",
                    r.model, r.threshold, r.precision, r.recall, r.f1, r.elite_probes
                );
            }
            Ok(0)
        }
        Command::Audit => Ok(finish(&commands::cmd_audit(&cfg)?)),
        Command::Report => Ok(finish(&commands::cmd_report(&cfg)?)),
        Command::Converse => {
            for m in commands::cmd_converse(&cfg)? {
                println!(
                    "{}/{}: T10 {} T24 {} T25 {} of {}, FC {}, CR {}",
                    m.gateway,
                    m.model,
                    m.t10,
                    m.t24,
                    m.t25,
                    m.runs_effective,
                    m.fc.map(|f| f.to_string()).unwrap_or_else(|| "n/a".into()),
                    m.cr.map(|c| format!("{c:.1}%"))
                        .unwrap_or_else(|| "n/a".into())
                );
            }
            Ok(0)
        }
        Command::Bill => {
            for (g, m, b) in commands::cmd_bill(&cfg)? {
                match b.gap_percent() {
                    Some(gap) => println!("{g}/{m}: gap {gap:+.1}%"),
                    None => println!("{g}/{m}: gap unavailable"),
                }
            }
            Ok(0)
        }
        Command::Latency { records } => {
            for ((g, m), rows) in commands::cmd_latency(&cfg, records.as_deref())? {
                for r in rows {
                    println!(
                        "{g}/{m}/{}: n {} mean {:.3}s CV {:.3}",
                        r.category, r.stats.n, r.stats.mean, r.stats.cv
                    );
                }
            }
            Ok(0)
        }
        Command::Simulate { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    };
    ExitCode::from(code as u8)
}
