use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use remo::commands::{cmd_attack, cmd_bench, cmd_demo, cmd_invariance, cmd_privacy, provider_for, CommandReport};
use remo::config::{load_config, RunConfig};
use remo::protocol::serve;

/// Masked outsourcing of transformer projections: experiments and a provider server.
#[derive(Parser)]
#[command(name = "remo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for report.csv, report.json and meta.json.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set vocab=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Set up and generate once, comparing against the unprotected model.
    Demo {
        #[command(flatten)]
        common: Common,
        /// `inproc` or `tcp:HOST:PORT`.
        #[arg(long)]
        transport: Option<String>,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Partitioned vs reference generation over many prompts.
    Invariance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Token inference attack on unmasked and masked inputs.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: Option<usize>,
        /// `uniform` or `zipf:S`.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// Distinguishing game, TV cross-checks and weight non-identifiability.
    Privacy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Latency with concurrent clients over TCP.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated client counts.
        #[arg(long)]
        clients: Option<String>,
        /// `tcp:HOST:PORT` of a running provider; a loopback one otherwise.
        #[arg(long)]
        transport: Option<String>,
    },
    /// Run a weight provider until interrupted.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen address.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn build_config(common: &Common, overrides: &[(&str, Option<String>)]) -> remo::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    let sets = common.set.iter().map(|kv| match kv.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(remo::Error::BadConfig(format!("--set expects KEY=VALUE, got {kv:?}"))),
    });
    for kv in sets {
        let (k, v) = kv?;
        cfg.set(&k, &v).map_err(|m| remo::Error::BadConfig(format!("--set {k}: {m}")))?;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, v).map_err(|m| remo::Error::BadConfig(format!("--{}: {m}", k.replace('_', "-"))))?;
        }
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run_serve(cfg: &RunConfig) -> remo::Result<()> {
    let server = serve(&cfg.bind, provider_for(cfg)?)?;
    println!("provider listening on {}", server.addr());
    let flag = server.shutdown_flag();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| remo::Error::Unexpected(format!("signal handler: {e}")))?;
    let transcripts = server.wait();
    let requests: usize = transcripts.iter().map(|t| t.len()).sum();
    println!("stopped after {} connections, {requests} logged messages", transcripts.len());
    Ok(())
}

fn finish(name: &str, cfg: &RunConfig, started: Instant, report: remo::Result<CommandReport>) -> ExitCode {
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            eprintln!("remo {name}: {e}");
            return ExitCode::from(2);
        }
    };
    for line in &report.summary {
        println!("{line}");
    }
    let dir = cfg.out_dir.join(name);
    if let Err(e) = report.write(&dir, cfg, started.elapsed()) {
        eprintln!("remo {name}: writing reports to {}: {e}", dir.display());
        return ExitCode::from(2);
    }
    println!("{}: {} (reports in {})", name, if report.pass { "PASS" } else { "FAIL" }, dir.display());
    if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let (name, common, overrides): (&str, &Common, Vec<(&str, Option<String>)>) = match &cli.command {
        Command::Demo { common, transport, max_new } => {
            ("demo", common, vec![("transport", transport.clone()), ("max_new", s(max_new))])
        }
        Command::Invariance { common, prompts, max_new } => {
            ("invariance", common, vec![("prompts", s(prompts)), ("max_new", s(max_new))])
        }
        Command::Attack { common, prompts, corpus } => {
            ("attack", common, vec![("attack_prompts", s(prompts)), ("corpus", corpus.clone())])
        }
        Command::Privacy { common, trials, lambda } => ("privacy", common, vec![("trials", s(trials)), ("lambda", s(lambda))]),
        Command::Bench { common, clients, transport } => {
            ("bench", common, vec![("bench_clients", clients.clone()), ("transport", transport.clone())])
        }
        Command::Serve { common, bind } => ("serve", common, vec![("bind", bind.clone())]),
    };
    let cfg = match build_config(common, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("remo {name}: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match name {
        "demo" => cmd_demo(&cfg),
        "invariance" => cmd_invariance(&cfg),
        "attack" => cmd_attack(&cfg),
        "privacy" => cmd_privacy(&cfg),
        "bench" => cmd_bench(&cfg),
        _ => {
            return match run_serve(&cfg) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("remo serve: {e}");
                    ExitCode::from(2)
                }
            }
        }
    };
    finish(name, &cfg, started, report)
}
