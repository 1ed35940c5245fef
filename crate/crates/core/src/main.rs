// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use itzal::config::Config;
use itzal::system::Running;
use itzal::workload::gen_workload;

#[derive(Parser)]
#[command(name = "itzal", version, about = "Shadow proxy that finds and validates null-dereference patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the application, proxy and reporting servers.
    Run { config: PathBuf },
    /// Load and validate a configuration without starting anything.
    CheckConfig { config: PathBuf },
    /// Generate a seeded workload; print it, or send it to `--target`.
    Workload {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        fail_fraction: f64,
        /// Base URL, e.g. http://127.0.0.1:8080
        #[arg(long)]
        target: Option<String>,
    },
    /// Run the sample end to end on free ports and print the report.
    Demo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        fail_fraction: f64,
        /// Where reports and approved diffs are written.
        #[arg(long, default_value = "itzal-demo-out")]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    match cli.command {
        Command::Run { config } => {
            let config = Config::load(&config)?;
            rt.block_on(run(config))
        }
        Command::CheckConfig { config } => {
            let config = Config::load(&config)?;
            let r = config.resolve()?;
            println!(
                "ok: {} handler(s), {} route(s), {} seeded key(s)",
                r.program.handlers.len(),
                r.routes.routes.len(),
                r.seed.len()
            );
            Ok(())
        }
        Command::Workload { seed, n, fail_fraction, target } => {
            let requests = gen_workload(seed, n, fail_fraction);
            match target {
                None => {
                    for r in &requests {
                        println!("{}", serde_json::to_string(r)?);
                    }
                    Ok(())
                }
                Some(t) => rt.block_on(send(&t, &requests)),
            }
        }
        Command::Demo { seed, n, fail_fraction, out } => rt.block_on(demo(seed, n, fail_fraction, out)),
    }
}

async fn run(config: Config) -> anyhow::Result<()> {
    let running = Running::start(&config).await?;
    println!("app        {}", running.app_url());
    println!("proxy      {}", running.proxy_url());
    println!("reporting  {}", running.reporting_url());
    tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
    tracing::info!("shutting down");
    running.shutdown();
    Ok(())
}

async fn send(target: &str, requests: &[itzal::message::Request]) -> anyhow::Result<()> {
    let client = reqwest::Client::new();
    let base = target.trim_end_matches('/');
    let mut by_status = std::collections::BTreeMap::<u16, usize>::new();
    for r in requests {
        let resp = client
            .get(format!("{base}{}", r.target()))
            .send()
            .await
            .with_context(|| format!("sending to {base}"))?;
        *by_status.entry(resp.status().as_u16()).or_default() += 1;
    }
    for (status, count) in by_status {
        println!("{status}\t{count}");
    }
    Ok(())
}

async fn demo(seed: u64, n: usize, fail_fraction: f64, out: PathBuf) -> anyhow::Result<()> {
    let mut config = Config::default();
    let any: std::net::SocketAddr = "127.0.0.1:0".parse()?;
    config.app.listen = any;
    config.shadower.listen = any;
    config.reporting.listen = any;
    config.reporting.output_dir = out;
    let running = Running::start(&config).await?;
    println!("reporting API at {}", running.reporting_url());
    send(&running.proxy_url(), &gen_workload(seed, n, fail_fraction)).await?;
    let system = running.system.clone();
    tokio::task::spawn_blocking(move || system.wait_idle(Duration::from_secs(60))).await?;
    let report = running.system.reporting.patches();
    println!("{:<5} {:<17} {:<12} {:>6} {:>6}  kind", "rank", "id", "state", "line", "execs");
    for v in &report {
        println!(
            "{:<5} {:<17} {:<12} {:>6} {:>6}  {:?}",
            v.rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into()),
            v.id.to_string(),
            format!("{:?}", v.state),
            v.patched_line_executions,
            v.executions,
            v.kind
        );
    }
    if let Some(top) = report.iter().find(|v| v.rank == Some(1)) {
        println!("\ntop-ranked patch {}:\n{}", top.id, top.diff);
    }
    running.shutdown();
    Ok(())
}
