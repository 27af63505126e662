use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use festa::experiment::{
    build_report, preset, read_records, reference_cost_table, render_cost_table, run_plan,
    run_tcp_client, serve_tcp, ExperimentConfig, ExperimentError, OutputDir, Overrides, RecordSink,
    StrategyChoice, TransportKind,
};
use festa::transport::{
    closed_form_cost, CostModelInput, CostStrategy, REFERENCE_FEATURE_MILLIONS,
};
use festa::TaskKind;
use tracing::info;
use tracing_subscriber::EnvFilter;

/// Environment variable holding the log filter, e.g. `FESTA_LOG=debug`.
const LOG_ENV: &str = "FESTA_LOG";

#[derive(Parser)]
#[command(
    name = "festa",
    version,
    about = "Federated split multi-task training engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a configuration or preset sweep and write records.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Print the resolved configurations and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Aggregate records into mean ± std and cost tables.
    Report {
        /// Records file or output directory.
        path: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Closed-form communication cost per averaging period.
    Cost(CostArgs),
    /// Run the server side of one seed over TCP.
    Serve {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    /// Run one client of one seed over TCP.
    Client {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        id: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
}

#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// default, table5-ablation or bodycap-ablation.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    strategy: Option<StrategyChoice>,
    /// Client count for every active task.
    #[arg(long)]
    clients: Option<usize>,
    /// Comma-separated subset of classification, segmentation, detection.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<TaskKind>>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    k_avg: Option<u32>,
    #[arg(long)]
    no_avg: bool,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    transport: Option<TransportKind>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Body preset: toy, desk-4, desk-8, desk-12, small, medium, full.
    #[arg(long)]
    body: Option<String>,
}

impl ExperimentArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            strategy: self.strategy,
            clients: self.clients,
            tasks: self.tasks.clone(),
            rounds: self.rounds,
            k_avg: self.k_avg,
            no_avg: self.no_avg,
            seeds: self.seeds.clone(),
            transport: self.transport,
            output: self.output.clone(),
            body: self.body.clone(),
        }
    }

    /// Base file, then preset sweep, then flags.
    fn plan(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut plan = preset(self.preset.as_deref().unwrap_or("default"), &base)?;
        let ov = self.overrides();
        for (_, cfg) in &mut plan {
            ov.apply(cfg);
            cfg.validate()?;
        }
        Ok(plan)
    }

    fn single(&self) -> Result<(String, ExperimentConfig)> {
        let mut plan = self.plan()?;
        if plan.len() != 1 {
            return Err(ExperimentError::config(
                "preset",
                "serve and client take a single configuration",
            )
            .into());
        }
        Ok(plan.remove(0))
    }
}

#[derive(Args)]
struct CostArgs {
    /// Rounds per averaging period.
    #[arg(long, default_value_t = 100)]
    k: u32,
    /// Head parameters; with --pb and --pt replaces the reference inventory.
    #[arg(long)]
    ph: Option<f64>,
    #[arg(long)]
    pb: Option<f64>,
    #[arg(long)]
    pt: Option<f64>,
    /// Feature elements per round, both directions.
    #[arg(long)]
    f: Option<f64>,
    /// Gradient elements per round, both directions.
    #[arg(long)]
    g: Option<f64>,
}

fn cmd_run(exp: &ExperimentArgs, print_config: bool) -> Result<()> {
    let plan = exp.plan()?;
    if print_config {
        for (variant, cfg) in &plan {
            println!(
                "# variant {variant} (hash {})\n{}",
                cfg.hash(),
                cfg.to_toml()
            );
        }
        return Ok(());
    }
    let records = run_plan(&plan)?;
    print!("{}", build_report(&records)?.to_text());
    for dir in plan
        .iter()
        .map(|(_, c)| &c.output)
        .collect::<std::collections::BTreeSet<_>>()
    {
        info!(records = %OutputDir::new(dir)?.records().display(), "records written");
    }
    Ok(())
}

fn records_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("records.jsonl")
    } else {
        path.to_owned()
    }
}

fn cmd_report(path: &Path, csv: Option<&Path>) -> Result<()> {
    let records = read_records(&records_path(path))?;
    let report = build_report(&records)?;
    print!("{}", report.to_text());
    if let Some(out) = csv {
        std::fs::write(out, report.to_csv()?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    match (a.ph, a.pb, a.pt) {
        (None, None, None) => {
            if a.f.is_some() || a.g.is_some() {
                bail!(ExperimentError::config(
                    "cost",
                    "--f/--g need --ph, --pb and --pt"
                ));
            }
            print!("{}", render_cost_table(&reference_cost_table(a.k)?));
        }
        (Some(ph), Some(pb), Some(pt)) => {
            let input = CostModelInput {
                ph,
                pb,
                pt,
                f: a.f.unwrap_or(REFERENCE_FEATURE_MILLIONS),
                g: a.g.unwrap_or(REFERENCE_FEATURE_MILLIONS),
                k: a.k,
            };
            println!(
                "{:<20} {:>14} {:>12} {:>12}",
                "method", "feat+grad", "params", "total"
            );
            for s in CostStrategy::ALL {
                let c = closed_form_cost(s, &input)?;
                println!(
                    "{:<20} {:>14.3} {:>12.3} {:>12.3}",
                    s.label(),
                    c.feature_gradient,
                    c.parameters,
                    c.total()
                );
            }
        }
        _ => bail!(ExperimentError::config(
            "cost",
            "give all of --ph, --pb and --pt or none"
        )),
    }
    Ok(())
}

fn cmd_serve(exp: &ExperimentArgs, listen: &str, seed: u64, timeout: Duration) -> Result<()> {
    let (variant, cfg) = exp.single()?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let outcome = serve_tcp(&cfg, &variant, seed, listener, timeout)?;
    let dir = OutputDir::new(&cfg.output)?;
    let mut sink = RecordSink::open(&dir.records())?;
    let rec = dir.emit(&mut sink, &outcome)?;
    print!("{}", build_report(&[rec])?.to_text());
    Ok(())
}

fn cmd_client(
    exp: &ExperimentArgs,
    connect: &str,
    id: u16,
    seed: u64,
    timeout: Duration,
) -> Result<()> {
    let (_, cfg) = exp.single()?;
    run_tcp_client(&cfg, seed, id, connect, timeout)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ExperimentError>() {
        Some(e) if e.is_config() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { exp, print_config } => cmd_run(exp, *print_config),
        Command::Report { path, csv } => cmd_report(path, csv.as_deref()),
        Command::Cost(a) => cmd_cost(a),
        Command::Serve {
            exp,
            listen,
            seed,
            timeout_secs,
        } => cmd_serve(exp, listen, *seed, Duration::from_secs(*timeout_secs)),
        Command::Client {
            exp,
            connect,
            id,
            seed,
            timeout_secs,
        } => cmd_client(exp, connect, *id, *seed, Duration::from_secs(*timeout_secs)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
