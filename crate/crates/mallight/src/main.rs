//! Command-line front end: dataset generation, experiment runs, sweeps,
//! influence reports and metrics summaries.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mallight::harness::{
    generate_flow, generate_grid, influence_csv, influence_report, metrics_csv,
    parse_metrics_csv, run_experiment, summarize_metrics, sweep, sweep_csv, write_atomic,
    write_report, ExperimentConfig, FlowSpec, OdPolicy, SweepAxis,
};
use mallight::network::RoadNetwork;
use mallight::simulator::flow_to_text;

#[derive(Parser)]
#[command(
    name = "mallight",
    version,
    about = "Coordinated traffic-signal control lab with signal-malfunction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a uniform grid network file.
    GenGrid {
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        /// Block length between neighboring intersections, meters.
        #[arg(long, default_value_t = 300.0)]
        block: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a steady-rate random-OD flow file for a network.
    GenFlow {
        #[arg(long)]
        net: PathBuf,
        /// Vehicles per 300 seconds, network-wide.
        #[arg(long, default_value_t = 1200)]
        rate: u64,
        /// Total duration in seconds.
        #[arg(long, default_value_t = 7200)]
        duration: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Endpoint policy: all nodes or boundary nodes only.
        #[arg(long, default_value = "all")]
        od: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (when applicable) and evaluate a controller with and without
    /// the configured malfunction; writes metrics, curves, accident logs
    /// and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Extra key=value overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Single seed shorthand (overrides `seeds`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        controller: Option<String>,
        /// Comma-separated malfunctioning intersection ids.
        #[arg(long)]
        malfunction: Option<String>,
        /// Ablation switch: S, R or M.
        #[arg(long)]
        ablation: Option<String>,
        /// Feature layout: full or lanes-only.
        #[arg(long)]
        features: Option<String>,
        /// Resume training from checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the experiment across a parameter axis and emit a plot CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis: k or malfunction-count.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Mean diffusion influence per hop distance from a source node.
    Influence {
        #[arg(long)]
        net: PathBuf,
        /// Comma-separated malfunction ids; the lowest is the source.
        #[arg(long)]
        malfunction: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.15)]
        alpha: f64,
        /// Gaussian kernel width; derived from road distances if omitted.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge and summarize metrics CSV files; rows must share one config
    /// digest unless --allow-mixed is given.
    Report {
        files: Vec<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn parse_id_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .with_context(|| format!("bad id `{p}`"))
        })
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenGrid {
            rows,
            cols,
            block,
            out,
        } => {
            let net = generate_grid(rows, cols, block)?;
            write_atomic(&out, &net.to_text())?;
            println!(
                "wrote {} ({} intersections, {} directed segments)",
                out.display(),
                net.node_count(),
                net.edges().len()
            );
        }
        Command::GenFlow {
            net,
            rate,
            duration,
            seed,
            od,
            out,
        } => {
            let net = RoadNetwork::load(&net)
                .with_context(|| format!("loading network {}", net.display()))?;
            let od = match od.as_str() {
                "all" => OdPolicy::All,
                "boundary" => OdPolicy::Boundary,
                other => bail!("unknown od policy `{other}` (expected all|boundary)"),
            };
            let flow = generate_flow(
                &net,
                &FlowSpec {
                    rate_per_300s: rate,
                    duration_s: duration,
                    od,
                    seed,
                },
            )?;
            write_atomic(&out, &flow_to_text(&flow))?;
            println!("wrote {} ({} vehicles)", out.display(), flow.len());
        }
        Command::Run {
            config,
            overrides,
            seed,
            out,
            controller,
            malfunction,
            ablation,
            features,
            resume,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
                cfg.set(k, v)?;
            }
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(c) = controller {
                cfg.set("controller", &c)?;
            }
            if let Some(m) = malfunction {
                cfg.malfunction = parse_id_list(&m)?;
            }
            if let Some(a) = ablation {
                cfg.set("ablation", &a)?;
            }
            if let Some(f) = features {
                cfg.set("features", &f)?;
            }
            if resume {
                cfg.resume = true;
            }
            let report = run_experiment(&cfg)?;
            let files = write_report(&cfg, &report)?;
            let rows = parse_metrics_csv(&metrics_csv(&report))?;
            println!("{}", summarize_metrics(&rows, false)?);
            println!("config digest: {}", report.digest);
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            overrides,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
                cfg.set(k, v)?;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<u64> = values
                .split(',')
                .map(|v| v.trim().parse::<u64>().with_context(|| format!("bad value `{v}`")))
                .collect::<Result<_>>()?;
            let rows = sweep(&cfg, axis, &values)?;
            let csv = sweep_csv(axis, &rows);
            let path = cfg.out_dir.join("sweep.csv");
            write_atomic(&path, &csv)?;
            print!("{csv}");
            println!("wrote {}", path.display());
        }
        Command::Influence {
            net,
            malfunction,
            k,
            alpha,
            sigma,
            out,
        } => {
            let net = RoadNetwork::load(&net)?;
            let malfunction = malfunction
                .as_deref()
                .map(parse_id_list)
                .transpose()?
                .unwrap_or_default();
            let rows = influence_report(&net, &malfunction, k, alpha, sigma)?;
            let csv = influence_csv(&rows);
            match out {
                Some(path) => {
                    write_atomic(&path, &csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Report { files, allow_mixed } => {
            if files.is_empty() {
                bail!("no metrics files given");
            }
            let mut rows = Vec::new();
            for f in &files {
                let text = std::fs::read_to_string(f)
                    .with_context(|| format!("reading {}", f.display()))?;
                rows.extend(parse_metrics_csv(&text)?);
            }
            println!("{}", summarize_metrics(&rows, allow_mixed)?);
        }
    }
    Ok(())
}
