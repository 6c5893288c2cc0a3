//! Command-line driver: build latency tables, run searches, derive and
//! evaluate architectures, run ablation grids, and export metrics.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tfnas::data::{generate, DataSpec};
use tfnas::derive::{derive_architecture, export_arch, import_arch, train_from_scratch};
use tfnas::elastic::plan_for_arch;
use tfnas::error::{Error, Result};
use tfnas::harness::{
    export_metrics, run_ablation, write_ablation_csv, AblationAxis, AblationBase, AblationSpec,
    MetricsLog,
};
use tfnas::latmodel::{
    arch_latency, build_lut_measured, build_lut_synthetic, lut_load, lut_save, BenchSpec,
    CostModelSpec, LatWeighting,
};
use tfnas::optimizer::{
    restore_supernet, LatencyObjective, ObjectiveKind, Schedule, SearchFlags, SearchRun,
};
use tfnas::relax::{DepthMode, SecondPathMode};
use tfnas::space::SupernetConfig;

#[derive(Parser)]
#[command(
    name = "tfnas",
    about = "Latency-constrained differentiable architecture search over a toy supernet",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Latency lookup table operations
    Lut {
        #[command(subcommand)]
        cmd: LutCmd,
    },
    /// Run the architecture search
    Search(SearchArgs),
    /// Run elasticity-scaling standalone on an exported architecture
    Plan {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long = "target-ms")]
        target_ms: f64,
    },
    /// Derive the architecture from a saved run state
    Derive {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a derived architecture from scratch on the synthetic task
    Train {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long = "data-spec")]
        data_spec: PathBuf,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Report LUT latency, analytic cost, and parameter count of an arch
    Eval {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        lut: PathBuf,
    },
    /// Run an ablation grid and write one CSV row per (value, seed)
    Ablate(AblateArgs),
    /// Metrics file operations
    Metrics {
        #[command(subcommand)]
        cmd: MetricsCmd,
    },
}

#[derive(Subcommand)]
enum LutCmd {
    /// Build a lookup table from the cost model or host timings
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "synthetic")]
        mode: String,
        /// Width grid stride; 0 selects max(1, C_in/8) per signature
        #[arg(long, default_value_t = 0)]
        stride: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Convert a run directory's metrics to CSV
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    lut: PathBuf,
    #[arg(long, default_value = "ours")]
    objective: String,
    #[arg(long = "target-ms")]
    target_ms: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "second-path", default_value = "random")]
    second_path: String,
    #[arg(long = "depth-space", default_value = "sink")]
    depth_space: String,
    #[arg(long = "lat-weighting", default_value = "suffix")]
    lat_weighting: String,
    /// Disable per-epoch elasticity-scaling
    #[arg(long = "no-elastic", default_value_t = false)]
    no_elastic: bool,
    #[arg(long = "metrics-out")]
    metrics_out: Option<PathBuf>,
    #[arg(long = "arch-out")]
    arch_out: Option<PathBuf>,
    /// Directory for the run state (enables `derive` and `metrics export`)
    #[arg(long = "run-dir")]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    lut: PathBuf,
    #[arg(long, default_value = "ours")]
    objective: String,
    #[arg(long = "target-ms")]
    target_ms: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// From-scratch budget for the accuracy proxy
    #[arg(long = "eval-epochs", default_value_t = 30)]
    eval_epochs: usize,
}

fn parse_weighting(s: &str) -> Result<LatWeighting> {
    match s {
        "eq6" => Ok(LatWeighting::Eq6),
        "suffix" => Ok(LatWeighting::Suffix),
        other => Err(Error::InvalidArgument(format!(
            "unknown latency weighting `{other}` (expected eq6|suffix)"
        ))),
    }
}

fn build_objective(
    kind: &str,
    target_ms: Option<f64>,
    lambda1: f64,
    lambda2: Option<f64>,
) -> Result<LatencyObjective> {
    let kind = ObjectiveKind::parse(kind)?;
    let objective = LatencyObjective {
        kind,
        lambda1,
        lambda2: match (kind, lambda2) {
            (ObjectiveKind::C1, None) => Some(1.0),
            _ => lambda2,
        },
        target_ms,
    };
    objective.validate()?;
    Ok(objective)
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let config = SupernetConfig::load(&args.config)?;
    let lut = lut_load(&args.lut)?;
    let objective = build_objective(&args.objective, args.target_ms, args.lambda1, args.lambda2)?;
    let schedule = Schedule {
        epochs: args.epochs,
        warmup_epochs: args.warmup,
        ..Schedule::default()
    };
    let flags = SearchFlags {
        second_path: SecondPathMode::parse(&args.second_path)?,
        depth_mode: DepthMode::parse(&args.depth_space)?,
        weighting: parse_weighting(&args.lat_weighting)?,
        elastic: !args.no_elastic,
        data: None,
    };
    let mut run = SearchRun::new(&config, lut.clone(), objective, schedule, flags, args.seed)?;

    let result = run.run();
    // persist state even when the run aborted mid-way
    if let Some(dir) = &args.run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("state.json"),
            serde_json::to_string_pretty(&run.snapshot())?,
        )?;
        let mut metrics = run.metrics.clone();
        metrics.warmup_epochs = run.schedule.warmup_epochs;
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&metrics)?,
        )?;
        export_metrics(&metrics, &dir.join("metrics.csv"))?;
    }
    let (arch, mut metrics) = result?;
    metrics.warmup_epochs = run.schedule.warmup_epochs;

    if let Some(path) = &args.metrics_out {
        export_metrics(&metrics, path)?;
    }
    if let Some(path) = &args.arch_out {
        export_arch(&arch, path)?;
    }
    let latency = arch_latency(&arch, &lut)?;
    println!(
        "search finished: {} epochs, derived latency {:.4} ms{}",
        metrics.rows.len(),
        latency,
        match run.objective.target_ms {
            Some(t) => format!(" (target {t:.4} ms)"),
            None => String::new(),
        }
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = SupernetConfig::load(&args.config)?;
    let lut = lut_load(&args.lut)?;
    let objective = build_objective(&args.objective, args.target_ms, args.lambda1, args.lambda2)?;
    let spec = AblationSpec {
        axis: AblationAxis::parse(&args.axis)?,
        values: args.values,
        seeds: args.seeds,
        base: AblationBase {
            config,
            lut,
            objective,
            schedule: Schedule {
                epochs: args.epochs,
                warmup_epochs: args.warmup,
                ..Schedule::default()
            },
            flags: SearchFlags::default(),
            eval_epochs: args.eval_epochs,
        },
    };
    let rows = run_ablation(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join(format!("ablation-{}.csv", spec.axis.name()));
    write_ablation_csv(&rows, &csv)?;
    println!("wrote {} rows to {}", rows.len(), csv.display());
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Lut { cmd } => match cmd {
            LutCmd::Build {
                config,
                mode,
                stride,
                out,
            } => {
                let config = SupernetConfig::load(&config)?;
                let table = match mode.as_str() {
                    "synthetic" => build_lut_synthetic(&config, &CostModelSpec::default(), stride)?,
                    "measured" => build_lut_measured(&config, &BenchSpec::default(), stride)?,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown lut mode `{other}` (expected synthetic|measured)"
                        )))
                    }
                };
                lut_save(&table, &out)?;
                println!(
                    "wrote {} signatures (fixed cost {:.4} ms) to {}",
                    table.entries.len(),
                    table.fixed_cost_ms,
                    out.display()
                );
            }
        },
        Cmd::Search(args) => cmd_search(args)?,
        Cmd::Plan {
            arch,
            lut,
            target_ms,
        } => {
            let arch = import_arch(&arch)?;
            let table = lut_load(&lut)?;
            let (passes, scaled, infeasible) = plan_for_arch(&arch, target_ms, &table)?;
            let final_latency_ms = arch_latency(&scaled, &table)?;
            let out = serde_json::json!({
                "passes": passes,
                "infeasible": infeasible,
                "final_latency_ms": final_latency_ms,
                "scaled_arch": scaled,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::Derive { state, out } => {
            let text = std::fs::read_to_string(state.join("state.json"))?;
            let snap: tfnas::optimizer::SearchStateSnapshot = serde_json::from_str(&text)?;
            let (net, depth_mode) = restore_supernet(&snap)?;
            let arch = derive_architecture(&net, depth_mode, snap.epoch.saturating_sub(1));
            export_arch(&arch, &out)?;
            println!("wrote architecture to {}", out.display());
        }
        Cmd::Train {
            arch,
            data_spec,
            epochs,
            seed,
            report,
        } => {
            let arch = import_arch(&arch)?;
            let spec = DataSpec::load(&data_spec)?;
            let ds = generate(&spec)?;
            let eval = train_from_scratch(&arch, &ds, epochs, seed)?;
            let text = serde_json::to_string_pretty(&eval)?;
            if let Some(path) = report {
                std::fs::write(&path, &text)?;
            }
            println!("{text}");
        }
        Cmd::Eval { arch, lut } => {
            let arch = import_arch(&arch)?;
            let table = lut_load(&lut)?;
            let out = serde_json::json!({
                "latency_ms": arch_latency(&arch, &table)?,
                "analytic_cost": tfnas::derive::analytic_cost(&arch),
                "param_count": tfnas::derive::param_count(&arch),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::Ablate(args) => cmd_ablate(args)?,
        Cmd::Metrics { cmd } => match cmd {
            MetricsCmd::Export { run, out } => {
                let text = std::fs::read_to_string(run.join("metrics.json"))?;
                let log: MetricsLog = serde_json::from_str(&text)?;
                export_metrics(&log, &out)?;
                println!("wrote {} epochs to {}", log.rows.len(), out.display());
            }
        },
    }
    Ok(())
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
