use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ksstokes::diagnostics::{check_invariants, check_rate, fit_rate, DiagnosticsRecord, InvariantBudget};
use ksstokes::scenario::{self, read_csv, RunOptions, ScenarioConfig};

/// Keller-Segel-Stokes scenario runner and offline checker.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a named preset.
    Preset {
        /// bounded_regime, smalldata_rho, smalldata_m, balanced or homogeneous_oracle.
        name: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-check the invariants recorded in a CSV time series.
    Verify { csv: PathBuf },
    /// Fit exponential decay rates to CSV columns over a window.
    Rates {
        csv: PathBuf,
        /// Fit window as t0:t1.
        #[arg(long, value_parser = parse_window)]
        window: (f64, f64),
        /// Column to check against --reference; all decaying columns are
        /// reported either way.
        #[arg(long, default_value = "linf_m")]
        column: String,
        /// Reference rate; the fit must lie in [0.5, 1.2] times it.
        #[arg(long)]
        reference: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config override, e.g. --override model.alpha=0.5 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the diagnostics CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Checkpoint file written on early stop or failure.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Resume from a checkpoint.
    #[arg(long)]
    restart: Option<PathBuf>,
    /// Stop at the first sample at or after this time.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Print the expanded config and exit.
    #[arg(long)]
    print_config: bool,
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("window must look like t0:t1")?;
    let t0: f64 = a.trim().parse().map_err(|e| format!("bad t0: {e}"))?;
    let t1: f64 = b.trim().parse().map_err(|e| format!("bad t1: {e}"))?;
    if t0.partial_cmp(&t1) != Some(std::cmp::Ordering::Less) {
        return Err(format!("empty window {t0}:{t1}"));
    }
    Ok((t0, t1))
}

/// Exit status 2: the run could not be carried out.
struct Fatal(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal(e.into())
    }
}

fn execute(mut cfg: ScenarioConfig, args: &RunArgs) -> Result<bool, Fatal> {
    if let Some(p) = &args.csv {
        cfg.output.csv = Some(p.clone());
    }
    if let Some(p) = &args.checkpoint {
        cfg.output.checkpoint = Some(p.clone());
    }
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    let opts = RunOptions {
        resume_from: args.restart.clone(),
        stop_at: args.stop_at,
    };
    let summary = scenario::run_with(&cfg, &opts)?;
    println!("{summary}");
    Ok(summary.passed())
}

const RATE_COLUMNS: [&str; 7] = ["linf_rho", "linf_m", "linf_c", "linf_u", "l2_rho_dev", "l2_u", "G"];

fn column(records: &[DiagnosticsRecord], name: &str) -> anyhow::Result<Vec<(f64, f64)>> {
    let get = |r: &DiagnosticsRecord| -> Option<f64> {
        Some(match name {
            "linf_rho" => r.linf_rho,
            "linf_m" => r.linf_m,
            "linf_c" => r.linf_c,
            "linf_u" => r.linf_u,
            "l2_rho_dev" => r.l2_rho_dev,
            "l2_m_dev" => r.l2_m_dev,
            "l2_c_dev" => r.l2_c_dev,
            "l2_u" => r.l2_u,
            "l2_grad_c" => r.l2_grad_c,
            "l2_grad_u" => r.l2_grad_u,
            "Y" => r.y,
            "G" => r.g,
            _ => return None,
        })
    };
    records
        .iter()
        .map(|r| get(r).map(|v| (r.t, v)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| anyhow!("no rate column named {name:?}"))
}

fn rates(csv: &Path, window: (f64, f64), target: &str, reference: Option<f64>) -> Result<bool, Fatal> {
    let records = read_csv(csv).with_context(|| format!("reading {}", csv.display()))?;
    let mut names: Vec<&str> = RATE_COLUMNS.to_vec();
    if !names.contains(&target) {
        names.push(target);
    }
    for name in names {
        match fit_rate(&column(&records, name)?, window) {
            Ok(f) => println!(
                "{name:<12} rate {:>10.5}  r^2 {:.5}  samples {}",
                f.rate, f.r_squared, f.samples
            ),
            Err(e) => println!("{name:<12} no fit: {e}"),
        }
    }
    let Some(reference) = reference else {
        return Ok(true);
    };
    let fit = fit_rate(&column(&records, target)?, window)?;
    let c = check_rate(fit, reference);
    println!(
        "{} {target} rate {:.5} against band [{:.5}, {:.5}]",
        if c.passed { "pass" } else { "FAIL" },
        c.fit.rate,
        c.lower,
        c.upper
    );
    Ok(c.passed)
}

fn dispatch(cli: Cli) -> Result<bool, Fatal> {
    match cli.command {
        Command::Run { config, run } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = scenario::parse_config_with(&text, &run.overrides)?;
            execute(cfg, &run)
        }
        Command::Preset { name, run } => {
            let cfg = scenario::preset_config(&name, &run.overrides)?;
            execute(cfg, &run)
        }
        Command::Verify { csv } => {
            let records = read_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
            if records.len() < 2 {
                return Err(anyhow!("{} holds {} rows, need at least 2", csv.display(), records.len()).into());
            }
            let report = check_invariants(&records, &InvariantBudget::default());
            print!("{report}");
            println!("overall: {}", if report.passed() { "PASS" } else { "FAIL" });
            Ok(report.passed())
        }
        Command::Rates {
            csv,
            window,
            column,
            reference,
        } => rates(&csv, window, &column, reference),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Fatal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
