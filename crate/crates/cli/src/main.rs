use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use slora::spectral::{feature_space_delta, param_space_delta, write_report, ImportanceProfile};
use slora::sweep::{self, SweepConfig, UShapeReport};
use slora::{init_slice_adapter, read_matrix, SliceSpec};

#[derive(Parser, Debug)]
#[command(name = "slora", version, about = "Sliced-SVD adapters and forgetting sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run, summarize and analyze slice-start sweeps.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Build adapter checkpoints.
    #[command(subcommand)]
    Adapter(AdapterCmd),
    /// Spectral change between two weight matrices.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Subcommand, Debug)]
enum SweepCmd {
    /// Pretrain per seed and fine-tune every slice start.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Recompute summary.json and plots from results.csv.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Spectral analysis of the checkpoints of a finished sweep.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        /// Probe rows for the feature-space analysis (enables it).
        #[arg(long)]
        feature_probe: Option<usize>,
    },
    /// Print the built-in desk-scale config as JSON.
    DefaultConfig,
}

#[derive(Subcommand, Debug)]
enum AdapterCmd {
    /// Initialize an adapter from the window [start, start + rank).
    Init(AdapterInit),
}

#[derive(Args, Debug)]
struct AdapterInit {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    start: usize,
    #[arg(long)]
    rank: usize,
    /// Scale numerator; defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Per-component change of `after` in the singular basis of `before`.
    Delta {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// CSV report; a JSON summary is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Probe inputs (SMX1); switches to the feature-space change.
        #[arg(long)]
        x0: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Write the task pair a sweep config generates for one seed.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn print_report(rep: &UShapeReport) {
    println!("     s  forgetting (mean ± std)   acc_sum (mean ± std)   acc_new");
    for st in &rep.per_start {
        println!(
            "{:>6}  {:.4} ± {:.4}            {:.4} ± {:.4}          {:.4}",
            st.s, st.forgetting_mean, st.forgetting_std, st.acc_sum_mean, st.acc_sum_std, st.acc_new_mean
        );
    }
    println!(
        "interior minimum at s = {}, gap {:.4}; sign tests: {}/{} (p = {:.4}) vs s = {}, {}/{} (p = {:.4}) vs s = {}",
        rep.interior_min_s,
        rep.gap,
        rep.sign_test_low.wins,
        rep.sign_test_low.n,
        rep.sign_test_low.p_value,
        rep.sign_test_low.extreme,
        rep.sign_test_high.wins,
        rep.sign_test_high.n,
        rep.sign_test_high.p_value,
        rep.sign_test_high.extreme,
    );
    println!(
        "U-shape detected: {}; best accuracy sum at s = {}; new-task accuracy spread {:.4}",
        rep.detected, rep.best_acc_sum_s, rep.acc_new_spread
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sweep(SweepCmd::Run { config, out, jobs }) => {
            let cfg = SweepConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .context("no output directory: pass --out or set out_dir")?;
            let outcome = sweep::run_sweep(&cfg, &out, jobs)?;
            println!("wrote {} rows to {}", outcome.rows.len(), out.join("results.csv").display());
            if let Some(rep) = &outcome.report {
                print_report(rep);
            }
        }
        Command::Sweep(SweepCmd::Report { input }) => {
            let rows = sweep::read_results(&input)?;
            match sweep::write_report(&input, &rows)? {
                Some(rep) => print_report(&rep),
                None => println!("{} rows; too few starts or seeds for U-shape statistics", rows.len()),
            }
        }
        Command::Sweep(SweepCmd::Analyze { input, feature_probe }) => {
            let rows = sweep::analyze_checkpoints(&input, feature_probe)?;
            println!("analyzed {} (cell, layer, space) combinations into {}", rows.len(), input.join("analysis").display());
        }
        Command::Sweep(SweepCmd::DefaultConfig) => {
            println!("{}", serde_json::to_string_pretty(&SweepConfig::desk_scale())?);
        }
        Command::Adapter(AdapterCmd::Init(a)) => {
            let w = read_matrix(&a.weights)?;
            let spec = SliceSpec::with_alpha(a.start, a.rank, a.alpha.unwrap_or(a.rank as f64));
            let st = init_slice_adapter(&w, spec)?;
            st.save(&a.out)?;
            println!("wrote adapter [{}, {}) to {}", spec.start, spec.end(), a.out.display());
        }
        Command::Analyze(AnalyzeCmd::Delta { before, after, out, x0 }) => {
            let w0 = read_matrix(&before)?;
            let w_ft = read_matrix(&after)?;
            let delta = match x0 {
                Some(x0) => feature_space_delta(&read_matrix(&x0)?, &w0, &w_ft)?,
                None => param_space_delta(&w0, &w_ft)?,
            };
            let json = out.with_extension("json");
            let sum = write_report(&out, Some(&json), &delta, &ImportanceProfile::uniform(delta.k()))?;
            println!(
                "k = {}: diagonal sum {:.6e}, off-diagonal sum {:.6e}",
                sum.k, sum.diag_sum, sum.offdiag_sum
            );
        }
        Command::Data(DataCmd::Export { config, seed, out }) => {
            let cfg = SweepConfig::load(&config)?;
            let d = sweep::seed_data(&cfg, seed)?;
            d.prior_train.export(&out, "prior_train")?;
            d.prior_test.export(&out, "prior_test")?;
            d.new_train.export(&out, "new_train")?;
            d.new_test.export(&out, "new_test")?;
            println!("wrote seed {seed} datasets to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
