use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pbef::experiment::{write_json, CltRow, LlnRow};
use pbef::{
    emit_report, run_clt_check, run_estimation_study, run_lln_check, Error, ExperimentConfig,
    OutputFormat, Result, SamplePath,
};

#[derive(Parser, Debug)]
#[command(name = "pbef", version, about = "Prediction-based estimating functions for ergodic diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: configured directory, else ".").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Suite {
    Lln,
    Clt,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one stationary path and write it as CSV.
    Simulate {
        #[arg(long, default_value_t = 0)]
        entry: usize,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Estimate θ from a path CSV (or a freshly simulated path).
    Estimate {
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Asymptotic variance of the configured estimator at θ₀.
    Avar,
    /// Full replication study.
    Study,
    /// Law-of-large-numbers and CLT checks over the schedule.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <file> is required".into()))?;
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = Some(dir.clone());
    }
    if let Some(f) = cli.format {
        cfg.output.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        };
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    let dir = out_dir(&cfg)?;
    match &cli.command {
        Command::Simulate { entry, replication } => {
            let path = cfg.simulate_replication(*entry, *replication)?;
            let file = dir.join("path.csv");
            path.write_csv(create(&file)?)?;
            println!("wrote {} ({} observations)", file.display(), path.n() + 1);
            Ok(true)
        }
        Command::Estimate { path } => {
            let observed = match path {
                Some(p) => {
                    let f = fs::File::open(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    SamplePath::read_csv(f)?
                }
                None => cfg.simulate_replication(0, 0)?,
            };
            let est = cfg.estimate(&observed)?;
            let file = dir.join("estimate.json");
            write_json(&file, &est)?;
            println!(
                "theta_hat = {:?} converged = {} fallback = {} residual = {:e}",
                est.theta_hat.values(),
                est.converged,
                est.fallback_used,
                est.residual_norm
            );
            println!("wrote {}", file.display());
            Ok(true)
        }
        Command::Avar => {
            let report = cfg.predicted_avar()?;
            let file = match cfg.output.format {
                OutputFormat::Csv => {
                    let f = dir.join("avar.csv");
                    report.write_csv(create(&f)?)?;
                    f
                }
                OutputFormat::Json => {
                    let f = dir.join("avar.json");
                    write_json(&f, &report)?;
                    f
                }
            };
            println!("avar = {:?}", report.avar);
            println!("wrote {}", file.display());
            Ok(true)
        }
        Command::Study => {
            let report = run_estimation_study(&cfg)?;
            for s in &report.summaries {
                println!(
                    "entry {} n={} delta={} n*delta^3={:.3e} used={}/{} cov={:?} predicted={:?} coverage={:?}",
                    s.schedule_index,
                    s.n,
                    s.delta,
                    s.n_delta_cubed,
                    s.n_used,
                    s.replications,
                    s.covariance,
                    s.predicted,
                    s.coverage_oracle
                );
            }
            for f in emit_report(&report, &dir, cfg.output.format)? {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
        Command::Check { suite } => {
            let mut ok = true;
            if matches!(suite, Suite::Lln | Suite::All) {
                let rows = run_lln_check(&cfg)?;
                for r in &rows {
                    println!(
                        "lln entry {} target={:.6} mean={:.6} stderr={:.2e} {}",
                        r.schedule_index,
                        r.target,
                        r.mean,
                        r.stderr,
                        if r.pass { "PASS" } else { "FAIL" }
                    );
                    ok &= r.pass;
                }
                write_rows(&dir, "lln", cfg.output.format, &rows, lln_record)?;
            }
            if matches!(suite, Suite::Clt | Suite::All) {
                let g = cfg.predictor.function()?;
                let rows = run_clt_check(&cfg, &g)?;
                for r in &rows {
                    let verdict = match r.pass {
                        Some(true) => "PASS",
                        Some(false) => "FAIL",
                        None => "REGIME",
                    };
                    println!(
                        "clt entry {} predicted={:.6} empirical={:.6} ks={:.4} {}",
                        r.schedule_index, r.predicted_variance, r.empirical_variance, r.ks_distance, verdict
                    );
                    ok &= r.pass != Some(false);
                }
                write_rows(&dir, "clt", cfg.output.format, &rows, clt_record)?;
            }
            Ok(ok)
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

const LLN_HEADER: [&str; 11] = [
    "schedule_index", "n", "delta", "n_delta", "n_delta_cubed", "target", "mean", "stderr", "n_used", "n_failed", "pass",
];

fn lln_record(r: &LlnRow) -> Vec<String> {
    vec![
        r.schedule_index.to_string(),
        r.n.to_string(),
        num(r.delta),
        num(r.n_delta),
        num(r.n_delta_cubed),
        num(r.target),
        num(r.mean),
        num(r.stderr),
        r.n_used.to_string(),
        r.n_failed.to_string(),
        r.pass.to_string(),
    ]
}

const CLT_HEADER: [&str; 15] = [
    "schedule_index",
    "n",
    "delta",
    "n_delta",
    "n_delta_cubed",
    "regime_violation",
    "predicted_variance",
    "empirical_mean",
    "empirical_variance",
    "relative_error",
    "skewness",
    "excess_kurtosis",
    "ks_distance",
    "n_used",
    "pass",
];

fn clt_record(r: &CltRow) -> Vec<String> {
    vec![
        r.schedule_index.to_string(),
        r.n.to_string(),
        num(r.delta),
        num(r.n_delta),
        num(r.n_delta_cubed),
        r.regime_violation.to_string(),
        num(r.predicted_variance),
        num(r.empirical_mean),
        num(r.empirical_variance),
        num(r.relative_error),
        num(r.skewness),
        num(r.excess_kurtosis),
        num(r.ks_distance),
        r.n_used.to_string(),
        r.pass.map(|p| p.to_string()).unwrap_or_default(),
    ]
}

trait Header {
    fn header() -> &'static [&'static str];
}

impl Header for LlnRow {
    fn header() -> &'static [&'static str] {
        &LLN_HEADER
    }
}

impl Header for CltRow {
    fn header() -> &'static [&'static str] {
        &CLT_HEADER
    }
}

fn write_rows<T: Header + serde::Serialize>(
    dir: &Path,
    stem: &str,
    format: OutputFormat,
    rows: &[T],
    record: fn(&T) -> Vec<String>,
) -> Result<()> {
    let file = match format {
        OutputFormat::Csv => {
            let file = dir.join(format!("{stem}.csv"));
            let mut w = csv::Writer::from_writer(create(&file)?);
            w.write_record(T::header())?;
            for r in rows {
                w.write_record(record(r))?;
            }
            w.flush().map_err(|e| Error::Io {
                path: file.clone(),
                source: e,
            })?;
            file
        }
        OutputFormat::Json => {
            let file = dir.join(format!("{stem}.json"));
            write_json(&file, &rows)?;
            file
        }
    };
    println!("wrote {}", file.display());
    Ok(())
}
