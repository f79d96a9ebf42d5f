//! `pkm`: train memorization runs, benchmark top-k, cross-check against the
//! brute-force oracle, and export metrics.

mod bench;
mod export;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pkm::experiments::{self, ExperimentSpec, RESOLVED_CONFIG_FILE};
use pkm::PkmError;

#[derive(Parser)]
#[command(name = "pkm", version, about = "Product-key memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; falls back to `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per reinit noise level and summarize the trend.
    SweepSigma {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated σ_n values.
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a run directory's final checkpoint on its training data.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Count and time two-stage versus brute-force top-k.
    BenchTopk {
        /// Comma-separated |K| (perfect squares) or n1xn2 pairs.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Width of each half-query.
        #[arg(long, default_value_t = 32)]
        half_dim: usize,
        #[arg(long, default_value_t = 64)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the memory layer against the brute-force oracle.
    OracleCheck {
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the reproduction file on divergence.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Convert metrics.jsonl into CSV or per-metric series files.
    Export {
        /// Run directory (repeatable).
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long, value_enum)]
        format: Format,
        /// Destination directory; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Plotdata,
}

/// Exit statuses.
const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

impl From<PkmError> for Failure {
    fn from(e: PkmError) -> Self {
        Failure::new(EXIT_FAILURE, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    check_threads_env();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::SweepSigma {
            config,
            sigmas,
            seed,
            out,
        } => cmd_sweep_sigma(&config, &sigmas, seed, &out),
        Command::Eval { run } => cmd_eval(&run),
        Command::BenchTopk {
            sizes,
            k,
            repeats,
            half_dim,
            queries,
            seed,
            out,
        } => bench::run(&sizes, k, repeats, half_dim, queries, seed, out.as_deref()).map_err(Failure::from),
        Command::OracleCheck { trials, seed, out } => cmd_oracle_check(trials, seed, &out),
        Command::Export { run, format, out } => {
            let out = out.unwrap_or_else(|| run[0].clone());
            match format {
                Format::Csv => export::csv(&run, &out),
                Format::Plotdata => export::plotdata(&run, &out),
            }
            .map_err(Failure::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// `PKM_THREADS` caps the worker count. Execution is single-threaded, so
/// any valid value is accepted; a malformed one is reported.
fn check_threads_env() {
    if let Ok(v) = std::env::var("PKM_THREADS") {
        if v.parse::<usize>().map_or(true, |n| n == 0) {
            eprintln!("warning: ignoring PKM_THREADS={v:?}; expected a positive integer");
        }
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::new(EXIT_CONFIG, format!("config not found: {}", path.display())),
        _ => Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())),
    })?;
    ExperimentSpec::from_json(&text)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("invalid config {}: {e}", path.display())))
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut spec = load_spec(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = out
        .or_else(|| spec.out_dir.clone())
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "no output directory: pass --out or set out_dir"))?;
    spec.out_dir = Some(out.clone());
    let run = experiments::run_to_dir(&spec, &out).map_err(|e| match e {
        PkmError::NonFinite(_) => Failure::new(
            EXIT_RUNTIME,
            format!("{e}\ndiagnostic written to {}", out.join(experiments::DIAGNOSTIC_FILE).display()),
        ),
        PkmError::Config(_) => Failure::new(EXIT_CONFIG, e.to_string()),
        e => Failure::new(EXIT_RUNTIME, e.to_string()),
    })?;
    let f = &run.outcome.final_eval;
    println!(
        "epochs {} steps {} top1 {:.4} top5 {:.4} loss {:.4}{}",
        run.outcome.epochs_run,
        run.outcome.steps,
        f.top1,
        f.top5,
        f.loss,
        f.value_util.map(|u| format!(" value_util {u:.4}")).unwrap_or_default()
    );
    Ok(())
}

fn cmd_sweep_sigma(config: &Path, sigmas: &[f64], seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut base = load_spec(config)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    if base.model.memory().is_none() {
        return Err(Failure::new(EXIT_CONFIG, "sigma sweep needs a memory model"));
    }
    let mut rows = vec!["sigma_n,top1,top5,loss,value_util,replaced".to_string()];
    let mut top1 = Vec::new();
    for &sigma in sigmas {
        let mut spec = base.clone();
        let mut reinit = spec.reinit.take().unwrap_or_default();
        reinit.sigma_n = sigma;
        spec.reinit = Some(reinit);
        let dir = out.join(format!("sigma-{sigma}"));
        spec.out_dir = Some(dir.clone());
        let run = experiments::run_to_dir(&spec, &dir).map_err(|e| match e {
            PkmError::Config(_) => Failure::new(EXIT_CONFIG, e.to_string()),
            e => Failure::new(EXIT_RUNTIME, e.to_string()),
        })?;
        let f = &run.outcome.final_eval;
        let replaced: usize = run.outcome.reinits.iter().map(|r| r.total_replaced()).sum();
        rows.push(format!(
            "{sigma},{},{},{},{},{replaced}",
            f.top1,
            f.top5,
            f.loss,
            f.value_util.unwrap_or(f64::NAN)
        ));
        eprintln!("sigma_n {sigma}: top1 {:.4} loss {:.4}", f.top1, f.loss);
        top1.push((sigma, f.top1));
    }
    std::fs::write(out.join("sigma-sweep.csv"), rows.join("\n") + "\n").map_err(PkmError::from)?;
    top1.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = top1.windows(2).all(|w| w[1].1 >= w[0].1);
    println!(
        "top-1 is {} in sigma_n over {} runs",
        if monotone { "non-decreasing" } else { "not monotone" },
        top1.len()
    );
    Ok(())
}

fn cmd_eval(run: &Path) -> Result<(), Failure> {
    let spec = load_spec(&run.join(RESOLVED_CONFIG_FILE))?;
    let ckpt = experiments::load_checkpoint(&run.join(experiments::CHECKPOINT_FILE))?;
    let ds = pkm::data::RandomLabelDataset::generate(spec.dataset.n, spec.dataset.d, spec.dataset.m, spec.data_seed())?;
    let report = experiments::evaluate(&ckpt, &ds)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_oracle_check(trials: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let trial = pkm::oracle::random_trial(seed.wrapping_add(t as u64));
        match pkm::oracle::run_trial(&trial, 8, 1e-9) {
            Ok(o) => {
                checked += o.selections_checked;
                worst = worst.max(o.max_forward_diff);
            }
            Err(div) => {
                std::fs::create_dir_all(out).map_err(PkmError::from)?;
                let path = out.join(format!("oracle-repro-{}.json", trial.seed));
                let text = serde_json::to_string_pretty(&*div).expect("divergence serializes");
                std::fs::write(&path, text).map_err(PkmError::from)?;
                return Err(Failure::new(
                    EXIT_FAILURE,
                    format!("trial {t} diverged ({}); reproduction in {}", div.what, path.display()),
                ));
            }
        }
    }
    println!("{trials} trials, {checked} selections agree, max forward diff {worst:e}");
    Ok(())
}
