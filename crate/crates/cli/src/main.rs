use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use etlr_core::harness::{
    emit_report, gen_cox_gaussian_data, gen_example2_data, gen_example3_data,
    gen_linear_gaussian_data, kalman_oracle, matrix_to_rows, read_summary, read_trials_csv,
    run_trials, splitmix64, write_summary_json, write_trials_csv, ExampleTag, ExperimentConfig,
    ExperimentOutcome, LinearGaussianOracle, OracleFile, Summary, SUMMARY_FILE, TRIALS_FILE,
};
use etlr_core::{Dataset, Error, GaussianPrior};

#[derive(Parser)]
#[command(
    name = "etlr",
    version,
    about = "Ensemble flows and samplers for Bayesian logistic regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set as JSON.
    GenData {
        #[arg(long, value_enum)]
        example: ExampleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the trials of an experiment configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Report directory; overrides `output` in the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kalman–Bucy solution of a linear-Gaussian problem.
    Oracle {
        #[arg(long = "linear-gaussian")]
        linear_gaussian: PathBuf,
    },
    /// Print the report stored in a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleArg {
    #[value(name = "example2-informative")]
    Example2Informative,
    #[value(name = "example2-weak")]
    Example2Weak,
    #[value(name = "example3")]
    Example3,
    #[value(name = "linear-gaussian")]
    LinearGaussian,
    #[value(name = "cox-gaussian")]
    CoxGaussian,
}

impl From<ExampleArg> for ExampleTag {
    fn from(e: ExampleArg) -> Self {
        match e {
            ExampleArg::Example2Informative => ExampleTag::Example2Informative,
            ExampleArg::Example2Weak => ExampleTag::Example2Weak,
            ExampleArg::Example3 => ExampleTag::Example3,
            ExampleArg::LinearGaussian => ExampleTag::LinearGaussian,
            ExampleArg::CoxGaussian => ExampleTag::CoxGaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Oracle input: the problem plus the pseudo-times to evaluate.
#[derive(serde::Deserialize)]
struct OracleRequest {
    #[serde(flatten)]
    problem: OracleFile,
    #[serde(default = "unit_time")]
    tau: Vec<f64>,
}

fn unit_time() -> Vec<f64> {
    vec![1.0]
}

fn vector(v: &[f64]) -> Value {
    json!(v)
}

fn dataset_json(data: &Dataset) -> Value {
    let points: Vec<Vec<f64>> = data
        .features()
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let labels: Vec<u8> = (0..data.len()).map(|i| data.label(i)).collect();
    json!({ "features": points, "labels": labels })
}

fn prior_json(prior: &GaussianPrior) -> Value {
    json!({
        "mean": vector(prior.mean().as_slice()),
        "covariance": matrix_to_rows(prior.covariance()),
    })
}

fn gen_data(example: ExampleTag, seed: u64, out: &Path) -> Result<(), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let body = match example {
        ExampleTag::Example2Informative | ExampleTag::Example2Weak => {
            let ex = gen_example2_data(&mut rng)?;
            let prior = if example == ExampleTag::Example2Informative {
                &ex.informative
            } else {
                &ex.weak
            };
            json!({
                "data": dataset_json(&ex.data),
                "theta_true": vector(ex.theta_true.as_slice()),
                "prior": prior_json(prior),
            })
        }
        ExampleTag::Example3 => {
            let ex = gen_example3_data(&mut rng)?;
            json!({
                "data": dataset_json(&ex.data),
                "theta_ref": vector(ex.theta_ref.as_slice()),
                "prior": prior_json(&ex.prior),
            })
        }
        ExampleTag::LinearGaussian => {
            let ex = gen_linear_gaussian_data(&mut rng)?;
            json!({
                "forward": matrix_to_rows(&ex.forward),
                "data": vector(ex.data.as_slice()),
                "noise": matrix_to_rows(&ex.noise),
                "theta_true": vector(ex.theta_true.as_slice()),
                "prior": prior_json(&ex.prior),
            })
        }
        ExampleTag::CoxGaussian => {
            let ex = gen_cox_gaussian_data()?;
            json!({
                "level": ex.level,
                "posterior_mean": vector(ex.posterior_mean()?.as_slice()),
                "prior": prior_json(&ex.prior),
            })
        }
    };
    let doc = json!({ "example": example.tag(), "seed": seed, "body": body });
    let mut f = io::BufWriter::new(File::create(out)?);
    serde_json::to_writer_pretty(&mut f, &doc)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn run(config: &Path, trials: Option<usize>, out: Option<PathBuf>) -> Result<(), Error> {
    let mut cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(File::open(config)?))?;
    if let Some(l) = trials {
        cfg.trials = l;
    }
    if out.is_some() {
        cfg.output = out;
    }
    let outcome = run_trials(&cfg)?;
    match &cfg.output {
        Some(dir) => {
            let paths = emit_report(&outcome, dir)?;
            eprintln!(
                "wrote {} and {}",
                paths.trials.display(),
                paths.summary.display()
            );
        }
        None => write_summary_json(&outcome, io::stdout().lock())?,
    }
    Ok(())
}

fn oracle(path: &Path) -> Result<(), Error> {
    let req: OracleRequest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let problem = LinearGaussianOracle::try_from(req.problem)?;
    let states = req
        .tau
        .iter()
        .map(|&tau| {
            let k = kalman_oracle(&problem, tau)?;
            Ok(json!({
                "tau": k.tau,
                "gain": matrix_to_rows(&k.gain),
                "mean": vector(k.mean.as_slice()),
                "covariance": matrix_to_rows(&k.covariance),
                "mean_spread_bound": k.mean_spread_bound,
            }))
        })
        .collect::<Result<Vec<Value>, Error>>()?;
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &states)?;
    stdout.write_all(b"\n")?;
    Ok(())
}

fn report(dir: &Path, format: FormatArg) -> Result<(), Error> {
    let stored = read_summary(BufReader::new(File::open(dir.join(SUMMARY_FILE))?))?;
    let reports = read_trials_csv(BufReader::new(File::open(dir.join(TRIALS_FILE))?))?;
    let summary = Summary::from_reports(&reports)?;
    let outcome = ExperimentOutcome {
        config: stored.config,
        reports,
        summary,
    };
    let stdout = io::stdout().lock();
    match format {
        FormatArg::Csv => write_trials_csv(&outcome, stdout),
        FormatArg::Json => write_summary_json(&outcome, stdout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData { example, seed, out } => gen_data(example.into(), seed, &out),
        Command::Run {
            config,
            trials,
            out,
        } => run(&config, trials, out),
        Command::Oracle { linear_gaussian } => oracle(&linear_gaussian),
        Command::Report { input, format } => report(&input, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
