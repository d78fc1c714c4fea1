//! `clip` — clusterwise sign-flip score tests from the command line.
//!
//! Subcommands:
//! - `test`: run the sign-flip test (or a classical baseline) on a CSV
//!   dataset and emit a JSON report.
//! - `simulate`: Monte Carlo comparison of methods on a built-in scenario
//!   preset or a TOML config, emitting a tidy rates CSV.
//! - `inspect`: dump the clusterwise score matrix, the sign matrix, the
//!   flip-score matrix and its empirical row covariance as CSV for audit.
//!
//! Exit codes: 0 on success, 2 on validation/config errors, 3 on numerical
//! errors (singular nuisance cross-products, non-SPD weights, degenerate
//! fits). Worker count follows `RAYON_NUM_THREADS`.

mod manifest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use clip_core::combine::Combiner;
use clip_core::data::{Alternative, ClusteredDataset, HypothesisSpec};
use clip_core::error::Error;
use clip_core::ingest::{ingest_csv, CsvSchema, MissingPolicy};
use clip_core::report::{run_baseline_test, run_clip_test, ClipOptions, ClipRun};
use clip_core::sim::{run_monte_carlo, Method, MonteCarloOptions, ScenarioConfig};
use clip_core::weights::{
    diagonal_weights, identity_weights, random_intercept_weights, read_variances_csv,
    read_weights_csv, WorkingWeights,
};
use clip_core::baselines::BaselineMethod;

#[derive(Parser)]
#[command(name = "clip", version, about = "Sign-flip score tests for clustered data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test a fixed effect on a CSV dataset
    Test(TestArgs),
    /// Monte Carlo comparison on a simulated scenario
    Simulate(SimulateArgs),
    /// Dump score / sign / flip-score matrices for audit
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV with a header row
    #[arg(long)]
    data: PathBuf,
    /// Column holding the cluster identifier
    #[arg(long, default_value = "cluster")]
    cluster_col: String,
    /// Column holding the covariate under test
    #[arg(long, default_value = "x")]
    x_col: String,
    /// Response column (long and crossed layouts)
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Outcome label column (long multivariate layout)
    #[arg(long)]
    outcome_col: Option<String>,
    /// Comma-separated wide response columns, one per outcome
    #[arg(long, value_delimiter = ',')]
    outcome_cols: Vec<String>,
    /// Comma-separated nuisance covariate columns
    #[arg(long, value_delimiter = ',')]
    nuisance_cols: Vec<String>,
    /// Item column; triggers the crossed reshaping (items become outcomes)
    #[arg(long)]
    item_col: Option<String>,
    /// Missing-cell policy: drop the occasion or fail
    #[arg(long, default_value = "drop", value_parser = ["drop", "error"])]
    missing: String,
}

impl DataArgs {
    fn schema(&self) -> CsvSchema {
        let nuisance: Vec<&str> = self.nuisance_cols.iter().map(|s| s.as_str()).collect();
        let mut schema = CsvSchema::long(&self.cluster_col, &self.x_col, &self.y_col, &nuisance);
        if let Some(col) = &self.outcome_col {
            schema = schema.with_outcome_col(col);
        }
        if !self.outcome_cols.is_empty() {
            let cols: Vec<&str> = self.outcome_cols.iter().map(|s| s.as_str()).collect();
            schema = schema.with_outcome_cols(&cols);
        }
        if let Some(col) = &self.item_col {
            schema = schema.with_item_col(col);
        }
        if self.missing == "error" {
            schema = schema.with_missing_policy(MissingPolicy::Error);
        }
        schema
    }

    fn load(&self) -> Result<ClusteredDataset, Error> {
        let file = fs::File::open(&self.data)?;
        ingest_csv(std::io::BufReader::new(file), &self.schema())
    }
}

#[derive(Args)]
struct TestOptions {
    /// Null values, a single number broadcast to all outcomes or one per
    /// outcome, comma separated
    #[arg(long, default_value = "0", value_delimiter = ',')]
    beta0: Vec<f64>,
    /// Working weights: identity, ranint, diagonal=FILE, or file=FILE
    #[arg(long, default_value = "identity")]
    weights: String,
    /// Number of sign flips including the identity
    #[arg(long, default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "two-sided", value_parser = ["two-sided", "greater", "less"])]
    alternative: String,
    /// Combining function across outcomes
    #[arg(long, default_value = "maxT", value_parser = ["maxT", "sumabs"])]
    combine: String,
    /// Studentize scores before combining
    #[arg(long, default_value = "on", value_parser = ["on", "off"])]
    studentize: String,
    /// Enumerate all 2^N flips instead of sampling
    #[arg(long, default_value_t = false)]
    exhaustive: bool,
    /// Method: clip (default) or a classical baseline
    #[arg(long, default_value = "clip", value_parser = ["clip", "ols", "hc3", "cluster_sandwich"])]
    method: String,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    options: TestOptions,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario preset: u41 (univariate), m42 (multivariate), x43 (crossed)
    #[arg(long, value_parser = ["u41", "m42", "x43"], conflicts_with = "config")]
    scenario: Option<String>,
    /// TOML scenario config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Flips per sign-flip test
    #[arg(long, default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated methods to compare
    #[arg(long, value_delimiter = ',', default_value = "clip_identity")]
    methods: Vec<String>,
    /// Override the preset cluster count
    #[arg(long)]
    n_clusters: Option<usize>,
    /// Override the true effect (u41/x43 presets)
    #[arg(long)]
    beta: Option<f64>,
    /// Override the error scale (m42 preset)
    #[arg(long)]
    eps_sd: Option<f64>,
    /// Write the rates CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the run manifest JSON here
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    options: TestOptions,
    /// Directory for the CSV dumps
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn build_hypothesis(
    dataset: &ClusteredDataset,
    beta0: &[f64],
    alternative: &str,
) -> Result<HypothesisSpec, Error> {
    let m = dataset.n_outcomes();
    let beta0 = if beta0.len() == 1 {
        vec![beta0[0]; m]
    } else if beta0.len() == m {
        beta0.to_vec()
    } else {
        return Err(Error::InvalidConfig(format!(
            "--beta0 takes 1 or {m} values, got {}",
            beta0.len()
        )));
    };
    let alternative = Alternative::from_str(alternative)?;
    HypothesisSpec::global_null(dataset)
        .with_beta0(beta0)
        .map(|h| h.with_alternative(alternative))
}

fn build_weights(
    spec: &str,
    dataset: &ClusteredDataset,
    hypothesis: &HypothesisSpec,
) -> Result<WorkingWeights, Error> {
    match spec {
        "identity" => Ok(identity_weights(dataset)),
        "ranint" | "random_intercept" => random_intercept_weights(dataset, hypothesis),
        _ => {
            if let Some(path) = spec.strip_prefix("file=") {
                let file = fs::File::open(path)?;
                read_weights_csv(std::io::BufReader::new(file), dataset)
            } else if let Some(path) = spec.strip_prefix("diagonal=") {
                let file = fs::File::open(path)?;
                let variances = read_variances_csv(std::io::BufReader::new(file), dataset)?;
                diagonal_weights(dataset, &variances)
            } else if spec == "diagonal" {
                Err(Error::InvalidConfig(
                    "--weights diagonal needs a variance file: diagonal=FILE \
                     (columns cluster_id, occasion, variance)"
                        .into(),
                ))
            } else {
                Err(Error::InvalidConfig(format!(
                    "unknown --weights '{spec}' (expected identity, ranint, diagonal=FILE or file=FILE)"
                )))
            }
        }
    }
}

fn run_from_args(
    data: &DataArgs,
    options: &TestOptions,
) -> Result<(ClipRun, ClusteredDataset), Error> {
    let dataset = data.load()?;
    let hypothesis = build_hypothesis(&dataset, &options.beta0, &options.alternative)?;
    let weights = build_weights(&options.weights, &dataset, &hypothesis)?;
    let clip_options = ClipOptions {
        n_flips: options.b,
        seed: options.seed,
        exhaustive: options.exhaustive,
        studentize: options.studentize == "on",
        combiner: Combiner::from_str(&options.combine)?,
    };
    let run = run_clip_test(&dataset, &weights, &hypothesis, &clip_options)?;
    Ok((run, dataset))
}

fn cmd_test(args: &TestArgs) -> Result<(), Error> {
    let command_line = manifest::command_line();
    let report_json = if args.options.method == "clip" {
        let (mut run, _) = run_from_args(&args.data, &args.options)?;
        run.report.manifest = Some(manifest::build(
            &command_line,
            Some(args.options.seed),
            &[&args.data.data],
        )?);
        run.report.to_json()
    } else {
        let dataset = args.data.load()?;
        let hypothesis =
            build_hypothesis(&dataset, &args.options.beta0, &args.options.alternative)?;
        let method = match args.options.method.as_str() {
            "ols" => BaselineMethod::Ols,
            "hc3" => BaselineMethod::Hc3,
            _ => BaselineMethod::ClusterSandwich,
        };
        let mut report = run_baseline_test(&dataset, &hypothesis, method, 0.05)?;
        report.manifest = Some(manifest::build(&command_line, None, &[&args.data.data])?);
        report.to_json()
    };
    emit(args.out.as_deref(), &report_json)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let command_line = manifest::command_line();
    let (mut config, mut label) = match (&args.scenario, &args.config) {
        (Some(preset), None) => {
            let config = match preset.as_str() {
                "u41" => ScenarioConfig::preset_univariate(50, 0.0, args.seed),
                "m42" => ScenarioConfig::preset_multivariate(1.0, args.seed),
                _ => ScenarioConfig::preset_crossed(10, 0.0, args.seed),
            };
            (config, preset.clone())
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            let config = ScenarioConfig::from_toml(&text)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "config".into());
            (config, stem)
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pass exactly one of --scenario or --config".into(),
            ))
        }
    };
    config.seed = args.seed;
    if let Some(n) = args.n_clusters {
        config.n_clusters = n;
    }
    if let Some(beta) = args.beta {
        for b in config.beta.iter_mut() {
            *b = beta;
        }
    }
    if let Some(sd) = args.eps_sd {
        config.eps_sd = vec![sd];
        label = format!("{label}[eps_sd={sd}]");
    }
    config.validate()?;

    let methods = args
        .methods
        .iter()
        .map(|m| Method::from_str(m))
        .collect::<Result<Vec<_>, _>>()?;
    if methods.contains(&Method::ClipUser) {
        return Err(Error::InvalidConfig(
            "clip_user needs a weights provider and is only available through the library API"
                .into(),
        ));
    }
    let options = MonteCarloOptions {
        reps: args.reps,
        alpha: args.alpha,
        n_flips: args.b,
        methods,
        user_weights: None,
        scenario_label: label,
    };
    let result = run_monte_carlo(&config, &options)?;
    eprintln!(
        "{} reps x {} methods in {:.1}s",
        result.reps,
        options.methods.len(),
        result.wall_seconds
    );
    if let Some(path) = &args.manifest_out {
        let manifest = manifest::build(&command_line, Some(args.seed), &[])?;
        fs::write(path, serde_json::to_string_pretty(&manifest).unwrap())?;
    }
    emit(args.out.as_deref(), &result.to_csv())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), Error> {
    let command_line = manifest::command_line();
    let (mut run, dataset) = run_from_args(&args.data, &args.options)?;
    run.report.manifest = Some(manifest::build(
        &command_line,
        Some(args.options.seed),
        &[&args.data.data],
    )?);

    // Build every dump in memory first so a failure writes nothing.
    let labels = run.decomposition.outcome_labels().join(",");

    let mut zeta_csv = format!("cluster_id,{labels}\n");
    for (j, id) in dataset.cluster_ids().enumerate() {
        zeta_csv.push_str(id);
        for k in 0..run.decomposition.n_tested() {
            zeta_csv.push_str(&format!(",{}", run.decomposition.zeta()[(j, k)]));
        }
        zeta_csv.push('\n');
    }

    let plan = clip_core::flips::generate_flips(
        dataset.n_clusters(),
        if args.options.exhaustive {
            clip_core::flips::FlipMode::Exhaustive
        } else {
            clip_core::flips::FlipMode::MonteCarlo {
                b: args.options.b,
                seed: args.options.seed,
            }
        },
    )?;
    let ids: Vec<&str> = dataset.cluster_ids().collect();
    let mut signs_csv = format!("{}\n", ids.join(","));
    for row in plan.rows() {
        let line: Vec<String> = row.iter().map(|s| s.to_string()).collect();
        signs_csv.push_str(&line.join(","));
        signs_csv.push('\n');
    }

    let mut m_csv = format!("{labels}\n");
    let m = run.scores.m();
    for b in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|k| m[(b, k)].to_string()).collect();
        m_csv.push_str(&line.join(","));
        m_csv.push('\n');
    }

    let mut cov_csv = format!("{labels}\n");
    let cov = run.scores.empirical_row_cov();
    for i in 0..cov.nrows() {
        let line: Vec<String> = (0..cov.ncols()).map(|k| cov[(i, k)].to_string()).collect();
        cov_csv.push_str(&line.join(","));
        cov_csv.push('\n');
    }

    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("zeta.csv"), zeta_csv)?;
    fs::write(args.out_dir.join("signs.csv"), signs_csv)?;
    fs::write(args.out_dir.join("flip_scores.csv"), m_csv)?;
    fs::write(args.out_dir.join("row_covariance.csv"), cov_csv)?;
    fs::write(args.out_dir.join("report.json"), run.report.to_json())?;
    Ok(())
}

fn emit(path: Option<&std::path::Path>, content: &str) -> Result<(), Error> {
    match path {
        Some(path) => fs::write(path, content)?,
        None => print!("{content}"),
    }
    Ok(())
}
