//! Command-line surface: run replicated studies, fit on CSV data, report
//! spectral and identifiability diagnostics, and verify reports.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for input-data errors,
//! 3 for numeric failures. Outputs are written atomically and every report
//! echoes the seed and resolved configuration, so reruns with the same seed
//! are byte-identical.

mod io;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Deserialize;

use nsl_core::pca::{eigenvalue_ratio_k, score_angle, subspace_angle, top_factor_basis, CovariateMatrix};
use nsl_core::pipeline::{self, clr_transform, robust_spark, NslConfig};
use nsl_core::sim::{run_study, ExampleSpec, Method, ModelKind, PopulationModel, StudyOptions};
use nsl_core::{Error as CoreError, PenaltyFamily, PenaltySpec};

use io::{read_response, read_table, write_atomic};
use report::{format_summary, Report, ReportMetadata};

pub const DEFAULT_SEED: u64 = 12345;

#[derive(Debug)]
pub enum ExitKind {
    Usage,
    Input,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    kind: ExitKind,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Input,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> i32 {
        match self.kind {
            ExitKind::Usage => 1,
            ExitKind::Input => 2,
            ExitKind::Numeric => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        let kind = match err {
            CoreError::Numeric(_) => ExitKind::Numeric,
            _ => ExitKind::Input,
        };
        CliError {
            kind,
            message: err.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nsl",
    version,
    about = "Sparse regression with estimated latent factors: studies, fits, diagnostics"
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a replicated synthetic study and write a JSON report.
    Simulate(SimulateArgs),
    /// Fit the latent-factor model to CSV data.
    Fit(FitArgs),
    /// Spectral diagnostics of a covariate block.
    Pca(PcaArgs),
    /// Robust spark of a design matrix.
    Spark(SparkArgs),
    /// Verify and pretty-print a study report.
    Report(ReportArgs),
}

/// Optional values readable from `--config`; flags win over file values,
/// file values win over defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    example: Option<u8>,
    reps: Option<usize>,
    seed: Option<u64>,
    grid_size: Option<usize>,
    starts: Option<usize>,
    validation_size: Option<usize>,
    validation_fraction: Option<f64>,
    factors: Option<usize>,
    penalty: Option<String>,
    test_size: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, CliError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: bad config: {e}", p.display())))
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Synthetic design: 1 (one spike, Gaussian noise) or 2 (two spikes,
    /// heavy-tailed noise).
    #[arg(long)]
    example: Option<u8>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination (JSON).
    #[arg(long, default_value = "nsl_report.json")]
    output: PathBuf,
    /// Optional per-replication records CSV.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Leave the per-replication records out of the JSON report.
    #[arg(long)]
    no_records: bool,
    /// Comma-separated subset of lasso,scad,hard.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated subset of m1,m2,oracle.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Extra solver starts for nonconvex penalties.
    #[arg(long)]
    starts: Option<usize>,
    /// Held-out tuning sample size (default: ten times the training size).
    #[arg(long)]
    validation_size: Option<usize>,
    /// Training rows override.
    #[arg(long)]
    n: Option<usize>,
    /// Predictor count override.
    #[arg(long)]
    p: Option<usize>,
    /// Covariate count override.
    #[arg(long)]
    q: Option<usize>,
    /// Number of sample principal components in the augmented model.
    #[arg(long)]
    factors: Option<usize>,
    /// Test sample size override.
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Response CSV: one column with a header.
    #[arg(long)]
    response: PathBuf,
    /// Predictor CSV: n rows by p columns.
    #[arg(long)]
    predictors: PathBuf,
    /// Covariate CSV: n rows by q columns; factors are estimated here.
    #[arg(long)]
    covariates: PathBuf,
    /// Number of factor scores appended to the design.
    #[arg(long)]
    factors: Option<usize>,
    /// Penalty family: hard, l0, lasso, scad, or elastic_net.
    #[arg(long)]
    penalty: Option<String>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Elastic-net mixing weight in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    enet_mix: f64,
    #[arg(long, default_value_t = nsl_core::penalty::DEFAULT_SCAD_A)]
    scad_a: f64,
    /// Sup-norm bound on factor coefficients.
    #[arg(long, default_value_t = nsl_core::penalty::DEFAULT_GAMMA_BOX)]
    gamma_box: f64,
    /// Support cap M (defaults to 2n/log p).
    #[arg(long)]
    support_cap: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Center covariate columns with training-split means.
    #[arg(long)]
    center: bool,
    /// Apply the centered log-ratio transform to the covariates.
    #[arg(long)]
    clr: bool,
    /// Replaces zero covariate entries before the log-ratio transform.
    #[arg(long, default_value_t = 0.5)]
    pseudocount: f64,
    /// Fit summary destination (JSON).
    #[arg(long, default_value = "nsl_fit.json")]
    output: PathBuf,
    /// Coefficient table destination (CSV).
    #[arg(long, default_value = "nsl_coefficients.csv")]
    coefficients: PathBuf,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long)]
    covariates: PathBuf,
    /// Leading components to report (default: min(n-1, q, 25)).
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    center: bool,
    #[arg(long)]
    clr: bool,
    #[arg(long, default_value_t = 0.5)]
    pseudocount: f64,
    /// Eigenvalue table destination (CSV).
    #[arg(long, default_value = "nsl_eigen.csv")]
    output: PathBuf,
    /// Optional population directions (CSV, one column per factor) for
    /// angle diagnostics; synthetic data only.
    #[arg(long)]
    truth_directions: Option<PathBuf>,
    /// Angle table destination when truth directions are given.
    #[arg(long)]
    angles: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SparkArgs {
    #[arg(long)]
    design: PathBuf,
    /// Singular-value bound in (0, 1).
    #[arg(long)]
    bound: f64,
    /// Largest subset size searched (at most 14).
    #[arg(long, default_value_t = 10)]
    cap: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON produced by `simulate`.
    #[arg(long)]
    input: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };

    init_thread_pool();

    let outcome = run(cli);
    match outcome {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {}", err.message);
            std::process::exit(err.exit_code());
        }
    }
}

/// Worker parallelism is capped by the NSL_THREADS environment variable.
fn init_thread_pool() {
    if let Ok(value) = std::env::var("NSL_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Simulate(args) => simulate(args, &config),
        Command::Fit(args) => fit(args, &config),
        Command::Pca(args) => pca(args),
        Command::Spark(args) => spark(args),
        Command::Report(args) => verify_report(args),
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    let mut out = Vec::new();
    for name in names {
        out.push(name.parse::<Method>().map_err(|e| CliError::usage(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(CliError::usage("at least one method is required"));
    }
    Ok(out)
}

fn parse_models(names: &[String]) -> Result<Vec<ModelKind>, CliError> {
    let mut out = Vec::new();
    for name in names {
        out.push(name.parse::<ModelKind>().map_err(|e| CliError::usage(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(CliError::usage("at least one model is required"));
    }
    Ok(out)
}

fn simulate(args: SimulateArgs, config: &ConfigFile) -> Result<(), CliError> {
    let example = args
        .example
        .or(config.example)
        .ok_or_else(|| CliError::usage("--example is required (1 or 2)"))?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let reps = args.reps.or(config.reps).unwrap_or(50);

    let mut spec = match example {
        1 => ExampleSpec::example1(seed),
        2 => ExampleSpec::example2(seed),
        other => return Err(CliError::usage(format!("--example must be 1 or 2, got {other}"))),
    };
    spec.reps = reps;
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(p) = args.p {
        spec.p = p;
        if example == 1 {
            spec.q = p;
        }
    }
    if let Some(q) = args.q {
        spec.q = q;
    }
    if let Some(k) = args.factors.or(config.factors) {
        spec.num_factors = k;
    }
    if let Some(t) = args.test_size.or(config.test_size) {
        spec.test_size = t;
    }
    spec.validate().map_err(CliError::from)?;

    let methods = match &args.methods {
        Some(names) => parse_methods(names)?,
        None => vec![Method::Lasso, Method::Scad, Method::Hard],
    };
    let models = match &args.models {
        Some(names) => parse_models(names)?,
        None => vec![ModelKind::M1, ModelKind::M2, ModelKind::Oracle],
    };
    let options = StudyOptions {
        methods,
        models,
        grid_len: args.grid_size.or(config.grid_size).unwrap_or(100),
        num_starts: args.starts.or(config.starts).unwrap_or(5),
        validation_size: args.validation_size.or(config.validation_size),
    };

    let pop = PopulationModel::new(spec.clone()).map_err(CliError::from)?;
    let output = run_study(&pop, &options).map_err(CliError::from)?;

    let mut diagnostics = BTreeMap::new();
    for (i, v) in pop.factor_eigenvalues.iter().take(3).enumerate() {
        diagnostics.insert(format!("population_eigenvalue_{}", i + 1), *v);
    }
    diagnostics.insert("replications_failed".to_string(), output.summary.failures.len() as f64);

    let resolved = serde_json::json!({
        "command": "simulate",
        "spec": spec,
        "options": options,
    });
    let report = Report {
        metadata: ReportMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: resolved,
        },
        summary: output.summary.clone(),
        records: if args.no_records {
            None
        } else {
            Some(output.records.clone())
        },
        diagnostics,
    };
    write_atomic(&args.output, report.to_json()?.as_bytes())?;

    if let Some(records_path) = &args.records {
        write_records_csv(records_path, &output.records)?;
    }

    print!("{}", format_summary(&output.summary));
    println!("report written to {}", args.output.display());
    if output.summary.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::input(format!(
            "{} replication(s) failed; see report",
            output.summary.failures.len()
        )))
    }
}

const MEASURE_COLUMNS: [&str; 12] = [
    "pe",
    "beta_l2",
    "beta_l1",
    "beta_linf",
    "fp",
    "fn",
    "sigma_hat",
    "gamma_l2",
    "gamma_l1",
    "gamma_linf",
    "fp_gamma",
    "fn_gamma",
];

fn write_records_csv(path: &Path, records: &[nsl_core::sim::RepRecord]) -> Result<(), CliError> {
    let mut out = String::from("replication,method,model");
    for m in MEASURE_COLUMNS {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for rec in records {
        out.push_str(&format!("{},{},{}", rec.replication, rec.method, rec.model));
        let m = &rec.measures;
        let values = [
            Some(m.pe),
            Some(m.beta_l2),
            Some(m.beta_l1),
            Some(m.beta_linf),
            Some(m.fp),
            Some(m.fn_count),
            Some(m.sigma_hat),
            m.gamma_l2,
            m.gamma_l1,
            m.gamma_linf,
            m.fp_gamma,
            m.fn_gamma,
        ];
        for v in values {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn build_penalty(
    family_name: &str,
    args: &FitArgs,
) -> Result<PenaltySpec, CliError> {
    let family: PenaltyFamily = family_name
        .parse()
        .map_err(|e: CoreError| CliError::usage(e.to_string()))?;
    let mut spec = PenaltySpec::new(family, 0.0).map_err(CliError::from)?;
    spec.enet_mix = args.enet_mix;
    spec = spec.with_scad_a(args.scad_a).with_gamma_box(args.gamma_box);
    if let Some(cap) = args.support_cap {
        spec = spec.with_support_cap(cap);
    }
    spec.validate().map_err(CliError::from)?;
    Ok(spec)
}

fn apply_pseudocount(w: &mut DMatrix<f64>, pseudocount: f64) {
    for v in w.iter_mut() {
        if *v == 0.0 {
            *v = pseudocount;
        }
    }
}

fn fit(args: FitArgs, config: &ConfigFile) -> Result<(), CliError> {
    let y = read_response(&args.response)?;
    let x_table = read_table(&args.predictors)?;
    let w_table = read_table(&args.covariates)?;
    if x_table.values.nrows() != y.len() || w_table.values.nrows() != y.len() {
        return Err(CliError::input(format!(
            "row counts differ: response {}, predictors {}, covariates {}",
            y.len(),
            x_table.values.nrows(),
            w_table.values.nrows()
        )));
    }

    let factors = args
        .factors
        .or(config.factors)
        .ok_or_else(|| CliError::usage("--factors is required"))?;
    let family_name = args
        .penalty
        .clone()
        .or_else(|| config.penalty.clone())
        .ok_or_else(|| CliError::usage("--penalty is required"))?;
    let penalty = build_penalty(&family_name, &args)?;
    let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);

    let mut nsl_config = NslConfig::new(factors, penalty);
    nsl_config.center_w = args.center;
    nsl_config.clr_w = args.clr;
    nsl_config.validation_fraction = args
        .validation_fraction
        .or(config.validation_fraction)
        .unwrap_or(0.4);
    nsl_config.seed = seed;
    nsl_config.grid_len = args.grid_size.or(config.grid_size).unwrap_or(100);

    let mut w = w_table.values.clone();
    if args.clr {
        apply_pseudocount(&mut w, args.pseudocount);
    }

    let fitted = pipeline::fit(&y, &x_table.values, &w, &nsl_config).map_err(CliError::from)?;

    // coefficient table: every predictor, then every factor
    let mut csv_out = String::from("name,value,standardized_value,in_support\n");
    let p = x_table.values.ncols();
    let col_norms: Vec<f64> = (0..p)
        .map(|j| x_table.values.column(j).norm() / (y.len() as f64).sqrt())
        .collect();
    let support: std::collections::BTreeSet<usize> = fitted.estimate.support.iter().copied().collect();
    for j in 0..p {
        let value = fitted.estimate.beta[j];
        csv_out.push_str(&format!(
            "{},{},{},{}\n",
            x_table.names[j],
            value,
            value * col_norms[j],
            support.contains(&j)
        ));
    }
    let gamma_raw = fitted.gamma_raw_scale();
    for k in 0..factors {
        csv_out.push_str(&format!(
            "factor_{},{},{},{}\n",
            k + 1,
            gamma_raw[k],
            fitted.estimate.gamma[k],
            support.contains(&(p + k))
        ));
    }
    write_atomic(&args.coefficients, csv_out.as_bytes())?;

    let resolved = serde_json::json!({
        "command": "fit",
        "seed": seed,
        "factors": factors,
        "penalty": family_name,
        "grid_size": nsl_config.grid_len,
        "validation_fraction": nsl_config.validation_fraction,
        "center": args.center,
        "clr": args.clr,
    });
    let fit_json = serde_json::json!({
        "metadata": {
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": resolved,
        },
        "lambda_selected": fitted.lambda_selected,
        "sigma_hat": fitted.sigma_hat,
        "eigenvalues": fitted.eigenvalues,
        "converged": fitted.estimate.converged,
        "support_size": fitted.estimate.support.len(),
        "beta": fitted.estimate.beta.as_slice(),
        "gamma": fitted.estimate.gamma.as_slice(),
        "gamma_raw_scale": gamma_raw.as_slice(),
        "back_scalars": fitted.scores.back_scalars,
        "diagnostics": fitted.diagnostics,
    });
    let pretty = serde_json::to_string_pretty(&fit_json)
        .map_err(|e| CliError::input(format!("cannot serialize fit: {e}")))?;
    write_atomic(&args.output, pretty.as_bytes())?;

    println!(
        "fit: lambda={:.6} support={} sigma_hat={:.4}",
        fitted.lambda_selected,
        fitted.estimate.support.len(),
        fitted.sigma_hat
    );
    println!("coefficients written to {}", args.coefficients.display());
    println!("fit summary written to {}", args.output.display());
    Ok(())
}

fn pca(args: PcaArgs) -> Result<(), CliError> {
    let table = read_table(&args.covariates)?;
    let mut w = table.values.clone();
    if args.clr {
        apply_pseudocount(&mut w, args.pseudocount);
        w = clr_transform(&w).map_err(CliError::from)?;
    }
    if args.center {
        for j in 0..w.ncols() {
            let mean = w.column(j).mean();
            w.column_mut(j).add_scalar_mut(-mean);
        }
    }
    let n = w.nrows();
    let q = w.ncols();
    let k = args.factors.unwrap_or_else(|| (n - 1).min(q).min(25));
    let covariates = CovariateMatrix::new(w)?;
    let basis = top_factor_basis(&covariates, k).map_err(CliError::from)?;

    let total: f64 = basis.eigenvalues.iter().sum();
    let mut out = String::from("index,eigenvalue,ratio_to_next,cumulative_fraction\n");
    let mut cumulative = 0.0;
    for (i, &value) in basis.eigenvalues.iter().enumerate() {
        cumulative += value;
        let ratio = if i + 1 < basis.eigenvalues.len() && basis.eigenvalues[i + 1] > 0.0 {
            format!("{}", value / basis.eigenvalues[i + 1])
        } else {
            String::new()
        };
        out.push_str(&format!("{},{},{},{}\n", i + 1, value, ratio, cumulative / total));
    }
    write_atomic(&args.output, out.as_bytes())?;
    println!("eigenvalues written to {}", args.output.display());
    if let Some(k_hat) = eigenvalue_ratio_k(&basis.eigenvalues, k) {
        println!("eigenvalue-ratio heuristic suggests {k_hat} factor(s)");
    }

    if let Some(truth_path) = &args.truth_directions {
        let angles_path = args
            .angles
            .clone()
            .ok_or_else(|| CliError::usage("--angles is required with --truth-directions"))?;
        let truth = read_table(truth_path)?;
        if truth.values.nrows() != q {
            return Err(CliError::input(format!(
                "truth directions have {} rows, covariates have {q} columns",
                truth.values.nrows()
            )));
        }
        let m = truth.values.ncols().min(k);
        let mut out = String::from("factor,direction_angle,score_angle,cos_direction,cos_score\n");
        for i in 0..m {
            let u_hat = basis.directions.column(i).into_owned();
            let mut u = truth.values.column(i).into_owned();
            let norm = u.norm();
            if norm == 0.0 {
                return Err(CliError::input(format!("truth direction {} has zero norm", i + 1)));
            }
            u /= norm;
            let theta = subspace_angle(&u_hat, &[u.clone()]).map_err(CliError::from)?;
            let omega = score_angle(&covariates, &u_hat, &u).map_err(CliError::from)?;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                theta,
                omega,
                theta.cos(),
                omega.cos()
            ));
        }
        write_atomic(&angles_path, out.as_bytes())?;
        println!("angle diagnostics written to {}", angles_path.display());
    }
    Ok(())
}

fn spark(args: SparkArgs) -> Result<(), CliError> {
    let table = read_table(&args.design)?;
    let bound = robust_spark(&table.values, args.bound, args.cap).map_err(CliError::from)?;
    let payload = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "rows": table.values.nrows(),
        "columns": table.values.ncols(),
        "bound": args.bound,
        "cap": args.cap,
        "robust_spark": bound,
        "display": bound.to_string(),
    });
    let pretty = serde_json::to_string_pretty(&payload)
        .map_err(|e| CliError::input(format!("cannot serialize spark report: {e}")))?;
    if let Some(path) = &args.output {
        write_atomic(path, pretty.as_bytes())?;
        println!("spark report written to {}", path.display());
    }
    println!("robust spark (bound {}): {}", args.bound, bound);
    Ok(())
}

fn verify_report(args: ReportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", args.input.display())))?;
    let report = Report::from_json(&text)?;
    report.verify()?;
    println!(
        "report: version {} seed {}",
        report.metadata.tool_version, report.metadata.seed
    );
    print!("{}", format_summary(&report.summary));
    match &report.records {
        Some(records) => println!("records: {} (re-aggregation verified)", records.len()),
        None => println!("records: not stored"),
    }
    Ok(())
}
