mod io;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, CommandFactory, Parser, Subcommand};
use ctmcgen_core::em::{self, EmReport};
use ctmcgen_core::hessian::{self, ConfidenceInterval, EigenSummary};
use ctmcgen_core::model::{identifiability_check, pd_curve, IdentifiabilityDiagnostic};
use ctmcgen_core::risk::{self, Measure, Portfolio, RiskSpec};
use ctmcgen_core::simulate::{self, fmt_f64, EstimatorSettings, Method, SimSpec};
use ctmcgen_core::GeneratorMatrix;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or input files; exit code 1.
    Input(String),
    /// An estimator or simulation failed; exit code 2.
    Estimator(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Estimator(_) => 2,
        }
    }
}

fn estimator_err(e: ctmcgen_core::Error) -> CliError {
    CliError::Estimator(e.to_string())
}

#[derive(Parser)]
#[command(name = "ctmcgen", version, about = "Generator estimation for credit-rating transition matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a generator from observed TPMs.
    Estimate(EstimateArgs),
    /// Probability-of-default curves of a generator.
    Pd(PdArgs),
    /// Simulate TPMs from a true generator and score estimators.
    Benchmark(BenchmarkArgs),
    /// Monte Carlo risk charge of a portfolio.
    Risk(RiskArgs),
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    /// Observation file: {"dt", "obligors", "tpms"}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Write 95% confidence intervals from the observed information (em only).
    #[arg(long)]
    ci: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    mcmc_runs: usize,
    #[arg(long, default_value_t = 300)]
    mcmc_burn_in: usize,
}

#[derive(Args, Serialize)]
struct PdArgs {
    #[arg(long)]
    generator: PathBuf,
    /// start:end:step in years, end inclusive.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BenchmarkArgs {
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated obligors per rating.
    #[arg(long, value_delimiter = ',', default_value = "100,200,300,500,750,1000")]
    obligors: Vec<u64>,
    #[arg(long, default_value_t = 4)]
    years: usize,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "em,da,wa,qog")]
    methods: Vec<Method>,
    /// Seconds allowed for the first ten MCMC sweeps.
    #[arg(long = "budget-first10")]
    budget_first10: Option<f64>,
    /// Seconds allowed for a whole MCMC run.
    #[arg(long = "budget-total")]
    budget_total: Option<f64>,
    #[arg(long)]
    reinsert_defaults: bool,
    #[arg(long, default_value_t = 3000)]
    mcmc_runs: usize,
    #[arg(long, default_value_t = 300)]
    mcmc_burn_in: usize,
    #[arg(long, default_value = "benchmark.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RiskArgs {
    #[arg(long)]
    generator: PathBuf,
    /// mixed, investment, speculative or a JSON portfolio file.
    #[arg(long)]
    portfolio: String,
    #[arg(long, value_parser = parse_measure)]
    measure: Measure,
    #[arg(long, default_value_t = risk::DEFAULT_SIMS)]
    sims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// True generator; adds the risk error of this estimate.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value = "risk.json")]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: ctmcgen_core::Error| e.to_string())
}

fn parse_measure(s: &str) -> Result<Measure, String> {
    s.parse().map_err(|e: ctmcgen_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("CTMCGEN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("CTMCGEN_THREADS ignored: {e}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Pd(a) => cmd_pd(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Risk(a) => cmd_risk(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Input(msg) | CliError::Estimator(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}

#[derive(Serialize)]
struct EstimateReport {
    method: Method,
    observed_loglik: Option<f64>,
    identifiability: IdentifiabilityDiagnostic,
    em: Option<EmReport>,
    hessian_eigen: Option<EigenSummary>,
    hessian_condition: Option<f64>,
}

fn cmd_estimate(a: EstimateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.ci && a.method != Method::Em {
        return Err(CliError::Input("--ci is only available with --method em".into()));
    }
    let obs = io::read_observations(&a.input)?;
    let mut settings = EstimatorSettings::default();
    settings.mcmc.runs = a.mcmc_runs;
    settings.mcmc.burn_in = a.mcmc_burn_in;
    settings.mcmc.validate().map_err(|e| CliError::Input(e.to_string()))?;

    let mut em_report = None;
    let q = if a.method == Method::Em {
        let r = em::estimate_em(&obs, &settings.em).map_err(estimator_err)?;
        let q = r.estimate.clone();
        em_report = Some(r);
        q
    } else {
        simulate::estimate(a.method, &obs, &settings, a.seed).map_err(estimator_err)?
    };
    let mut outputs = vec![a.out.clone()];
    io::write(&a.out, &io::matrix_csv(q.matrix()))?;

    let mut eigen = None;
    let mut condition = None;
    if a.ci {
        let rep = hessian::hessian_at(&q, &obs, hessian::DEFAULT_CUTOFF).map_err(estimator_err)?;
        eigen = Some(rep.eigen);
        condition = Some(rep.condition);
        let cis = hessian::confidence_intervals(&rep).map_err(estimator_err)?;
        let path = io::sibling(&a.out, "ci.csv");
        io::write(&path, &ci_csv(&cis, q.dim()))?;
        outputs.push(path);
    }
    if let Some(path) = &a.report {
        let report = EstimateReport {
            method: a.method,
            observed_loglik: em::observed_loglik(&q, &obs).ok(),
            identifiability: identifiability_check(&q, obs.dt()),
            em: em_report,
            hessian_eigen: eigen,
            hessian_condition: condition,
        };
        io::write_json(path, &report)?;
        outputs.push(path.clone());
    }
    io::write_manifest("estimate", &a, Some(a.seed), started, &outputs)?;
    Ok(())
}

fn ci_csv(cis: &[Option<ConfidenceInterval>], h: usize) -> String {
    let labels = io::labels(h);
    let mut out = String::from("from,to,estimate,lower,upper,crosses_zero\n");
    for ci in cis.iter().flatten() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            labels[ci.from],
            labels[ci.to],
            fmt_f64(ci.estimate),
            fmt_f64(ci.lo),
            fmt_f64(ci.hi),
            ci.crosses_zero()
        ));
    }
    out
}

/// `start:end:step`, end inclusive up to rounding.
fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Input(format!("grid '{s}' must be start:end:step with step > 0 and start <= end"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [a, b, step] = parts[..] else {
        return Err(bad());
    };
    if !(a.is_finite() && b.is_finite() && step.is_finite() && step > 0.0 && a >= 0.0 && a <= b) {
        return Err(bad());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| a + k as f64 * step).collect())
}

fn cmd_pd(a: PdArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let grid = parse_grid(&a.grid)?;
    let q = io::read_generator(&a.generator)?;
    let h = q.dim();
    let labels = io::labels(h);
    let curves: Vec<Vec<f64>> = (0..h - 1)
        .map(|r| pd_curve(&q, r, &grid))
        .collect::<Result<_, _>>()
        .map_err(estimator_err)?;
    let mut out = String::from("t");
    for l in &labels[..h - 1] {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (k, t) in grid.iter().enumerate() {
        out.push_str(&fmt_f64(*t));
        for c in &curves {
            out.push(',');
            out.push_str(&fmt_f64(c[k]));
        }
        out.push('\n');
    }
    io::write(&a.out, &out)?;
    io::write_manifest("pd", &a, None, started, &[a.out.clone()])?;
    Ok(())
}

fn secs(x: Option<f64>) -> Result<Option<Duration>, CliError> {
    x.map(|s| {
        Duration::try_from_secs_f64(s).map_err(|_| CliError::Input(format!("invalid budget {s}")))
    })
    .transpose()
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let truth = io::read_generator(&a.truth)?;
    let mut spec = SimSpec::new(truth.clone());
    spec.years = a.years;
    spec.obligors_per_rating = a.obligors.clone();
    spec.seeds = (0..a.seeds).collect();
    spec.reinsert_defaults = a.reinsert_defaults;
    spec.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let mut settings = EstimatorSettings::default();
    settings.mcmc.runs = a.mcmc_runs;
    settings.mcmc.burn_in = a.mcmc_burn_in;
    if a.budget_first10.is_some() {
        settings.mcmc.first_runs_budget = secs(a.budget_first10)?;
    }
    if a.budget_total.is_some() {
        settings.mcmc.total_budget = secs(a.budget_total)?;
    }
    settings.mcmc.validate().map_err(|e| CliError::Input(e.to_string()))?;

    let records = simulate::run_benchmark(&spec, &a.methods, &settings).map_err(estimator_err)?;
    let h = truth.dim();
    let labels = io::labels(h);
    let rating_refs: Vec<&str> = labels[..h - 1].iter().map(String::as_str).collect();
    let mut csv_buf = Vec::new();
    simulate::write_records_csv(&records, &rating_refs, &mut csv_buf).map_err(estimator_err)?;
    io::write(&a.out, &String::from_utf8_lossy(&csv_buf))?;
    let summary = simulate::summarize(&records, &truth).map_err(estimator_err)?;
    let summary_path = io::sibling(&a.out, "summary.json");
    io::write_json(&summary_path, &summary)?;
    io::write_manifest("benchmark", &a, None, started, &[a.out.clone(), summary_path])?;
    Ok(())
}

#[derive(Serialize)]
struct RiskOutput {
    measure: Measure,
    sims: usize,
    seed: u64,
    charge: f64,
    std_error: f64,
    true_charge: Option<f64>,
    risk_error: Option<risk::RiskError>,
}

fn load_portfolio(name: &str) -> Result<Portfolio, CliError> {
    if let Some(p) = Portfolio::builtin(name) {
        return Ok(p);
    }
    let text = std::fs::read_to_string(name).map_err(|e| CliError::Input(format!("portfolio {name}: {e}")))?;
    Portfolio::from_json(&text).map_err(|e| CliError::Input(format!("portfolio {name}: {e}")))
}

fn charge(q: &GeneratorMatrix, p: &Portfolio, spec: &RiskSpec, seed: u64) -> Result<(f64, f64), CliError> {
    risk::risk_charge(q, p, spec, seed).map_err(|e| match e {
        ctmcgen_core::Error::InvalidArgument(m) => CliError::Input(m),
        other => estimator_err(other),
    })
}

fn cmd_risk(a: RiskArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let q = io::read_generator(&a.generator)?;
    let portfolio = load_portfolio(&a.portfolio)?;
    let spec = RiskSpec::new(a.measure).with_sims(a.sims);
    let (c, se) = charge(&q, &portfolio, &spec, a.seed)?;
    let (true_charge, risk_error) = match &a.compare {
        Some(path) => {
            let truth = io::read_generator(path)?;
            let (t, _) = charge(&truth, &portfolio, &spec, a.seed)?;
            (Some(t), Some(risk::risk_error(&[c], t).map_err(estimator_err)?))
        }
        None => (None, None),
    };
    println!("{} charge {} std_error {}", a.measure, fmt_f64(c), fmt_f64(se));
    if let Some(e) = risk_error {
        let kind = if e.relative { "relative" } else { "absolute" };
        println!("risk_error {} ({kind})", fmt_f64(e.value));
    }
    let out = RiskOutput {
        measure: a.measure,
        sims: a.sims,
        seed: a.seed,
        charge: c,
        std_error: se,
        true_charge,
        risk_error,
    };
    io::write_json(&a.out, &out)?;
    io::write_manifest("risk", &a, Some(a.seed), started, &[a.out.clone()])?;
    Ok(())
}
