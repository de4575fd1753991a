//! Simulation of observed TPMs from a known generator and the benchmark
//! harness comparing estimators against the truth.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;

use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mcmc::{self, GammaPrior, McmcConfig};
use crate::model::{pd_curve, transition_matrix, GeneratorMatrix, ObservationSet};
use crate::regularize::{self, RawLogMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub true_generator: GeneratorMatrix,
    pub years: usize,
    pub obligors_per_rating: Vec<u64>,
    pub seeds: Vec<u64>,
    pub reinsert_defaults: bool,
}

impl SimSpec {
    /// Four years, obligor levels 100..1000, seeds 0..10, no reinsertion.
    pub fn new(true_generator: GeneratorMatrix) -> Self {
        SimSpec {
            true_generator,
            years: 4,
            obligors_per_rating: vec![100, 200, 300, 500, 750, 1000],
            seeds: (0..10).collect(),
            reinsert_defaults: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.years == 0 {
            return Err(Error::InvalidArgument("need at least one year".into()));
        }
        if self.obligors_per_rating.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument("obligors per rating must be positive".into()));
        }
        Ok(())
    }
}

/// Splits `m` obligors over the row `p` by sequential binomial draws.
fn multinomial<R: rand::Rng>(m: u64, p: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    let mut out = vec![0; p.len()];
    let mut left = m;
    let mut mass = 1.0;
    for (k, &pk) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == p.len() || mass <= 0.0 {
            out[k] = left;
            break;
        }
        let prob = (pk / mass).clamp(0.0, 1.0);
        let n = Binomial::new(left, prob)
            .map_err(|e| Error::InvalidArgument(format!("binomial draw: {e}")))?
            .sample(rng);
        out[k] = n;
        left -= n;
        mass -= pk;
    }
    Ok(out)
}

/// One-year TPM observations for `obligors` companies per rating.
///
/// Without reinsertion every year starts from a fresh cohort of `obligors`
/// per non-default rating. With reinsertion the population carries over
/// between years and each defaulted company re-enters at the rating it held
/// at the start of the year it defaulted.
pub fn simulate_tpm_series(spec: &SimSpec, obligors: u64, seed: u64) -> Result<ObservationSet> {
    spec.validate()?;
    let q = &spec.true_generator;
    let h = q.dim();
    let p = linalg::clean_stochastic(linalg::expm(q.matrix(), 1.0)?, 1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(obligors);
    let mut population: Vec<u64> = (0..h).map(|i| if i + 1 < h { obligors } else { 0 }).collect();
    let mut counts = Vec::with_capacity(spec.years);
    for _ in 0..spec.years {
        let mut c = DMatrix::zeros(h, h);
        let mut next = vec![0u64; h];
        for i in 0..h - 1 {
            let row: Vec<f64> = p.row(i).iter().copied().collect();
            let draws = multinomial(population[i], &row, &mut rng)?;
            for (j, &n) in draws.iter().enumerate() {
                c[(i, j)] = n as f64;
                if j + 1 == h {
                    // Defaulters re-enter at their old rating.
                    next[i] += n;
                } else {
                    next[j] += n;
                }
            }
        }
        c[(h - 1, h - 1)] = population[h - 1] as f64;
        counts.push(c);
        if spec.reinsert_defaults {
            population = next;
        }
    }
    ObservationSet::from_counts(1.0, counts)
}

/// `|PD_est − PD_true| / PD_true` for the one-year PD of `rating`.
pub fn relative_pd_error(q_est: &GeneratorMatrix, q_true: &GeneratorMatrix, rating: usize) -> Result<f64> {
    let t = pd_curve(q_true, rating, &[1.0])?[0];
    if t <= 0.0 {
        return Err(Error::ZeroTruePd(rating));
    }
    let e = pd_curve(q_est, rating, &[1.0])?[0];
    Ok((e - t).abs() / t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    #[serde(rename = "em")]
    Em,
    #[serde(rename = "da")]
    Da,
    #[serde(rename = "wa")]
    Wa,
    #[serde(rename = "qog")]
    Qog,
    #[serde(rename = "mcmc-bs05")]
    McmcBs05,
    #[serde(rename = "mcmc-bs09")]
    McmcBs09,
    #[serde(rename = "mcmc-mode")]
    McmcMode,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Em,
        Method::Da,
        Method::Wa,
        Method::Qog,
        Method::McmcBs05,
        Method::McmcBs09,
        Method::McmcMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Em => "em",
            Method::Da => "da",
            Method::Wa => "wa",
            Method::Qog => "qog",
            Method::McmcBs05 => "mcmc-bs05",
            Method::McmcBs09 => "mcmc-bs09",
            Method::McmcMode => "mcmc-mode",
        }
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::Da | Method::Wa | Method::Qog)
    }

    pub fn is_mcmc(self) -> bool {
        matches!(self, Method::McmcBs05 | Method::McmcBs09 | Method::McmcMode)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// Settings shared by every estimator in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSettings {
    pub em: EmConfig,
    pub mcmc: McmcConfig,
    pub gibbs_prior_alpha: f64,
    pub gibbs_prior_beta: f64,
    pub importance_prior_alpha: f64,
    pub importance_prior_beta: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            em: EmConfig::default(),
            mcmc: McmcConfig::default(),
            gibbs_prior_alpha: 1.0,
            gibbs_prior_beta: 1.0,
            importance_prior_alpha: 1.0,
            importance_prior_beta: 5.0,
        }
    }
}

/// Runs one estimator on an observation set. MCMC methods use
/// `settings.mcmc` with the given seed.
pub fn estimate(
    method: Method,
    obs: &ObservationSet,
    settings: &EstimatorSettings,
    seed: u64,
) -> Result<GeneratorMatrix> {
    let h = obs.dim();
    let mcmc_cfg = McmcConfig {
        seed,
        ..settings.mcmc.clone()
    };
    match method {
        Method::Em => Ok(em::estimate_em(obs, &settings.em)?.estimate),
        Method::Da | Method::Wa | Method::Qog => {
            let l = RawLogMatrix::from_tpm(&obs.average_tpm()?)?;
            Ok(match method {
                Method::Da => regularize::diagonal_adjustment(&l),
                Method::Wa => regularize::weighted_adjustment(&l),
                _ => regularize::qog(&l),
            })
        }
        Method::McmcBs05 => {
            let prior = GammaPrior::uniform(h, settings.gibbs_prior_alpha, settings.gibbs_prior_beta)?;
            Ok(mcmc::gibbs_estimate(obs, &prior, &mcmc_cfg)?.0)
        }
        Method::McmcBs09 => {
            let prior = GammaPrior::uniform(h, settings.importance_prior_alpha, settings.importance_prior_beta)?;
            Ok(mcmc::importance_estimate(obs, &prior, &mcmc_cfg)?.0)
        }
        Method::McmcMode => {
            let prior = GammaPrior::uniform(h, settings.gibbs_prior_alpha, settings.gibbs_prior_beta)?;
            Ok(mcmc::mode_estimate(obs, &prior, &mcmc_cfg)?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    /// A time budget tripped; no estimate.
    NoResult,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRecord {
    pub method: Method,
    pub seed: u64,
    pub obligors: u64,
    pub euclid_error: Option<f64>,
    /// One-year PD relative error per non-default rating; `None` where the
    /// true PD is zero or no estimate exists.
    pub pd_rel_error: Vec<Option<f64>>,
    pub seconds: f64,
    pub status: RecordStatus,
    pub message: Option<String>,
    #[serde(skip)]
    pub estimate: Option<GeneratorMatrix>,
}

/// Every (seed, obligor level, method) combination of `spec`.
///
/// The Gibbs chain behind `mcmc-bs05` also yields `mcmc-mode`; when both
/// are requested the chain is run once and its time is charged to both.
pub fn run_benchmark(
    spec: &SimSpec,
    methods: &[Method],
    settings: &EstimatorSettings,
) -> Result<Vec<BenchmarkRecord>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &m in &spec.obligors_per_rating {
        for &seed in &spec.seeds {
            let obs = simulate_tpm_series(spec, m, seed)?;
            out.extend(benchmark_one(spec, &obs, m, seed, methods, settings)?);
        }
    }
    Ok(out)
}

fn record(
    spec: &SimSpec,
    method: Method,
    seed: u64,
    obligors: u64,
    result: Result<GeneratorMatrix>,
    seconds: f64,
) -> BenchmarkRecord {
    let q_true = &spec.true_generator;
    let h = q_true.dim();
    match result {
        Ok(q) => {
            let pd = (0..h - 1).map(|r| relative_pd_error(&q, q_true, r).ok()).collect();
            BenchmarkRecord {
                method,
                seed,
                obligors,
                euclid_error: Some(q.distance(q_true)),
                pd_rel_error: pd,
                seconds,
                status: RecordStatus::Ok,
                message: None,
                estimate: Some(q),
            }
        }
        Err(e) => BenchmarkRecord {
            method,
            seed,
            obligors,
            euclid_error: None,
            pd_rel_error: vec![None; h - 1],
            seconds,
            status: if matches!(e, Error::TimeBudgetExceeded(_)) {
                RecordStatus::NoResult
            } else {
                RecordStatus::Failed
            },
            message: Some(e.to_string()),
            estimate: None,
        },
    }
}

/// All requested methods on one observation set.
pub fn benchmark_one(
    spec: &SimSpec,
    obs: &ObservationSet,
    obligors: u64,
    seed: u64,
    methods: &[Method],
    settings: &EstimatorSettings,
) -> Result<Vec<BenchmarkRecord>> {
    let h = obs.dim();
    let mut out = Vec::new();
    let shared_chain = methods.contains(&Method::McmcBs05) && methods.contains(&Method::McmcMode);
    for &method in methods {
        if shared_chain && method == Method::McmcMode {
            continue;
        }
        let start = Instant::now();
        if shared_chain && method == Method::McmcBs05 {
            let prior = GammaPrior::uniform(h, settings.gibbs_prior_alpha, settings.gibbs_prior_beta)?;
            let cfg = McmcConfig {
                seed,
                ..settings.mcmc.clone()
            };
            match mcmc::gibbs_chain(obs, &prior, &cfg) {
                Ok(chain) => {
                    let chain_secs = start.elapsed().as_secs_f64();
                    out.push(record(spec, Method::McmcBs05, seed, obligors, chain.mean(), chain_secs));
                    let t = Instant::now();
                    let mode = mcmc::mode_from_chain(&chain).map(|x| x.0);
                    let secs = chain_secs + t.elapsed().as_secs_f64();
                    out.push(record(spec, Method::McmcMode, seed, obligors, mode, secs));
                }
                Err(e) => {
                    let secs = start.elapsed().as_secs_f64();
                    let again = match &e {
                        Error::TimeBudgetExceeded(s) => Error::TimeBudgetExceeded(s.clone()),
                        other => Error::InvalidArgument(other.to_string()),
                    };
                    out.push(record(spec, Method::McmcBs05, seed, obligors, Err(e), secs));
                    out.push(record(spec, Method::McmcMode, seed, obligors, Err(again), secs));
                }
            }
            continue;
        }
        let result = estimate(method, obs, settings, seed);
        let secs = start.elapsed().as_secs_f64();
        if let Err(e) = &result {
            log::warn!("{method} failed on seed {seed}, {obligors} obligors: {e}");
        }
        out.push(record(spec, method, seed, obligors, result, secs));
    }
    Ok(out)
}

/// Seed averages for one (method, obligor level).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub obligors: u64,
    pub runs: usize,
    pub failures: usize,
    pub mean_euclid_error: Option<f64>,
    /// Relative PD error of the seed-averaged one-year TPM.
    pub pd_rel_error_of_mean_tpm: Vec<Option<f64>>,
    pub mean_seconds: f64,
}

pub fn summarize(records: &[BenchmarkRecord], q_true: &GeneratorMatrix) -> Result<Vec<SummaryRow>> {
    let h = q_true.dim();
    let p_true = transition_matrix(q_true, 1.0)?;
    let mut keys: Vec<(Method, u64)> = records.iter().map(|r| (r.method, r.obligors)).collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (method, obligors) in keys {
        let group: Vec<&BenchmarkRecord> = records
            .iter()
            .filter(|r| r.method == method && r.obligors == obligors)
            .collect();
        let ok: Vec<&GeneratorMatrix> = group.iter().filter_map(|r| r.estimate.as_ref()).collect();
        let errs: Vec<f64> = group.iter().filter_map(|r| r.euclid_error).collect();
        let mean_euclid_error = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
        let mut pd = vec![None; h - 1];
        if !ok.is_empty() {
            let mut avg = DMatrix::zeros(h, h);
            for q in &ok {
                avg += transition_matrix(q, 1.0)?.matrix();
            }
            avg /= ok.len() as f64;
            for (r, slot) in pd.iter_mut().enumerate() {
                let t = p_true.matrix()[(r, h - 1)];
                if t > 0.0 {
                    *slot = Some((avg[(r, h - 1)] - t).abs() / t);
                }
            }
        }
        out.push(SummaryRow {
            method,
            obligors,
            runs: group.len(),
            failures: group.len() - ok.len(),
            mean_euclid_error,
            pd_rel_error_of_mean_tpm: pd,
            mean_seconds: group.iter().map(|r| r.seconds).sum::<f64>() / group.len() as f64,
        });
    }
    Ok(out)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Shortest decimal that parses back to the same `f64` (at most 17
/// significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// One CSV row per record.
pub fn write_records_csv<W: Write>(records: &[BenchmarkRecord], ratings: &[&str], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec![
        "method".to_string(),
        "seed".into(),
        "obligors".into(),
        "euclid_error".into(),
    ];
    header.extend(ratings.iter().map(|r| format!("pd_rel_error_{r}")));
    header.extend(["seconds".into(), "status".into(), "message".into()]);
    let io = |e: csv::Error| Error::InvalidArgument(format!("CSV output: {e}"));
    wr.write_record(&header).map_err(io)?;
    for r in records {
        let mut row = vec![
            r.method.to_string(),
            r.seed.to_string(),
            r.obligors.to_string(),
            fmt_opt(r.euclid_error),
        ];
        row.extend(r.pd_rel_error.iter().map(|x| fmt_opt(*x)));
        let status = match r.status {
            RecordStatus::Ok => "ok",
            RecordStatus::NoResult => "no_result",
            RecordStatus::Failed => "failed",
        };
        row.extend([fmt_f64(r.seconds), status.to_string(), r.message.clone().unwrap_or_default()]);
        wr.write_record(&row).map_err(io)?;
    }
    wr.flush().map_err(|e| Error::InvalidArgument(format!("CSV output: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    #[test]
    fn large_cohort_matches_tpm() {
        let q = reference::stable_generator();
        let mut spec = SimSpec::new(q.clone());
        spec.years = 1;
        let obs = simulate_tpm_series(&spec, 1_000_000, 3).unwrap();
        let p = transition_matrix(&q, 1.0).unwrap();
        assert!((obs.tpms()[0].matrix() - p.matrix()).amax() < 0.002);
    }

    #[test]
    fn zero_generator_gives_identity() {
        let mut spec = SimSpec::new(GeneratorMatrix::zeros(4));
        spec.years = 3;
        let obs = simulate_tpm_series(&spec, 50, 1).unwrap();
        for p in obs.tpms() {
            assert_eq!(p.matrix(), &DMatrix::identity(4, 4));
        }
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let spec = SimSpec::new(reference::unstable_generator());
        let a = simulate_tpm_series(&spec, 100, 7).unwrap();
        let b = simulate_tpm_series(&spec, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_tpm_series(&spec, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rows_sum_to_one_and_reinsertion_conserves_population() {
        let mut spec = SimSpec::new(reference::unstable_generator());
        spec.reinsert_defaults = true;
        spec.years = 6;
        let obs = simulate_tpm_series(&spec, 300, 2).unwrap();
        for u in 0..obs.len() {
            let m = obs.obligors(u);
            assert_eq!(m.rows(0, 7).sum(), 7.0 * 300.0);
            for r in obs.tpms()[u].matrix().row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relative_pd_error_cases() {
        let q = reference::stable_generator();
        assert_eq!(relative_pd_error(&q, &q, 2).unwrap(), 0.0);
        assert!(matches!(relative_pd_error(&q, &GeneratorMatrix::zeros(8), 0), Err(Error::ZeroTruePd(0))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn da_and_wa_agree_without_negative_logs() {
        let q = reference::stable_generator();
        let p = transition_matrix(&q, 1.0).unwrap();
        let obs = ObservationSet::from_probabilities(1.0, vec![p], &[1000.0; 8]).unwrap();
        let s = EstimatorSettings::default();
        let l = RawLogMatrix::from_tpm(&obs.average_tpm().unwrap()).unwrap();
        let has_negative = (0..8).any(|i| (0..8).any(|j| i != j && l.matrix()[(i, j)] < 0.0));
        let da = estimate(Method::Da, &obs, &s, 0).unwrap();
        let wa = estimate(Method::Wa, &obs, &s, 0).unwrap();
        if !has_negative {
            assert_eq!(da, wa);
        } else {
            assert!(da.distance(&wa) < 1e-12);
        }
    }
}
