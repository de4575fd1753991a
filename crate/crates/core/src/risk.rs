//! One-factor migration model and Monte Carlo risk charges.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{transition_matrix, GeneratorMatrix};
use crate::reference::{RATINGS, RATING_YIELDS};

/// Number of scenario batches used for the standard error.
pub const BATCHES: usize = 10;
pub const DEFAULT_SIMS: usize = 1_500_000;
const SMALL_SAMPLE: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub rating: usize,
    pub notional: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Portfolio {
    positions: Vec<Position>,
}

#[derive(Deserialize)]
struct PositionFile {
    rating: String,
    notional: f64,
}

#[derive(Deserialize)]
struct PortfolioFile {
    positions: Vec<PositionFile>,
}

impl Portfolio {
    /// Ratings index the non-default states; notionals must be finite and
    /// non-negative.
    pub fn new(positions: Vec<Position>) -> Result<Self> {
        for (k, p) in positions.iter().enumerate() {
            if !(p.notional.is_finite() && p.notional >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "position {k}: notional {} must be finite and non-negative",
                    p.notional
                )));
            }
        }
        Ok(Portfolio { positions })
    }

    fn from_groups(groups: &[(usize, &[f64])]) -> Self {
        let positions = groups
            .iter()
            .flat_map(|&(rating, ns)| ns.iter().map(move |&notional| Position { rating, notional }))
            .collect();
        Portfolio { positions }
    }

    pub fn mixed() -> Self {
        Self::from_groups(&[
            (0, &[100.0, 500.0, 1500.0, 750.0]),
            (1, &[200.0, 750.0, 2000.0, 650.0]),
            (2, &[150.0, 400.0, 400.0]),
            (3, &[300.0, 500.0, 150.0, 1500.0]),
            (4, &[500.0, 250.0, 700.0]),
            (5, &[200.0, 500.0]),
            (6, &[100.0, 150.0, 200.0]),
        ])
    }

    pub fn investment() -> Self {
        Self::from_groups(&[
            (0, &[1000.0, 500.0, 1500.0, 1500.0]),
            (1, &[100.0, 400.0, 750.0, 2000.0, 400.0, 1500.0]),
            (2, &[150.0, 100.0, 800.0, 400.0, 200.0]),
        ])
    }

    pub fn speculative() -> Self {
        Self::from_groups(&[
            (4, &[1000.0, 150.0, 100.0, 800.0, 1500.0]),
            (5, &[100.0, 300.0, 400.0, 750.0, 2000.0, 1500.0]),
            (6, &[400.0, 500.0, 400.0, 1000.0]),
        ])
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "mixed" => Some(Self::mixed()),
            "investment" => Some(Self::investment()),
            "speculative" => Some(Self::speculative()),
            _ => None,
        }
    }

    /// `{"positions": [{"rating": "AAA", "notional": 100}, ...]}`
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PortfolioFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("portfolio file: {e}")))?;
        let mut positions = Vec::with_capacity(file.positions.len());
        for (k, p) in file.positions.into_iter().enumerate() {
            let rating = RATINGS[..RATINGS.len() - 1]
                .iter()
                .position(|r| *r == p.rating)
                .ok_or_else(|| Error::InvalidArgument(format!("position {k}: unknown rating '{}'", p.rating)))?;
            positions.push(Position { rating, notional: p.notional });
        }
        Self::new(positions)
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Portfolio {
            positions: self
                .positions
                .iter()
                .map(|p| Position { rating: p.rating, notional: p.notional * c })
                .collect(),
        }
    }

    fn check(&self, h: usize) -> Result<()> {
        match self.positions.iter().find(|p| p.rating + 1 >= h) {
            Some(p) => Err(Error::InvalidArgument(format!(
                "position rating {} is not a non-default state of a {h}-state generator",
                p.rating
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Measure {
    #[serde(rename = "irc")]
    Irc,
    #[serde(rename = "idr")]
    Idr,
    #[serde(rename = "irc-es")]
    IrcEs,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Irc, Measure::Idr, Measure::IrcEs];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Irc => "irc",
            Measure::Idr => "idr",
            Measure::IrcEs => "irc-es",
        }
    }

    pub fn confidence(self) -> f64 {
        match self {
            Measure::Irc | Measure::Idr => 0.999,
            Measure::IrcEs => 0.975,
        }
    }

    pub fn horizon(self) -> f64 {
        match self {
            Measure::Irc | Measure::IrcEs => 0.25,
            Measure::Idr => 1.0,
        }
    }

    pub fn default_only(self) -> bool {
        self == Measure::Idr
    }

    pub fn expected_shortfall(self) -> bool {
        self == Measure::IrcEs
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskSpec {
    pub measure: Measure,
    pub sims: usize,
    /// Yield per non-default rating.
    pub yields: Vec<f64>,
}

impl RiskSpec {
    pub fn new(measure: Measure) -> Self {
        RiskSpec {
            measure,
            sims: DEFAULT_SIMS,
            yields: RATING_YIELDS.to_vec(),
        }
    }

    pub fn with_sims(mut self, sims: usize) -> Self {
        self.sims = sims;
        self
    }
}

/// Basel asset correlation interpolated on the one-year PD.
pub fn basel_beta(pd: f64) -> f64 {
    let f = (1.0 - (-50.0 * pd).exp()) / (1.0 - (-50.0f64).exp());
    0.12 * f + 0.24 * (1.0 - f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MigrationModel {
    pub horizon: f64,
    pub tpm: nalgebra::DMatrix<f64>,
    pub betas: Vec<f64>,
    /// Per current rating, `h − 1` cutpoints: `z < cut[0]` is default,
    /// `z < cut[k]` lands on state `h − 1 − k`, otherwise state 0.
    pub thresholds: Vec<Vec<f64>>,
}

fn inverse_phi(p: f64, normal: &Normal) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        // Two Newton steps polish the library's ~1e-11 relative accuracy.
        let mut x = normal.inverse_cdf(p);
        for _ in 0..2 {
            let pdf = normal.pdf(x);
            if pdf > 0.0 {
                x -= (normal.cdf(x) - p) / pdf;
            }
        }
        x
    }
}

pub fn build_migration_model(q: &GeneratorMatrix, horizon: f64) -> Result<MigrationModel> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let h = q.dim();
    let normal = Normal::standard();
    let tpm = transition_matrix(q, horizon)?.matrix().clone();
    let one_year = transition_matrix(q, 1.0)?;
    let betas = (0..h - 1).map(|i| basel_beta(one_year.matrix()[(i, h - 1)])).collect();
    let thresholds = (0..h - 1)
        .map(|i| {
            (0..h - 1)
                .map(|k| {
                    let cum: f64 = (h - 1 - k..h).map(|j| tpm[(i, j)]).sum();
                    if cum <= 0.5 {
                        inverse_phi(cum, &normal)
                    } else {
                        // Upper tail from the better ratings keeps precision near one.
                        let tail: f64 = (0..h - 1 - k).map(|j| tpm[(i, j)]).sum();
                        -inverse_phi(tail, &normal)
                    }
                })
                .collect()
        })
        .collect();
    Ok(MigrationModel { horizon, tpm, betas, thresholds })
}

impl MigrationModel {
    pub fn dim(&self) -> usize {
        self.tpm.nrows()
    }

    /// New state for asset return `z` of a company currently in `rating`.
    pub fn migrate(&self, rating: usize, z: f64) -> usize {
        let h = self.dim();
        let cuts = &self.thresholds[rating];
        match cuts.iter().position(|&c| z < c) {
            Some(k) => h - 1 - k,
            None => 0,
        }
    }
}

/// Loss of a one-year par position held at `old` rating after migrating to
/// `new` at `horizon`: full notional on default, otherwise the change in the
/// value of the year-end cash flow discounted at the rating yield.
pub fn revaluation_loss(notional: f64, old: usize, new: usize, horizon: f64, yields: &[f64], h: usize) -> f64 {
    if new + 1 == h {
        return notional;
    }
    if new == old {
        return 0.0;
    }
    let cash = notional * (1.0 + yields[old]);
    let rest = 1.0 - horizon;
    cash / (1.0 + yields[old]).powf(rest) - cash / (1.0 + yields[new]).powf(rest)
}

/// Simulated portfolio losses, grouped by scenario batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub batches: Vec<Vec<f64>>,
}

fn quantile_index(conf: f64, n: usize) -> usize {
    let k = (conf * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n) - 1
}

/// VaR as the order statistic at `ceil(conf·n)` of sorted losses.
pub fn var_sorted(sorted: &[f64], conf: f64) -> f64 {
    sorted[quantile_index(conf, sorted.len())]
}

/// ES as the mean of sorted losses from the VaR order statistic upwards.
pub fn es_sorted(sorted: &[f64], conf: f64) -> f64 {
    let tail = &sorted[quantile_index(conf, sorted.len())..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

impl LossSample {
    pub fn len(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sorted_all(&self) -> Vec<f64> {
        sorted(self.batches.concat())
    }

    pub fn var(&self, conf: f64) -> f64 {
        var_sorted(&self.sorted_all(), conf)
    }

    pub fn es(&self, conf: f64) -> f64 {
        es_sorted(&self.sorted_all(), conf)
    }

    /// Statistic on the pooled sample and its standard error across batches.
    pub fn statistic(&self, conf: f64, es: bool) -> (f64, f64) {
        let stat = |s: &[f64]| if es { es_sorted(s, conf) } else { var_sorted(s, conf) };
        let total = stat(&self.sorted_all());
        let per: Vec<f64> = self
            .batches
            .iter()
            .filter(|b| !b.is_empty())
            .map(|b| stat(&sorted(b.clone())))
            .collect();
        let k = per.len() as f64;
        if per.len() < 2 {
            return (total, 0.0);
        }
        let mean = per.iter().sum::<f64>() / k;
        let var = per.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (total, (var / k).sqrt())
    }
}

/// Losses for `sims` scenarios. Each batch draws from its own stream of the
/// seed, so the result does not depend on the thread count, and the same
/// seed gives the same systematic and idiosyncratic draws for any generator.
/// Positions are simulated in a canonical order so relabeling them leaves
/// the sample unchanged.
pub fn simulate_losses(
    q: &GeneratorMatrix,
    portfolio: &Portfolio,
    spec: &RiskSpec,
    seed: u64,
) -> Result<LossSample> {
    let h = q.dim();
    portfolio.check(h)?;
    if spec.sims == 0 {
        return Err(Error::InvalidArgument("need at least one scenario".into()));
    }
    if !spec.measure.default_only() && spec.yields.len() + 1 < h {
        return Err(Error::InvalidArgument(format!(
            "need {} yields, got {}",
            h - 1,
            spec.yields.len()
        )));
    }
    if spec.sims < SMALL_SAMPLE {
        log::warn!("{} scenarios is a small sample for a tail quantile", spec.sims);
    }
    let measure = spec.measure;
    let model = build_migration_model(q, measure.horizon())?;

    let mut order: Vec<&Position> = portfolio.positions().iter().collect();
    order.sort_by(|a, b| a.rating.cmp(&b.rating).then(a.notional.total_cmp(&b.notional)));
    struct Prepared {
        cuts: Vec<f64>,
        beta: f64,
        idio: f64,
        loss: Vec<f64>,
    }
    let prepared: Vec<Prepared> = order
        .iter()
        .map(|p| {
            let beta = model.betas[p.rating];
            let cuts = if measure.default_only() {
                vec![model.thresholds[p.rating][0]]
            } else {
                model.thresholds[p.rating].clone()
            };
            // Loss indexed by position in `cuts`, last slot for no crossing.
            let mut loss: Vec<f64> = if measure.default_only() {
                vec![p.notional, 0.0]
            } else {
                (0..h)
                    .map(|k| {
                        let new = if k + 1 == h { 0 } else { h - 1 - k };
                        revaluation_loss(p.notional, p.rating, new, measure.horizon(), &spec.yields, h)
                    })
                    .collect()
            };
            if p.notional == 0.0 {
                loss.iter_mut().for_each(|x| *x = 0.0);
            }
            Prepared {
                cuts,
                beta,
                idio: (1.0 - beta * beta).sqrt(),
                loss,
            }
        })
        .collect();

    let base = spec.sims / BATCHES;
    let extra = spec.sims % BATCHES;
    let batches = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let n = base + usize::from(b < extra);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let x: f64 = StandardNormal.sample(&mut rng);
                let mut total = 0.0;
                for p in &prepared {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let z = p.beta * x + p.idio * e;
                    let k = p.cuts.iter().position(|&c| z < c).unwrap_or(p.cuts.len());
                    total += p.loss[k];
                }
                out.push(total);
            }
            out
        })
        .collect();
    Ok(LossSample { batches })
}

/// Risk charge of `spec.measure` and its batch standard error.
pub fn risk_charge(q: &GeneratorMatrix, portfolio: &Portfolio, spec: &RiskSpec, seed: u64) -> Result<(f64, f64)> {
    let sample = simulate_losses(q, portfolio, spec, seed)?;
    Ok(sample.statistic(spec.measure.confidence(), spec.measure.expected_shortfall()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskError {
    pub value: f64,
    /// False when the true charge is zero and `value` is a money amount.
    pub relative: bool,
}

/// Mean absolute deviation of the estimates from the true charge, relative
/// to it when it is non-zero.
pub fn risk_error(estimates: &[f64], truth: f64) -> Result<RiskError> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no risk charge estimates".into()));
    }
    let mad = estimates.iter().map(|e| (e - truth).abs()).sum::<f64>() / estimates.len() as f64;
    Ok(if truth > 0.0 {
        RiskError { value: mad / truth, relative: true }
    } else {
        RiskError { value: mad, relative: false }
    })
}
