//! Bayesian estimators with a conjugate Gamma prior and the latent
//! continuous-time path as auxiliary variable: Gibbs sampling with
//! rejection-sampled paths, importance sampling under a neutral proposal,
//! and the kernel-smoothed posterior mode.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GeneratorMatrix, ObservationSet};

/// Independent `Γ(α_ij, 1/β_i)` priors on the off-diagonal rates.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPrior {
    pub alpha: DMatrix<f64>,
    pub beta: DVector<f64>,
}

impl GammaPrior {
    pub fn uniform(h: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(h, h, alpha), DVector::from_element(h, beta))
    }

    /// `α = 1`, `β = 1`.
    pub fn gibbs_default(h: usize) -> Self {
        Self::uniform(h, 1.0, 1.0).expect("valid prior")
    }

    /// `α = 1`, `β = 5`.
    pub fn importance_default(h: usize) -> Self {
        Self::uniform(h, 1.0, 5.0).expect("valid prior")
    }

    pub fn new(alpha: DMatrix<f64>, beta: DVector<f64>) -> Result<Self> {
        if alpha.nrows() != alpha.ncols() || beta.len() != alpha.nrows() {
            return Err(Error::DimensionError("prior shapes do not match".into()));
        }
        if alpha.iter().chain(beta.iter()).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("prior parameters must be nonnegative".into()));
        }
        Ok(GammaPrior { alpha, beta })
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub runs: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Consecutive rejected proposals tolerated while an endpoint still
    /// lacks a path.
    pub max_rejection_attempts: u64,
    /// Wall-clock cap on the first ten sweeps.
    pub first_runs_budget: Option<Duration>,
    pub total_budget: Option<Duration>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            runs: 3000,
            burn_in: 300,
            seed: 0,
            max_rejection_attempts: 1_000_000,
            first_runs_budget: Some(Duration::from_secs(180)),
            total_budget: Some(Duration::from_secs(18_000)),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.burn_in >= self.runs {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= burn_in < runs, got burn_in {} and runs {}",
                self.burn_in, self.runs
            )));
        }
        if self.max_rejection_attempts == 0 {
            return Err(Error::InvalidArgument("rejection budget must be positive".into()));
        }
        Ok(())
    }
}

/// Jump counts and holding times of one or more fully observed paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStats {
    pub jumps: DMatrix<f64>,
    pub holds: DVector<f64>,
}

impl PathStats {
    pub fn zeros(h: usize) -> Self {
        PathStats {
            jumps: DMatrix::zeros(h, h),
            holds: DVector::zeros(h),
        }
    }
}

/// A path on `[0, dt]`: its start state and `(time, new state)` per jump.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub start: usize,
    pub dt: f64,
    pub jumps: Vec<(f64, usize)>,
}

impl Path {
    pub fn end(&self) -> usize {
        self.jumps.last().map_or(self.start, |j| j.1)
    }

    pub fn stats(&self, h: usize) -> PathStats {
        let mut s = PathStats::zeros(h);
        self.add_to(&mut s, 1.0);
        s
    }

    fn add_to(&self, s: &mut PathStats, weight: f64) {
        let mut state = self.start;
        let mut t = 0.0;
        for &(tj, to) in &self.jumps {
            s.holds[state] += weight * (tj - t);
            s.jumps[(state, to)] += weight;
            state = to;
            t = tj;
        }
        s.holds[state] += weight * (self.dt - t);
    }

    /// Log of the fully observed likelihood `Π q_ij^{K_ij} e^{-q_i S_i}`.
    pub fn log_likelihood(&self, q: &DMatrix<f64>) -> f64 {
        let mut state = self.start;
        let mut t = 0.0;
        let mut ll = 0.0;
        for &(tj, to) in &self.jumps {
            ll += q[(state, state)] * (tj - t) + q[(state, to)].ln();
            state = to;
            t = tj;
        }
        ll + q[(state, state)] * (self.dt - t)
    }
}

/// Forward simulation of a chain from `start` over `[0, dt]`. Returns
/// false if the path was killed, which only happens when rows of `q` sum
/// to less than zero.
fn forward_path<R: Rng>(q: &DMatrix<f64>, start: usize, dt: f64, rng: &mut R, buf: &mut Vec<(f64, usize)>) -> bool {
    buf.clear();
    let h = q.nrows();
    let mut state = start;
    let mut t = 0.0;
    loop {
        let rate = -q[(state, state)];
        if rate <= 0.0 {
            return true;
        }
        let tau: f64 = Exp1.sample(rng);
        t += tau / rate;
        if t >= dt {
            return true;
        }
        let mut u = rng.random::<f64>() * rate;
        let mut next = None;
        let mut last = None;
        for j in 0..h {
            if j == state || q[(state, j)] <= 0.0 {
                continue;
            }
            last = Some(j);
            u -= q[(state, j)];
            if u < 0.0 {
                next = Some(j);
                break;
            }
        }
        let next = match next {
            Some(j) => j,
            // Roundoff leftover in a conservative row.
            None if u <= 1e-12 * rate => match last {
                Some(j) => j,
                None => return false,
            },
            None => return false,
        };
        buf.push((t, next));
        state = next;
    }
}

/// One path from `start` to `end` by rejection: simulate forward until the
/// path ends in `end`. Returns the path and the number of attempts.
pub fn sample_conditioned_path<R: Rng>(
    q: &GeneratorMatrix,
    start: usize,
    end: usize,
    dt: f64,
    max_attempts: u64,
    rng: &mut R,
) -> Result<(Path, u64)> {
    let mut buf = Vec::new();
    for attempt in 1..=max_attempts {
        let alive = forward_path(q.matrix(), start, dt, rng, &mut buf);
        let last = buf.last().map_or(start, |j| j.1);
        if alive && last == end {
            return Ok((
                Path {
                    start,
                    dt,
                    jumps: buf,
                },
                attempt,
            ));
        }
    }
    Err(Error::RejectionBudgetExceeded {
        from: start,
        to: end,
        attempts: max_attempts,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SweepCounters {
    pub proposals: u64,
    pub accepted: u64,
}

/// Draws `counts[s][r]` endpoint-conditioned paths for every `(s, r)` under
/// `q`, handing each accepted path to `sink(s, r, path)`.
///
/// Forward paths from `s` are shared between endpoints: a path ending in
/// any endpoint that still needs samples is an exact conditioned draw for
/// it.
fn draw_paths<R: Rng>(
    q: &DMatrix<f64>,
    counts: &DMatrix<u64>,
    dt: f64,
    budget: u64,
    rng: &mut R,
    counters: &mut SweepCounters,
    mut sink: impl FnMut(usize, usize, &Path),
) -> Result<()> {
    let h = q.nrows();
    let mut buf = Vec::new();
    let mut path = Path {
        start: 0,
        dt,
        jumps: Vec::new(),
    };
    for s in 0..h {
        let mut need: Vec<u64> = (0..h).map(|r| counts[(s, r)]).collect();
        let mut remaining: u64 = need.iter().sum();
        let mut misses = 0u64;
        while remaining > 0 {
            let alive = forward_path(q, s, dt, rng, &mut buf);
            counters.proposals += 1;
            let r = buf.last().map_or(s, |j| j.1);
            if alive && need[r] > 0 {
                need[r] -= 1;
                remaining -= 1;
                misses = 0;
                counters.accepted += 1;
                path.start = s;
                std::mem::swap(&mut path.jumps, &mut buf);
                sink(s, r, &path);
                std::mem::swap(&mut path.jumps, &mut buf);
            } else {
                misses += 1;
                if misses >= budget {
                    let to = (0..h).find(|&r| need[r] > 0).unwrap_or(s);
                    return Err(Error::RejectionBudgetExceeded {
                        from: s,
                        to,
                        attempts: budget,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Draws a generator from `Γ(K_ij + α_ij, 1/(S_i + β_i))` entrywise. The
/// last (absorbing) row stays zero, as do entries whose shape is zero.
pub fn gamma_update<R: Rng>(stats: &PathStats, prior: &GammaPrior, rng: &mut R) -> Result<GeneratorMatrix> {
    let h = prior.dim();
    let mut q = DMatrix::zeros(h, h);
    for i in 0..h - 1 {
        let rate = stats.holds[i] + prior.beta[i];
        for j in 0..h {
            if i == j {
                continue;
            }
            let shape = stats.jumps[(i, j)] + prior.alpha[(i, j)];
            if shape <= 0.0 {
                continue;
            }
            if rate <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "improper posterior for row {}: no holding time and zero prior rate",
                    i + 1
                )));
            }
            let g = Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::InvalidArgument(format!("gamma draw: {e}")))?;
            q[(i, j)] = g.sample(rng);
        }
    }
    GeneratorMatrix::from_rates(q)
}

/// Draw from the prior.
pub fn prior_draw<R: Rng>(prior: &GammaPrior, rng: &mut R) -> Result<GeneratorMatrix> {
    gamma_update(&PathStats::zeros(prior.dim()), prior, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum McmcMethod {
    Gibbs,
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McmcChain {
    pub method: McmcMethod,
    pub samples: Vec<GeneratorMatrix>,
    /// Per sweep, the smallest effective-sample-size fraction over
    /// endpoint groups (importance sampling only).
    pub weights: Option<Vec<f64>>,
    pub counters: SweepCounters,
    /// Sweeps whose weights were degenerate (ESS below 1% of draws).
    pub degenerate_sweeps: usize,
    pub burn_in: usize,
}

impl McmcChain {
    pub fn kept(&self) -> &[GeneratorMatrix] {
        &self.samples[self.burn_in.min(self.samples.len())..]
    }

    /// Mean of the post-burn-in samples.
    pub fn mean(&self) -> Result<GeneratorMatrix> {
        let kept = self.kept();
        let Some(first) = kept.first() else {
            return Err(Error::InvalidArgument("no samples after burn-in".into()));
        };
        let h = first.dim();
        let sum = kept.iter().fold(DMatrix::zeros(h, h), |acc, q| acc + q.matrix());
        GeneratorMatrix::from_rates(sum / kept.len() as f64)
    }
}

fn integer_counts(obs: &ObservationSet) -> Result<DMatrix<u64>> {
    let n = obs.total_counts();
    if n.iter().any(|x| x.fract() != 0.0) {
        return Err(Error::InvalidObservations(
            "path sampling needs integer transition counts".into(),
        ));
    }
    Ok(n.map(|x| x as u64))
}

struct Clock {
    start: Instant,
    cfg_first: Option<Duration>,
    cfg_total: Option<Duration>,
}

impl Clock {
    fn check(&self, sweep: usize) -> Result<()> {
        let el = self.start.elapsed();
        if sweep == 10 {
            if let Some(b) = self.cfg_first {
                if el > b {
                    return Err(Error::TimeBudgetExceeded(format!(
                        "first 10 runs took {:.1} s (cap {:.1} s)",
                        el.as_secs_f64(),
                        b.as_secs_f64()
                    )));
                }
            }
        }
        if let Some(b) = self.cfg_total {
            if el > b {
                return Err(Error::TimeBudgetExceeded(format!(
                    "{sweep} runs took {:.1} s (cap {:.1} s)",
                    el.as_secs_f64(),
                    b.as_secs_f64()
                )));
            }
        }
        Ok(())
    }
}

fn check_prior(obs: &ObservationSet, prior: &GammaPrior) -> Result<()> {
    if prior.dim() != obs.dim() {
        return Err(Error::DimensionError(format!(
            "prior has {} states, observations {}",
            prior.dim(),
            obs.dim()
        )));
    }
    Ok(())
}

/// Gibbs sampler with rejection-sampled latent paths. Returns the posterior
/// mean after burn-in together with the chain.
pub fn gibbs_estimate(
    obs: &ObservationSet,
    prior: &GammaPrior,
    cfg: &McmcConfig,
) -> Result<(GeneratorMatrix, McmcChain)> {
    let chain = gibbs_chain(obs, prior, cfg)?;
    Ok((chain.mean()?, chain))
}

pub fn gibbs_chain(obs: &ObservationSet, prior: &GammaPrior, cfg: &McmcConfig) -> Result<McmcChain> {
    cfg.validate()?;
    check_prior(obs, prior)?;
    let counts = integer_counts(obs)?;
    let dt = obs.dt();
    let h = obs.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clock = Clock {
        start: Instant::now(),
        cfg_first: cfg.first_runs_budget,
        cfg_total: cfg.total_budget,
    };
    let mut q = prior_draw(prior, &mut rng)?;
    let mut samples = Vec::with_capacity(cfg.runs);
    let mut counters = SweepCounters::default();
    let mut stats = PathStats::zeros(h);
    for sweep in 0..cfg.runs {
        stats.jumps.fill(0.0);
        stats.holds.fill(0.0);
        draw_paths(q.matrix(), &counts, dt, cfg.max_rejection_attempts, &mut rng, &mut counters, |_, _, p| {
            p.add_to(&mut stats, 1.0)
        })?;
        q = gamma_update(&stats, prior, &mut rng)?;
        samples.push(q.clone());
        clock.check(sweep + 1)?;
    }
    Ok(McmcChain {
        method: McmcMethod::Gibbs,
        samples,
        weights: None,
        counters,
        degenerate_sweeps: 0,
        burn_in: cfg.burn_in,
    })
}

/// Which neutral matrix the importance sampler proposes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NeutralForm {
    /// Uniform off-diagonal rates `1/W` with the diagonal rebalanced.
    #[default]
    Balanced,
    /// The literal `(1/W)(𝟙 − I − hI)`: diagonal `-h/W`, so rows sum to
    /// `-1/W` and proposals are killed at that rate. Kept for comparison.
    Literal,
}

/// The neutral proposal for `q`. Zero entries of `q` stay zero and the
/// absorbing row is kept. `1/W` is set so that the mean row intensity
/// matches that of `q` over non-absorbing rows.
pub fn neutral_matrix(q: &GeneratorMatrix, form: NeutralForm) -> DMatrix<f64> {
    let h = q.dim();
    let rows = h - 1;
    let mean_intensity: f64 = (0..rows).map(|i| q.intensity(i)).sum::<f64>() / rows as f64;
    let nnz: usize = (0..rows)
        .map(|i| (0..h).filter(|&j| j != i && q.rate(i, j) > 0.0).count())
        .sum();
    let mean_nnz = nnz as f64 / rows as f64;
    let inv_w = if mean_nnz > 0.0 { mean_intensity / mean_nnz } else { 0.0 };
    let mut m = DMatrix::zeros(h, h);
    for i in 0..rows {
        let mut k = 0.0;
        for j in 0..h {
            if j != i && q.rate(i, j) > 0.0 {
                m[(i, j)] = inv_w;
                k += 1.0;
            }
        }
        m[(i, i)] = match form {
            NeutralForm::Balanced => -k * inv_w,
            NeutralForm::Literal => -(h as f64) * inv_w,
        };
    }
    m
}

/// Importance-weight `L(Q; X) / L(Q*; X)` of a path.
pub fn importance_weight(path: &Path, q: &DMatrix<f64>, q_star: &DMatrix<f64>) -> f64 {
    (path.log_likelihood(q) - path.log_likelihood(q_star)).exp()
}

/// Importance sampler: paths are proposed under the neutral matrix of the
/// current iterate and reweighted, within each endpoint group, towards the
/// current iterate. Weighted statistics feed the Gamma update.
pub fn importance_estimate(
    obs: &ObservationSet,
    prior: &GammaPrior,
    cfg: &McmcConfig,
) -> Result<(GeneratorMatrix, McmcChain)> {
    let chain = importance_chain(obs, prior, cfg, NeutralForm::Balanced)?;
    Ok((chain.mean()?, chain))
}

pub fn importance_chain(
    obs: &ObservationSet,
    prior: &GammaPrior,
    cfg: &McmcConfig,
    form: NeutralForm,
) -> Result<McmcChain> {
    cfg.validate()?;
    check_prior(obs, prior)?;
    let counts = integer_counts(obs)?;
    let dt = obs.dt();
    let h = obs.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clock = Clock {
        start: Instant::now(),
        cfg_first: cfg.first_runs_budget,
        cfg_total: cfg.total_budget,
    };
    let mut q = prior_draw(prior, &mut rng)?;
    let mut samples = Vec::with_capacity(cfg.runs);
    let mut ess_trace = Vec::with_capacity(cfg.runs);
    let mut counters = SweepCounters::default();
    let mut degenerate = 0;
    // Per endpoint group: weighted sums of stats, sum of weights and of
    // squared weights.
    let mut groups: Vec<(PathStats, f64, f64)> = (0..h * h).map(|_| (PathStats::zeros(h), 0.0, 0.0)).collect();
    let mut logw: Vec<Vec<(f64, Path)>> = vec![Vec::new(); h * h];
    for sweep in 0..cfg.runs {
        let q_star = neutral_matrix(&q, form);
        let qm = q.matrix().clone();
        for g in logw.iter_mut() {
            g.clear();
        }
        draw_paths(&q_star, &counts, dt, cfg.max_rejection_attempts, &mut rng, &mut counters, |s, r, p| {
            let lw = p.log_likelihood(&qm) - p.log_likelihood(&q_star);
            logw[s * h + r].push((lw, p.clone()));
        })?;
        let mut stats = PathStats::zeros(h);
        let mut min_ess: f64 = 1.0;
        for (k, g) in logw.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            // Stabilise before exponentiating; the group normalisation
            // cancels the shift.
            let top = g.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            let (acc, sw, sw2) = &mut groups[k];
            acc.jumps.fill(0.0);
            acc.holds.fill(0.0);
            *sw = 0.0;
            *sw2 = 0.0;
            for (lw, p) in g {
                let w = (lw - top).exp();
                p.add_to(acc, w);
                *sw += w;
                *sw2 += w * w;
            }
            let n = g.len() as f64;
            let scale = n / *sw;
            stats.jumps += &acc.jumps * scale;
            stats.holds += &acc.holds * scale;
            min_ess = min_ess.min(*sw * *sw / *sw2 / n);
        }
        if min_ess < 0.01 {
            degenerate += 1;
        }
        ess_trace.push(min_ess);
        q = gamma_update(&stats, prior, &mut rng)?;
        samples.push(q.clone());
        clock.check(sweep + 1)?;
    }
    if degenerate > 0 {
        log::warn!("{degenerate} of {} sweeps had degenerate importance weights", cfg.runs);
    }
    Ok(McmcChain {
        method: McmcMethod::Importance,
        samples,
        weights: Some(ess_trace),
        counters,
        degenerate_sweeps: degenerate,
        burn_in: cfg.burn_in,
    })
}

pub const MODE_GRID: usize = 512;

/// Mode of a Gaussian kernel density estimate of `ln x` with Silverman's
/// bandwidth, mapped back by `exp`. `None` for empty input or when a
/// sample is not positive.
pub fn log_kde_mode(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() || xs.iter().any(|x| !(*x > 0.0)) {
        return None;
    }
    let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let sd = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = logs.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| {
        let pos = p * (n - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread * n.powf(-0.2);
    if !(bw > 0.0) {
        return Some(mean.exp());
    }
    let lo = sorted[0] - 3.0 * bw;
    let hi = sorted[sorted.len() - 1] + 3.0 * bw;
    let step = (hi - lo) / (MODE_GRID - 1) as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..MODE_GRID {
        let x = lo + k as f64 * step;
        let d: f64 = logs.iter().map(|l| (-0.5 * ((x - l) / bw).powi(2)).exp()).sum();
        if d > best.0 {
            best = (d, x);
        }
    }
    Some(best.1.exp())
}

/// Entrywise posterior mode of a chain's post-burn-in samples. Returns the
/// estimate and the entries that fell back to the sample mean because some
/// sample was zero.
pub fn mode_from_chain(chain: &McmcChain) -> Result<(GeneratorMatrix, Vec<(usize, usize)>)> {
    let kept = chain.kept();
    let Some(first) = kept.first() else {
        return Err(Error::InvalidArgument("no samples after burn-in".into()));
    };
    let h = first.dim();
    let mut q = DMatrix::zeros(h, h);
    let mut fallback = Vec::new();
    let mut xs = Vec::with_capacity(kept.len());
    for i in 0..h - 1 {
        for j in 0..h {
            if i == j {
                continue;
            }
            xs.clear();
            xs.extend(kept.iter().map(|s| s.rate(i, j)));
            if xs.iter().all(|x| *x == 0.0) {
                continue;
            }
            q[(i, j)] = match log_kde_mode(&xs) {
                Some(m) => m,
                None => {
                    fallback.push((i, j));
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
        }
    }
    Ok((GeneratorMatrix::from_rates(q)?, fallback))
}

/// Posterior-mode estimator over a Gibbs chain.
pub fn mode_estimate(
    obs: &ObservationSet,
    prior: &GammaPrior,
    cfg: &McmcConfig,
) -> Result<(GeneratorMatrix, McmcChain)> {
    let chain = gibbs_chain(obs, prior, cfg)?;
    let (q, fallback) = mode_from_chain(&chain)?;
    if !fallback.is_empty() {
        log::info!("mode fell back to the mean for {} entries", fallback.len());
    }
    Ok((q, chain))
}
