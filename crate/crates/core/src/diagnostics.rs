//! Pullback evaluation and the statistics of weak synchronization:
//! synchronization curves, equilibrium clouds, invariant-measure sampling,
//! interval concentration, law distances and order-preservation trials.
//!
//! Monte Carlo loops run path-parallel. Path `i` of a run seeded with `seed`
//! is driven by noise seeded with [`derive_seed`]`(seed, i)`, and results are
//! collected in path order, so outputs do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::{CocycleEngine, EngineConfig, EngineError, EngineKind, State, StateOrder};
use crate::grid::{laplacian_apply, GridError, GridFunction, GridSpec, Norm};
use crate::noise::{NoiseError, NoisePath};
use crate::orders::{Interval, OrderError, OrderKind, OrderRelation};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Order(#[from] OrderError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("starting points are not ordered under the engine's order; enable arbitrary-pair mode to compare unordered points")]
    Unordered,
    #[error("the fBm engine is not driven by white noise; use the Cesaro estimator instead")]
    NotWhiteNoise,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample shapes differ")]
    ShapeMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl DiagnosticsError {
    pub fn is_numerical(&self) -> bool {
        match self {
            DiagnosticsError::Engine(e) => e.is_numerical(),
            DiagnosticsError::Noise(NoiseError::NegativeEigenvalue { .. } | NoiseError::ValueRange(_)) => true,
            _ => false,
        }
    }
}

type Result<T> = std::result::Result<T, DiagnosticsError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(DiagnosticsError::InvalidArgument(msg.into()))
}

/// `φ_T(θ_{−T}ω, x)`: evolve from `−T` to `0` on a path covering `[−T, 0]`.
pub fn pullback(engine: &CocycleEngine, path: &NoisePath, x: &State, horizon: f64) -> Result<State> {
    if !(horizon >= 0.0) {
        return invalid(format!("pullback horizon {horizon} must be nonnegative"));
    }
    Ok(engine.evolve(path, x, -horizon, 0.0)?)
}

/// Two-sided 95% Wilson score interval for `successes / n`.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub t: f64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_paths: usize,
}

/// Estimated `P(d(φ_t x, φ_t y) > ε)` over a list of times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncCurve {
    pub epsilon: f64,
    pub rows: Vec<SyncRow>,
}

impl SyncCurve {
    /// Builds the curve from per-time, per-path distances.
    pub fn from_distances(epsilon: f64, times: &[f64], distances: &[Vec<f64>]) -> SyncCurve {
        let rows = times
            .iter()
            .zip(distances)
            .map(|(&t, ds)| {
                let hits = ds.iter().filter(|d| **d > epsilon).count();
                let (ci_low, ci_high) = wilson_interval(hits, ds.len());
                SyncRow { t, p_hat: hits as f64 / ds.len() as f64, ci_low, ci_high, n_paths: ds.len() }
            })
            .collect();
        SyncCurve { epsilon, rows }
    }

    pub fn p_hat_at(&self, t: f64) -> Option<f64> {
        self.rows.iter().find(|r| (r.t - t).abs() <= 1e-9 * t.abs().max(1.0)).map(|r| r.p_hat)
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return invalid("empty time list");
    }
    if times[0] < 0.0 || times.windows(2).any(|w| !(w[0] < w[1])) {
        return invalid("times must be nonnegative and strictly increasing");
    }
    Ok(())
}

/// `d(φ_t(ω_i, x), φ_t(ω_i, y))` for every time in `times` and every path
/// `i < n_paths`, indexed `[time][path]`.
pub fn sync_distances(
    engine: &CocycleEngine,
    x: &State,
    y: &State,
    times: &[f64],
    n_paths: usize,
    seed: u64,
    arbitrary_pair: bool,
) -> Result<Vec<Vec<f64>>> {
    check_times(times)?;
    if n_paths == 0 {
        return invalid("n_paths must be positive");
    }
    engine.check_state(x)?;
    engine.check_state(y)?;
    if !arbitrary_pair && !engine.natural_order().leq(x, y)? {
        return Err(DiagnosticsError::Unordered);
    }
    let t_max = *times.last().unwrap();
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(times.len());
            let (mut a, mut b) = (x.clone(), y.clone());
            if t_max == 0.0 {
                return Ok(vec![engine.distance(&a, &b)]);
            }
            let path = engine.noise(derive_seed(seed, i as u64), 0.0, t_max)?;
            let mut t_prev = 0.0;
            for &t in times {
                a = engine.evolve(&path, &a, t_prev, t)?;
                b = engine.evolve(&path, &b, t_prev, t)?;
                out.push(engine.distance(&a, &b));
                t_prev = t;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..times.len()).map(|k| per_path.iter().map(|row| row[k]).collect()).collect())
}

/// Synchronization curve with Wilson intervals. Requires `x ≤ y` under the
/// engine's natural order unless `arbitrary_pair` is set.
#[allow(clippy::too_many_arguments)]
pub fn sync_curve(
    engine: &CocycleEngine,
    x: &State,
    y: &State,
    epsilon: f64,
    times: &[f64],
    n_paths: usize,
    seed: u64,
    arbitrary_pair: bool,
) -> Result<SyncCurve> {
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    let d = sync_distances(engine, x, y, times, n_paths, seed, arbitrary_pair)?;
    Ok(SyncCurve::from_distances(epsilon, times, &d))
}

/// Samples of the invariant measure from one long trajectory: discard
/// `[0, burn_in]`, then record every `gap`. Segment `k` of the trajectory
/// runs on noise seeded with `derive_seed(seed, k)`.
pub fn invariant_sampler(
    engine: &CocycleEngine,
    x0: &State,
    burn_in: f64,
    n: usize,
    gap: f64,
    seed: u64,
) -> Result<Vec<State>> {
    if !(burn_in > 0.0 && gap > 0.0) {
        return invalid("burn_in and gap must be positive");
    }
    let burn = engine.noise(derive_seed(seed, 0), 0.0, burn_in)?;
    let mut x = engine.evolve(&burn, x0, 0.0, burn_in)?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let p = engine.noise(derive_seed(seed, k as u64 + 1), 0.0, gap)?;
        x = engine.evolve(&p, &x, 0.0, gap)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Time average of `‖X‖_{L^{m+1}}^{m+1}` along an spme trajectory, and the
/// energy-balance bound `‖x₀‖²_{H⁻¹}/t + tr_{H⁻¹}(Q)` it should respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    pub horizon: f64,
    pub average: f64,
    pub initial_term: f64,
    pub trace: f64,
}

impl EnergyCheck {
    pub fn bound(&self, margin: f64) -> f64 {
        self.initial_term + self.trace * (1.0 + margin)
    }
}

pub fn spme_energy_average(engine: &CocycleEngine, x0: &GridFunction, horizon: f64, seed: u64) -> Result<EnergyCheck> {
    let EngineConfig::Spme(cfg) = engine.config() else {
        return invalid("energy average is defined for the spme engine only");
    };
    let path = engine.noise(seed, 0.0, horizon)?;
    let dt = engine.dt();
    let p = cfg.m + 1.0;
    let mut x = State::Field(x0.clone());
    let mut acc = 0.0;
    for k in 0..path.steps() {
        let t = k as f64 * dt;
        x = engine.evolve(&path, &x, t, t + dt)?;
        acc += dt * x.as_field().unwrap().norm(Norm::Lp(p))?.powf(p);
    }
    Ok(EnergyCheck {
        horizon,
        average: acc / horizon,
        initial_term: x0.norm(Norm::Hminus1)?.powi(2) / horizon,
        trace: cfg.hminus1_trace(),
    })
}

/// A weighted cloud of states approximating a random measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCloud {
    pub states: Vec<State>,
    pub weights: Vec<f64>,
    pub t_pullback: f64,
    pub diameter: f64,
}

impl EquilibriumCloud {
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Largest pairwise distance under the engine metric.
pub fn diameter(engine: &CocycleEngine, states: &[State]) -> f64 {
    if states.len() < 2 {
        return 0.0;
    }
    if engine.kind() != EngineKind::Torus {
        if let Some(xs) = states.iter().map(State::as_scalar).collect::<Option<Vec<f64>>>() {
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return hi - lo;
        }
    }
    (0..states.len())
        .into_par_iter()
        .map(|i| states[i + 1..].iter().map(|s| engine.distance(&states[i], s)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
}

/// `φ_T(θ_{−T}ω)_* μ̂`: the pullback image of the sample cloud.
pub fn equilibrium_pushforward(
    engine: &CocycleEngine,
    path: &NoisePath,
    mu_samples: &[State],
    horizon: f64,
) -> Result<EquilibriumCloud> {
    if !engine.kind().is_white_noise() {
        return Err(DiagnosticsError::NotWhiteNoise);
    }
    if mu_samples.is_empty() {
        return Err(DiagnosticsError::TooFewSamples { need: 1, got: 0 });
    }
    let states: Vec<State> =
        mu_samples.par_iter().map(|x| pullback(engine, path, x, horizon)).collect::<Result<_>>()?;
    let w = 1.0 / states.len() as f64;
    Ok(EquilibriumCloud {
        diameter: diameter(engine, &states),
        weights: vec![w; states.len()],
        states,
        t_pullback: horizon,
    })
}

/// Discrete Cesàro average `(1/|R|) Σ_{r∈R} φ_r(θ_{−r}ω)_* μ̂`, returned as a
/// cloud with uniform weight over `(r, sample)` pairs, plus the weighted
/// fraction of the cloud inside `interval` when one is supplied.
pub fn equilibrium_cesaro(
    engine: &CocycleEngine,
    path: &NoisePath,
    mu_samples: &[State],
    r_grid: &[f64],
    interval: Option<&Interval>,
) -> Result<(EquilibriumCloud, Option<f64>)> {
    if r_grid.is_empty() {
        return invalid("empty r_grid");
    }
    if r_grid.iter().any(|r| !(*r > 0.0)) {
        return invalid("Cesaro horizons must be positive");
    }
    if mu_samples.is_empty() {
        return Err(DiagnosticsError::TooFewSamples { need: 1, got: 0 });
    }
    let jobs: Vec<(f64, &State)> = r_grid.iter().flat_map(|&r| mu_samples.iter().map(move |x| (r, x))).collect();
    let states: Vec<State> = jobs.par_iter().map(|(r, x)| pullback(engine, path, x, *r)).collect::<Result<_>>()?;
    let w = 1.0 / states.len() as f64;
    let inside = match interval {
        Some(iv) => {
            let mut count = 0usize;
            for s in &states {
                if iv.contains(&state_as_grid(s))? {
                    count += 1;
                }
            }
            Some(count as f64 * w)
        }
        None => None,
    };
    let r_max = r_grid.iter().cloned().fold(0.0, f64::max);
    Ok((
        EquilibriumCloud { diameter: diameter(engine, &states), weights: vec![w; states.len()], states, t_pullback: r_max },
        inside,
    ))
}

/// Scalars become one-node grid functions so that the grid orders apply.
pub fn state_as_grid(s: &State) -> GridFunction {
    match s {
        State::Field(f) => f.clone(),
        State::Scalar(x) => {
            GridFunction::new(GridSpec::dirichlet(1.0, 1).expect("unit grid"), vec![*x]).expect("finite scalar state")
        }
    }
}

/// Interval fitted on half the samples and its coverage on the other half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalFit {
    pub interval: Interval,
    pub alpha: f64,
    pub coverage: f64,
    pub n_fit: usize,
    pub n_eval: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Builds `[f, g]` from nodal `alpha` / `1 − alpha` quantiles of the first
/// half of the samples, taken in the order's pointwise representation and
/// widened by one nodal standard deviation, then reports the fraction of
/// the second half contained in it.
pub fn interval_concentration(samples: &[State], order: OrderRelation, alpha: f64) -> Result<IntervalFit> {
    if samples.len() < 20 {
        return Err(DiagnosticsError::TooFewSamples { need: 20, got: samples.len() });
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return invalid(format!("alpha must lie in (0, 0.5), got {alpha}"));
    }
    let grids: Vec<GridFunction> = samples.iter().map(state_as_grid).collect();
    let spec = *grids[0].spec();
    if grids.iter().any(|g| g.spec() != &spec) {
        return Err(DiagnosticsError::ShapeMismatch);
    }
    let reps: Vec<GridFunction> = grids.iter().map(|g| order.represent(g)).collect::<std::result::Result<_, _>>()?;
    let n_fit = samples.len() / 2;
    let fit = &reps[..n_fit];
    let mut lower = vec![0.0; spec.n];
    let mut upper = vec![0.0; spec.n];
    for j in 0..spec.n {
        let mut col: Vec<f64> = fit.iter().map(|r| r.values()[j]).collect();
        col.sort_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
        lower[j] = quantile_sorted(&col, alpha) - sd;
        upper[j] = quantile_sorted(&col, 1.0 - alpha) + sd;
    }
    let lower = order.unrepresent(&GridFunction::new(spec, lower)?);
    let upper = order.unrepresent(&GridFunction::new(spec, upper)?);
    let interval = Interval::new(lower, upper, order)?;
    let eval = &grids[n_fit..];
    let mut hits = 0usize;
    for g in eval {
        if interval.contains(g)? {
            hits += 1;
        }
    }
    Ok(IntervalFit { interval, alpha, coverage: hits as f64 / eval.len() as f64, n_fit, n_eval: eval.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawMetric {
    /// Two-sample Kolmogorov–Smirnov statistic (scalar states).
    KsScalar,
    /// Energy distance under the grid `L²` norm (`|·|` for scalars).
    EnergyGrid,
}

/// 5% critical value `1.36·√((n+m)/(nm))` of the two-sample KS test.
pub fn ks_critical_5pct(n: usize, m: usize) -> f64 {
    1.36 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0_f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn law_distance(a: &[State], b: &[State], metric: LawMetric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::TooFewSamples { need: 1, got: 0 });
    }
    let shape = |s: &State| match s {
        State::Scalar(_) => None,
        State::Field(f) => Some(*f.spec()),
    };
    let s0 = shape(&a[0]);
    if a.iter().chain(b).any(|s| shape(s) != s0) {
        return Err(DiagnosticsError::ShapeMismatch);
    }
    match metric {
        LawMetric::KsScalar => {
            let xa: Option<Vec<f64>> = a.iter().map(State::as_scalar).collect();
            let xb: Option<Vec<f64>> = b.iter().map(State::as_scalar).collect();
            match (xa, xb) {
                (Some(xa), Some(xb)) => Ok(ks_statistic(&xa, &xb)),
                _ => Err(DiagnosticsError::ShapeMismatch),
            }
        }
        LawMetric::EnergyGrid => {
            let dist = |x: &State, y: &State| -> f64 {
                match (x, y) {
                    (State::Scalar(p), State::Scalar(q)) => (p - q).abs(),
                    (State::Field(p), State::Field(q)) => {
                        p.sub(q).and_then(|d| d.norm(Norm::L2)).unwrap_or(f64::INFINITY)
                    }
                    _ => f64::INFINITY,
                }
            };
            let mean_cross = |u: &[State], v: &[State]| -> f64 {
                u.par_iter().map(|x| v.iter().map(|y| dist(x, y)).sum::<f64>()).sum::<f64>()
                    / (u.len() * v.len()) as f64
            };
            let e = 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
            Ok(e.max(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `φ_t(ω, x)` on noise over `[0, t]`.
    Forward,
    /// `φ_t(θ_{−t}ω, x)` on noise over `[−t, 0]`.
    Pullback,
}

/// `n` independent samples of the law of `φ_t(·, x)`.
pub fn sample_law(
    engine: &CocycleEngine,
    x: &State,
    t: f64,
    n: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<State>> {
    if !(t > 0.0) {
        return invalid("sampling time must be positive");
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            Ok(match mode {
                SamplingMode::Forward => engine.evolve(&engine.noise(s, 0.0, t)?, x, 0.0, t)?,
                SamplingMode::Pullback => pullback(engine, &engine.noise(s, -t, 0.0)?, x, t)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest amount by which an evolved pair failed to be ordered.
    pub worst: f64,
    pub tol: f64,
}

impl ViolationReport {
    pub fn rate(&self) -> f64 {
        self.violations as f64 / self.trials.max(1) as f64
    }
}

/// Random ordered pair for trial `i`: `y` is `x` plus a perturbation that is
/// nonnegative in the order's representation.
fn ordered_pair(engine: &CocycleEngine, order: &StateOrder, seed: u64) -> Result<(State, State)> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 1);
    match (engine.config(), order) {
        (EngineConfig::Torus, StateOrder::Trivial) => {
            let x = State::Scalar(rng.random_range(0.0..1.0));
            Ok((x.clone(), x))
        }
        (EngineConfig::Reflected(c), StateOrder::Real { .. }) => {
            let x: f64 = rng.random_range(c.lower..=c.upper);
            let y = (x + rng.random_range(0.0..0.5) * (c.upper - c.lower)).min(c.upper);
            Ok((State::Scalar(x), State::Scalar(y)))
        }
        (EngineConfig::Ou(_) | EngineConfig::FbmSde(_), StateOrder::Real { .. }) => {
            let x: f64 = rng.random_range(-3.0..3.0);
            Ok((State::Scalar(x), State::Scalar(x + rng.random_range(0.0..1.0))))
        }
        (EngineConfig::Spme(c), StateOrder::Grid(o)) => {
            let l = c.grid.length;
            let amps: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = c.grid.from_fn(|s| {
                amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * std::f64::consts::PI * s / l).sin()).sum()
            });
            let x = x.map(|v| v + rng.random_range(-0.5..0.5));
            let y = match o.kind {
                OrderKind::PointwiseLeq => x.map(|v| v + rng.random_range(0.0..0.5)),
                OrderKind::DualPreceq => {
                    let h2 = c.grid.h().powi(2);
                    let p = GridFunction::new(c.grid, (0..c.grid.n).map(|_| h2 * rng.random_range(0.0..1.0)).collect())?;
                    x.sub(&laplacian_apply(&p))?
                }
            };
            Ok((State::Field(x), State::Field(y)))
        }
        (EngineConfig::TwoWall(c), StateOrder::Grid(o)) if o.kind == OrderKind::PointwiseLeq => {
            let (lo, hi) = (c.lower.values(), c.upper.values());
            let x: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| a + rng.random_range(0.0..1.0) * (b - a)).collect();
            let y: Vec<f64> = x.iter().zip(hi).map(|(v, b)| v + rng.random_range(0.0..1.0) * (b - v)).collect();
            Ok((State::Field(GridFunction::new(c.grid, x)?), State::Field(GridFunction::new(c.grid, y)?)))
        }
        _ => invalid(format!("no ordered-pair generator for the {} engine with {order:?}", engine.kind().name())),
    }
}

/// Evolves each supplied pair on its own path over `[0, t_horizon]` and
/// counts pairs whose images fail `order` at its tolerance.
pub fn order_preservation_on_pairs(
    engine: &CocycleEngine,
    order: StateOrder,
    pairs: &[(State, State)],
    t_horizon: f64,
    seed: u64,
) -> Result<ViolationReport> {
    if pairs.is_empty() {
        return invalid("need at least one trial");
    }
    let worst: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| -> Result<f64> {
            let path = engine.noise(derive_seed(seed, i as u64), 0.0, t_horizon)?;
            let a = engine.evolve(&path, x, 0.0, t_horizon)?;
            let b = engine.evolve(&path, y, 0.0, t_horizon)?;
            Ok(order.violation(&a, &b)?)
        })
        .collect::<Result<_>>()?;
    let tol = order.tol();
    Ok(ViolationReport {
        trials: pairs.len(),
        violations: worst.iter().filter(|v| **v > tol).count(),
        worst: worst.iter().cloned().fold(0.0, f64::max),
        tol,
    })
}

/// [`order_preservation_on_pairs`] on `trials` seeded random ordered pairs.
pub fn order_preservation_test(
    engine: &CocycleEngine,
    order: StateOrder,
    trials: usize,
    t_horizon: f64,
    seed: u64,
) -> Result<ViolationReport> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let pairs: Vec<(State, State)> =
        (0..trials).map(|i| ordered_pair(engine, &order, derive_seed(seed ^ 0x0DE5, i as u64))).collect::<Result<_>>()?;
    order_preservation_on_pairs(engine, order, &pairs, t_horizon, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorEstimate {
    pub a_hat: State,
    pub spread: f64,
    pub t_pullback: f64,
    pub path_seed: Option<u64>,
}

/// Pulls back every initial state over horizon `T`; `a_hat` is the image of
/// the middle element and `spread` the diameter of all images.
pub fn attractor_estimate(
    engine: &CocycleEngine,
    path: &NoisePath,
    init_set: &[State],
    horizon: f64,
) -> Result<AttractorEstimate> {
    if init_set.is_empty() {
        return Err(DiagnosticsError::TooFewSamples { need: 1, got: 0 });
    }
    let images: Vec<State> = init_set.par_iter().map(|x| pullback(engine, path, x, horizon)).collect::<Result<_>>()?;
    Ok(AttractorEstimate {
        a_hat: images[images.len() / 2].clone(),
        spread: diameter(engine, &images),
        t_pullback: horizon,
        path_seed: path.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::OuConfig;

    fn ou(dt: f64) -> CocycleEngine {
        CocycleEngine::new(EngineConfig::Ou(OuConfig::default()), dt).unwrap()
    }

    #[test]
    fn pullback_zero_horizon_is_identity() {
        let e = ou(0.01);
        let p = e.noise(1, -1.0, 0.0).unwrap();
        assert_eq!(pullback(&e, &p, &State::Scalar(2.5), 0.0).unwrap(), State::Scalar(2.5));
    }

    #[test]
    fn ou_pullback_contraction_ratio() {
        let e = ou(1e-4);
        let p = e.noise(3, -5.0, 0.0).unwrap();
        let a = pullback(&e, &p, &State::Scalar(1.0), 5.0).unwrap().as_scalar().unwrap();
        let b = pullback(&e, &p, &State::Scalar(-1.0), 5.0).unwrap().as_scalar().unwrap();
        let ratio = (a - b) / 2.0;
        let exact = (-5.0f64).exp();
        assert!((ratio - exact).abs() <= 0.02 * exact + 1e-6);
    }

    #[test]
    fn ou_pullback_matches_stochastic_integral() {
        let dt = 1e-3;
        let e = ou(dt);
        for seed in 0..5 {
            let p = e.noise(seed, -10.0, 0.0).unwrap();
            let a = pullback(&e, &p, &State::Scalar(0.0), 10.0).unwrap().as_scalar().unwrap();
            // a(ω) ≈ Σ e^{s_{k+1}} ΔW_k
            let oracle: f64 = (0..p.steps())
                .map(|k| (p.t_start() + (k + 1) as f64 * dt).exp() * (p.row(k + 1)[0] - p.row(k)[0]))
                .sum();
            assert!((a - oracle).abs() <= 5e-3, "seed {seed}: {a} vs {oracle}");
        }
    }

    #[test]
    fn wilson_bounds() {
        for (k, n) in [(0, 10), (10, 10), (3, 7), (250, 500)] {
            let (lo, hi) = wilson_interval(k, n);
            let p = k as f64 / n as f64;
            assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
        }
    }

    #[test]
    fn identical_starts_never_separate() {
        let e = ou(0.01);
        let c = sync_curve(&e, &State::Scalar(0.3), &State::Scalar(0.3), 0.01, &[0.5, 1.0], 20, 1, false).unwrap();
        assert!(c.rows.iter().all(|r| r.p_hat == 0.0));
    }

    #[test]
    fn ou_sync_threshold() {
        let e = ou(1e-3);
        let c = sync_curve(&e, &State::Scalar(0.0), &State::Scalar(1.0), 0.1, &[1.0, 4.0], 50, 9, false).unwrap();
        assert_eq!(c.p_hat_at(1.0), Some(1.0));
        assert_eq!(c.p_hat_at(4.0), Some(0.0));
    }

    #[test]
    fn sync_rejects_unordered_and_bad_times() {
        let e = ou(0.01);
        let (a, b) = (State::Scalar(1.0), State::Scalar(0.0));
        assert_eq!(sync_curve(&e, &a, &b, 0.1, &[1.0], 5, 1, false), Err(DiagnosticsError::Unordered));
        assert!(sync_curve(&e, &a, &b, 0.1, &[1.0], 5, 1, true).is_ok());
        assert!(sync_curve(&e, &b, &a, 0.1, &[1.0, 0.5], 5, 1, false).is_err());
        assert!(sync_curve(&e, &b, &a, 0.0, &[1.0], 5, 1, false).is_err());
    }

    #[test]
    fn p_hat_monotone_in_epsilon() {
        let e = CocycleEngine::new(EngineConfig::Torus, 0.01).unwrap();
        let times = [1.0, 5.0, 10.0];
        let d = sync_distances(&e, &State::Scalar(0.3), &State::Scalar(0.7), &times, 100, 4, true).unwrap();
        for k in 0..times.len() {
            let mut last = 1.0;
            for eps in [0.001, 0.01, 0.05, 0.1, 0.3] {
                let p = SyncCurve::from_distances(eps, &times, &d).rows[k].p_hat;
                assert!(p <= last);
                last = p;
            }
        }
    }

    #[test]
    fn ou_invariant_law() {
        let e = ou(1e-2);
        let s = invariant_sampler(&e, &State::Scalar(0.0), 10.0, 1000, 1.0, 5).unwrap();
        let xs: Vec<f64> = s.iter().map(|x| x.as_scalar().unwrap()).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // lag-1 autocorrelation e^{-1} inflates the variance of the mean
        let n_eff = n * (1.0 - (-1.0f64).exp()) / (1.0 + (-1.0f64).exp());
        assert!(mean.abs() <= 4.0 * (0.5 / n_eff).sqrt(), "mean {mean}");
        assert!((var - 0.5).abs() <= 0.1, "var {var}");
    }

    #[test]
    fn torus_samples_stay_on_torus() {
        let e = CocycleEngine::new(EngineConfig::Torus, 0.01).unwrap();
        let s = invariant_sampler(&e, &State::Scalar(0.4), 1.0, 200, 0.5, 2).unwrap();
        assert!(s.iter().all(|x| (0.0..1.0).contains(&x.as_scalar().unwrap())));
    }

    #[test]
    fn pushforward_properties() {
        let dt = 1e-3;
        let e = ou(dt);
        let p = e.noise(7, -3.0, 0.0).unwrap();
        let mu: Vec<State> = (0..50).map(|i| State::Scalar(-2.0 + 0.08 * i as f64)).collect();
        let c0 = equilibrium_pushforward(&e, &p, &mu, 0.0).unwrap();
        assert_eq!(c0.states, mu);
        assert!((c0.diameter - diameter(&e, &mu)).abs() < 1e-15);
        let c3 = equilibrium_pushforward(&e, &p, &mu, 3.0).unwrap();
        assert!(c3.diameter <= (-3.0f64).exp() * c0.diameter + 10.0 * dt);
        let one = equilibrium_pushforward(&e, &p, &mu[..1], 3.0).unwrap();
        assert_eq!(one.diameter, 0.0);
        assert!((c3.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pushforward_rejects_fbm() {
        use crate::engines::{Drift, FbmConfig};
        let e = CocycleEngine::new(
            EngineConfig::FbmSde(FbmConfig { hurst: 0.7, drift: Drift::Linear { rate: 1.0 }, ode_substeps: 2 }),
            0.01,
        )
        .unwrap();
        let p = e.noise(1, -1.0, 0.0).unwrap();
        assert_eq!(
            equilibrium_pushforward(&e, &p, &[State::Scalar(0.0)], 1.0),
            Err(DiagnosticsError::NotWhiteNoise)
        );
    }

    #[test]
    fn cesaro_small_horizon_and_ou_bound() {
        let dt = 1e-3;
        let e = ou(dt);
        let p = e.noise(8, -4.0, 0.0).unwrap();
        let mu: Vec<State> = (0..30).map(|i| State::Scalar(-1.5 + 0.1 * i as f64)).collect();
        let d0 = diameter(&e, &mu);
        let (tiny, _) = equilibrium_cesaro(&e, &p, &mu, &[dt], None).unwrap();
        assert!((tiny.diameter - d0).abs() <= 2.0 * dt * d0);
        let (c, _) = equilibrium_cesaro(&e, &p, &mu, &[1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert_eq!(c.len(), 120);
        let (single, _) = equilibrium_cesaro(&e, &p, &mu, &[3.0], None).unwrap();
        assert_eq!(single.states, equilibrium_pushforward(&e, &p, &mu, 3.0).unwrap().states);
        assert!(equilibrium_cesaro(&e, &p, &mu, &[], None).is_err());
    }

    #[test]
    fn cesaro_interval_fraction() {
        let e = ou(0.01);
        let p = e.noise(8, -2.0, 0.0).unwrap();
        let mu: Vec<State> = (0..10).map(|i| State::Scalar(i as f64 * 0.1)).collect();
        let unit = GridSpec::dirichlet(1.0, 1).unwrap();
        let wide = Interval::new(
            GridFunction::new(unit, vec![-100.0]).unwrap(),
            GridFunction::new(unit, vec![100.0]).unwrap(),
            OrderRelation::pointwise(),
        )
        .unwrap();
        let (_, frac) = equilibrium_cesaro(&e, &p, &mu, &[1.0, 2.0], Some(&wide)).unwrap();
        assert_eq!(frac, Some(1.0));
    }

    #[test]
    fn interval_identical_samples() {
        let s = vec![State::Scalar(0.7); 40];
        let fit = interval_concentration(&s, OrderRelation::pointwise(), 0.05).unwrap();
        assert_eq!(fit.coverage, 1.0);
        assert_eq!((fit.n_fit, fit.n_eval), (20, 20));
        assert!(interval_concentration(&s[..10], OrderRelation::pointwise(), 0.05).is_err());
    }

    #[test]
    fn ou_interval_coverage() {
        let e = ou(1e-2);
        let s = invariant_sampler(&e, &State::Scalar(0.0), 10.0, 1000, 1.0, 11).unwrap();
        let fit = interval_concentration(&s, OrderRelation::pointwise(), 0.05).unwrap();
        assert!(fit.coverage >= 0.85, "coverage {}", fit.coverage);
    }

    #[test]
    fn ks_and_energy_basics() {
        let a: Vec<State> = (0..50).map(|i| State::Scalar((i as f64).sin())).collect();
        assert_eq!(law_distance(&a, &a, LawMetric::KsScalar).unwrap(), 0.0);
        assert_eq!(law_distance(&a, &a, LawMetric::EnergyGrid).unwrap(), 0.0);
        let zeros = vec![State::Scalar(0.0); 10];
        let ones = vec![State::Scalar(1.0); 10];
        assert_eq!(law_distance(&zeros, &ones, LawMetric::KsScalar).unwrap(), 1.0);
        let g = State::Field(GridSpec::dirichlet(1.0, 3).unwrap().zeros());
        assert_eq!(law_distance(&zeros, &[g.clone()], LawMetric::EnergyGrid), Err(DiagnosticsError::ShapeMismatch));
        assert_eq!(law_distance(&[g.clone()], &[g], LawMetric::EnergyGrid).unwrap(), 0.0);
    }

    #[test]
    fn ks_handles_ties() {
        assert_eq!(ks_statistic(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]), 1.0 / 3.0);
        assert!((ks_statistic(&[0.0, 1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ou_two_start_laws_merge() {
        let e = ou(1e-2);
        let a = sample_law(&e, &State::Scalar(-5.0), 10.0, 1000, 1, SamplingMode::Forward).unwrap();
        let b = sample_law(&e, &State::Scalar(5.0), 10.0, 1000, 2, SamplingMode::Forward).unwrap();
        assert!(law_distance(&a, &b, LawMetric::KsScalar).unwrap() < ks_critical_5pct(1000, 1000));
    }

    #[test]
    fn identical_pairs_never_violate() {
        let e = ou(0.01);
        let pairs: Vec<(State, State)> = (0..20).map(|i| (State::Scalar(i as f64 * 0.1), State::Scalar(i as f64 * 0.1))).collect();
        let r = order_preservation_on_pairs(&e, e.natural_order(), &pairs, 1.0, 3).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.worst, 0.0);
    }

    #[test]
    fn attractor_on_ou() {
        let dt = 1e-3;
        let e = ou(dt);
        let p = e.noise(2, -10.0, 0.0).unwrap();
        let single = attractor_estimate(&e, &p, &[State::Scalar(0.4)], 10.0).unwrap();
        assert_eq!(single.spread, 0.0);
        assert_eq!(single.path_seed, Some(2));
        let set = [State::Scalar(-1.0), State::Scalar(0.0), State::Scalar(1.0)];
        let est = attractor_estimate(&e, &p, &set, 10.0).unwrap();
        assert!(est.spread <= 2.0 * (-10.0f64).exp() + 10.0 * dt);
        assert!(attractor_estimate(&e, &p, &set, 11.0).is_err());
    }
}
