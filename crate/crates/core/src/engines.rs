//! Order-preserving cocycles.
//!
//! Every engine advances its state one noise step at a time through a map
//! that depends only on the current state and the noise increment of that
//! step. `evolve` is the composition of these maps, so the cocycle identity
//! and compatibility with [`NoisePath::shift`] hold exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{cyclic_solve, thomas, Boundary, GridError, GridFunction, GridSpec, Norm};
use crate::noise::{gen_brownian, gen_fbm, gen_q_wiener, NoiseError, NoiseKind, NoisePath, QSpec};
use crate::orders::{OrderError, OrderRelation, DEFAULT_TOL};
use crate::rng::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid time interval [{t0}, {t1}]")]
    InvalidTimes { t0: f64, t1: f64 },
    #[error("state outside the engine's state space: {0}")]
    OutsideDomain(String),
    #[error("noise path does not match engine: {0}")]
    PathMismatch(String),
    #[error("Newton and Gauss-Seidel both failed at step {step} (residual {residual:e})")]
    NewtonFailure { step: usize, residual: f64 },
    #[error("drift evaluation overflowed at step {step}")]
    DriftOverflow { step: usize },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Order(#[from] OrderError),
}

impl EngineError {
    /// Failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EngineError::NewtonFailure { .. }
                | EngineError::DriftOverflow { .. }
                | EngineError::Noise(NoiseError::NegativeEigenvalue { .. })
                | EngineError::Noise(NoiseError::ValueRange(_))
        )
    }
}

/// Scalar drift `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Drift {
    /// `b(x) = −rate·x`
    Linear { rate: f64 },
    /// `b(x) = x − x³`
    DoubleWell,
    /// `b(x) = Σ coeffs[k]·x^k`
    Polynomial { coeffs: Vec<f64> },
    /// Piecewise-linear through `(knots[i], values[i])`, constant outside.
    Table { knots: Vec<f64>, values: Vec<f64> },
}

impl Drift {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        match self {
            Drift::Linear { rate } if !rate.is_finite() => bad(format!("linear drift rate {rate}")),
            Drift::Polynomial { coeffs } if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) => {
                bad("polynomial drift needs finite coefficients".into())
            }
            Drift::Table { knots, values } => {
                if knots.is_empty() || knots.len() != values.len() {
                    return bad("table drift needs equally many knots and values".into());
                }
                if knots.windows(2).any(|w| !(w[0] < w[1])) || knots.iter().chain(values).any(|v| !v.is_finite()) {
                    return bad("table knots must be finite and strictly increasing".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Drift::Linear { rate } => -rate * x,
            Drift::DoubleWell => x - x * x * x,
            Drift::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            Drift::Table { knots, values } => {
                let n = knots.len();
                if x <= knots[0] {
                    return values[0];
                }
                if x >= knots[n - 1] {
                    return values[n - 1];
                }
                let i = knots.partition_point(|k| *k <= x) - 1;
                let w = (x - knots[i]) / (knots[i + 1] - knots[i]);
                values[i] + w * (values[i + 1] - values[i])
            }
        }
    }

    /// Lipschitz constant of `b` on `[a, b]` (exact for linear and table
    /// drifts, a dense-grid estimate otherwise).
    pub fn lipschitz_on(&self, a: f64, b: f64) -> f64 {
        match self {
            Drift::Linear { rate } => rate.abs(),
            Drift::Table { knots, values } => knots
                .windows(2)
                .zip(values.windows(2))
                .map(|(k, v)| ((v[1] - v[0]) / (k[1] - k[0])).abs())
                .fold(0.0, f64::max),
            _ => {
                let n = 2000;
                let xs: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
                let mut lip = xs.windows(2).map(|w| ((self.eval(w[1]) - self.eval(w[0])) / (w[1] - w[0])).abs()).fold(0.0, f64::max);
                // derivative of a polynomial varies by O(h) across a cell
                lip *= 1.0 + 1e-3;
                lip
            }
        }
    }
}

/// Outcome of fitting `(b(x)−b(y))(x−y) ≤ min(C − c|x−y|², C|x−y|²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub c_big: f64,
    pub c_small: f64,
    pub pairs: usize,
    pub violations: usize,
    /// Pair that fails worst at the fitter cap, when the fit fails.
    pub worst_pair: Option<(f64, f64)>,
}

impl DriftReport {
    pub fn fits(&self) -> bool {
        self.violations == 0 && self.c_small > 0.0
    }
}

/// Default cap on `C` in [`validate_drift`].
pub const DRIFT_C_CAP: f64 = 16.0;

/// Scans `samples` seeded random pairs in `[lo, hi]` and reports the smallest
/// `C` on the ladder `C₀, 1, 2, 4, …, cap` (with `C₀ = max(0, sup g/d)`)
/// admitting some `c > 0`, together with the largest such `c`.
pub fn validate_drift(drift: &Drift, lo: f64, hi: f64, samples: usize) -> DriftReport {
    validate_drift_capped(drift, lo, hi, samples, DRIFT_C_CAP)
}

pub fn validate_drift_capped(drift: &Drift, lo: f64, hi: f64, samples: usize, cap: f64) -> DriftReport {
    use rand::Rng;
    let mut rng = stream_rng(0xD21F7, 0);
    let samples = samples.max(2);
    // (g, d) with g = (b(x)−b(y))(x−y), d = |x−y|²
    let pairs: Vec<(f64, f64, f64, f64)> = (0..samples)
        .filter_map(|_| {
            let x = rng.random_range(lo..=hi);
            let y = rng.random_range(lo..=hi);
            let d = (x - y) * (x - y);
            (d > 0.0).then(|| ((drift.eval(x) - drift.eval(y)) * (x - y), d, x, y))
        })
        .collect();
    let c0 = pairs.iter().map(|(g, d, ..)| g / d).fold(0.0_f64, f64::max);
    let c_of = |big: f64| pairs.iter().map(|(g, d, ..)| (big - g) / d).fold(f64::INFINITY, f64::min);
    let mut ladder = if c0 <= 0.0 { vec![0.0] } else { Vec::new() };
    let mut c = 1.0_f64.max(c0.ceil());
    while c <= cap {
        ladder.push(c);
        c *= 2.0;
    }
    for &big in ladder.iter().filter(|c| **c <= cap) {
        let small = c_of(big);
        if small > 0.0 {
            return DriftReport { c_big: big, c_small: small, pairs: pairs.len(), violations: 0, worst_pair: None };
        }
    }
    let fails = |g: f64, d: f64| g > cap.min(cap * d);
    let violations = pairs.iter().filter(|(g, d, ..)| fails(*g, *d)).count();
    let worst = pairs
        .iter()
        .map(|(g, d, x, y)| ((cap - g) / d, *x, *y))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, x, y)| (x, y));
    DriftReport { c_big: cap, c_small: 0.0, pairs: pairs.len(), violations: violations.max(1), worst_pair: worst }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuConfig {
    /// Mean-reversion rate in `dX = −rate·X dt + dW`.
    pub rate: f64,
}

impl Default for OuConfig {
    fn default() -> Self {
        OuConfig { rate: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbmConfig {
    pub hurst: f64,
    pub drift: Drift,
    pub ode_substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectedConfig {
    pub lower: f64,
    pub upper: f64,
    pub drift: Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoWallConfig {
    pub grid: GridSpec,
    pub lower: GridFunction,
    pub upper: GridFunction,
    pub drift: Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpmeConfig {
    pub grid: GridSpec,
    /// Porous-medium exponent, `m > 1`.
    pub m: f64,
    pub qspec: QSpec,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub jac_reg: f64,
    /// Exponent of the noise non-degeneracy condition; metadata only.
    pub sigma: Option<f64>,
}

impl SpmeConfig {
    pub fn new(grid: GridSpec, m: f64, qspec: QSpec) -> Self {
        SpmeConfig { grid, m, qspec, newton_tol: 1e-10, newton_max_iter: 50, jac_reg: 1e-12, sigma: None }
    }

    /// `Σ q_i² / λ_i^h`: the trace of the noise covariance in the discrete
    /// `H⁻¹` norm (modes beyond the grid are dropped).
    pub fn hminus1_trace(&self) -> f64 {
        let h = self.grid.h();
        let l = self.grid.length;
        self.qspec
            .q
            .iter()
            .enumerate()
            .take(self.grid.n)
            .map(|(i, q)| {
                let lam = 4.0 / (h * h) * ((i + 1) as f64 * std::f64::consts::PI * h / (2.0 * l)).sin().powi(2);
                q * q / lam
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineConfig {
    Ou(OuConfig),
    FbmSde(FbmConfig),
    Reflected(ReflectedConfig),
    Torus,
    Spme(SpmeConfig),
    TwoWall(TwoWallConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Ou,
    FbmSde,
    Reflected,
    Torus,
    Spme,
    TwoWall,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Ou => "ou",
            EngineKind::FbmSde => "fbm_sde",
            EngineKind::Reflected => "reflected",
            EngineKind::Torus => "torus",
            EngineKind::Spme => "spme",
            EngineKind::TwoWall => "two_wall",
        }
    }

    /// Driven by independent increments (everything but the fBm engine).
    pub fn is_white_noise(self) -> bool {
        self != EngineKind::FbmSde
    }
}

/// Engine state: a real number or nodal values on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum State {
    Scalar(f64),
    Field(GridFunction),
}

impl State {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            State::Scalar(x) => Some(*x),
            State::Field(_) => None,
        }
    }

    pub fn as_field(&self) -> Option<&GridFunction> {
        match self {
            State::Field(f) => Some(f),
            State::Scalar(_) => None,
        }
    }

    /// Components as a slice-like vector.
    pub fn components(&self) -> Vec<f64> {
        match self {
            State::Scalar(x) => vec![*x],
            State::Field(f) => f.values().to_vec(),
        }
    }
}

/// Order used to compare engine states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateOrder {
    /// Usual order of the reals.
    Real { tol: f64 },
    /// `x ≤ y` iff `x = y` (torus).
    Trivial,
    /// A grid order (pointwise or dual).
    Grid(OrderRelation),
}

impl StateOrder {
    pub fn tol(&self) -> f64 {
        match self {
            StateOrder::Real { tol } => *tol,
            StateOrder::Trivial => 0.0,
            StateOrder::Grid(o) => o.tol,
        }
    }

    /// Amount by which `a ≤ b` fails (0 when it holds exactly).
    pub fn violation(&self, a: &State, b: &State) -> Result<f64, EngineError> {
        match (self, a, b) {
            (StateOrder::Real { .. }, State::Scalar(x), State::Scalar(y)) => Ok((x - y).max(0.0)),
            (StateOrder::Trivial, State::Scalar(x), State::Scalar(y)) => Ok((x - y).abs()),
            (StateOrder::Grid(o), State::Field(x), State::Field(y)) => Ok(o.violation(x, y)?),
            _ => Err(EngineError::OutsideDomain("order does not apply to these states".into())),
        }
    }

    pub fn leq(&self, a: &State, b: &State) -> Result<bool, EngineError> {
        Ok(self.violation(a, b)? <= self.tol())
    }
}

/// Wrap-around distance on `[0, 1)`.
pub fn torus_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(1.0);
    d.min(1.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocycleEngine {
    config: EngineConfig,
    dt: f64,
}

const DRIFT_BOX: f64 = 10.0;

impl CocycleEngine {
    pub fn new(config: EngineConfig, dt: f64) -> Result<Self, EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if !(dt.is_finite() && dt > 0.0) {
            return bad(format!("dt must be positive, got {dt}"));
        }
        match &config {
            EngineConfig::Ou(c) => {
                if !(c.rate.is_finite() && c.rate > 0.0) {
                    return bad(format!("ou rate must be positive, got {}", c.rate));
                }
            }
            EngineConfig::FbmSde(c) => {
                if !(c.hurst > 0.0 && c.hurst < 1.0) {
                    return bad(format!("Hurst index {} outside (0, 1)", c.hurst));
                }
                if c.ode_substeps == 0 {
                    return bad("ode_substeps must be at least 1".into());
                }
                c.drift.validate()?;
                let report = validate_drift(&c.drift, -DRIFT_BOX, DRIFT_BOX, 4000);
                if !report.fits() {
                    return bad(format!(
                        "drift violates the one-sided growth condition on [-{DRIFT_BOX}, {DRIFT_BOX}] (worst pair {:?})",
                        report.worst_pair
                    ));
                }
            }
            EngineConfig::Reflected(c) => {
                if !(c.lower.is_finite() && c.upper.is_finite() && c.lower < c.upper) {
                    return bad(format!("reflection interval [{}, {}] is empty", c.lower, c.upper));
                }
                c.drift.validate()?;
                let lip = c.drift.lipschitz_on(c.lower, c.upper);
                if dt * lip >= 1.0 {
                    return bad(format!("dt·Lip(b) = {} must be below 1 for a monotone scheme", dt * lip));
                }
            }
            EngineConfig::Torus => {}
            EngineConfig::Spme(c) => {
                if c.grid.boundary != Boundary::Dirichlet {
                    return bad("spme needs a Dirichlet grid".into());
                }
                if !(c.m > 1.0 && c.m.is_finite()) {
                    return bad(format!("m must exceed 1, got {}", c.m));
                }
                if dt >= 1.0 {
                    return bad(format!("spme requires dt < 1, got {dt}"));
                }
                if !(c.newton_tol > 0.0 && c.newton_tol <= 1e-10) {
                    return bad(format!("newton_tol must lie in (0, 1e-10], got {}", c.newton_tol));
                }
                if !(c.jac_reg >= 0.0 && c.jac_reg <= 1e-10) {
                    return bad(format!("jac_reg must lie in [0, 1e-10], got {}", c.jac_reg));
                }
                if c.newton_max_iter == 0 {
                    return bad("newton_max_iter must be at least 1".into());
                }
                c.qspec.validate()?;
                if (c.qspec.domain_length - c.grid.length).abs() > 1e-12 * c.grid.length {
                    return bad("noise domain length differs from the grid length".into());
                }
            }
            EngineConfig::TwoWall(c) => {
                if c.grid.boundary != Boundary::Periodic {
                    return bad("two_wall needs a periodic grid".into());
                }
                if c.lower.spec() != &c.grid || c.upper.spec() != &c.grid {
                    return bad("walls must live on the engine grid".into());
                }
                if c.lower.values().iter().zip(c.upper.values()).any(|(a, b)| !(a < b)) {
                    return bad("walls must satisfy h1 < h2 at every node".into());
                }
                c.drift.validate()?;
                let lo = c.lower.values().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = c.upper.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lip = c.drift.lipschitz_on(lo, hi);
                if dt * lip >= 1.0 {
                    return bad(format!("dt·Lip(f) = {} must be below 1 for a monotone scheme", dt * lip));
                }
            }
        }
        Ok(CocycleEngine { config, dt })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn kind(&self) -> EngineKind {
        match self.config {
            EngineConfig::Ou(_) => EngineKind::Ou,
            EngineConfig::FbmSde(_) => EngineKind::FbmSde,
            EngineConfig::Reflected(_) => EngineKind::Reflected,
            EngineConfig::Torus => EngineKind::Torus,
            EngineConfig::Spme(_) => EngineKind::Spme,
            EngineConfig::TwoWall(_) => EngineKind::TwoWall,
        }
    }

    /// Grid of field-valued engines.
    pub fn grid(&self) -> Option<GridSpec> {
        match &self.config {
            EngineConfig::Spme(c) => Some(c.grid),
            EngineConfig::TwoWall(c) => Some(c.grid),
            _ => None,
        }
    }

    /// Samples a driving path of the right law on `[t0, t1]`.
    pub fn noise(&self, seed: u64, t0: f64, t1: f64) -> Result<NoisePath, EngineError> {
        let dt = self.dt;
        Ok(match &self.config {
            EngineConfig::Ou(_) | EngineConfig::Reflected(_) | EngineConfig::Torus => gen_brownian(seed, t0, t1, dt, 1)?,
            EngineConfig::FbmSde(c) => gen_fbm(seed, c.hurst, t0, t1, dt)?,
            EngineConfig::Spme(c) => gen_q_wiener(seed, &c.qspec, c.grid.n, t0, t1, dt)?,
            EngineConfig::TwoWall(c) => gen_brownian(seed, t0, t1, dt, c.grid.n)?,
        })
    }

    /// Metric of the engine's state space: `|·|` on the line, wrap distance
    /// on the torus, `H⁻¹` for spme and grid `L²` for two_wall.
    pub fn distance(&self, a: &State, b: &State) -> f64 {
        match (&self.config, a, b) {
            (EngineConfig::Torus, State::Scalar(x), State::Scalar(y)) => torus_distance(*x, *y),
            (_, State::Scalar(x), State::Scalar(y)) => (x - y).abs(),
            (EngineConfig::Spme(_), State::Field(x), State::Field(y)) => {
                x.sub(y).and_then(|d| d.norm(Norm::Hminus1)).unwrap_or(f64::INFINITY)
            }
            (_, State::Field(x), State::Field(y)) => x.sub(y).and_then(|d| d.norm(Norm::L2)).unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        }
    }

    /// The order each engine preserves by construction (pointwise for spme).
    pub fn natural_order(&self) -> StateOrder {
        match self.config {
            EngineConfig::Torus => StateOrder::Trivial,
            EngineConfig::Spme(_) | EngineConfig::TwoWall(_) => StateOrder::Grid(OrderRelation::pointwise()),
            _ => StateOrder::Real { tol: DEFAULT_TOL },
        }
    }

    /// A canonical starting point inside the state space.
    pub fn default_state(&self) -> State {
        match &self.config {
            EngineConfig::Torus => State::Scalar(0.5),
            EngineConfig::Reflected(c) => State::Scalar(0.5 * (c.lower + c.upper)),
            EngineConfig::Spme(c) => State::Field(c.grid.zeros()),
            EngineConfig::TwoWall(c) => State::Field(c.lower.add(&c.upper).expect("walls share the grid").scale(0.5)),
            _ => State::Scalar(0.0),
        }
    }

    pub fn check_state(&self, x: &State) -> Result<(), EngineError> {
        let outside = |m: String| Err(EngineError::OutsideDomain(m));
        match (&self.config, x) {
            (EngineConfig::Spme(c), State::Field(f)) => {
                if f.spec() != &c.grid {
                    return outside("state grid differs from the engine grid".into());
                }
            }
            (EngineConfig::TwoWall(c), State::Field(f)) => {
                if f.spec() != &c.grid {
                    return outside("state grid differs from the engine grid".into());
                }
                let inside = f.values().iter().zip(c.lower.values().iter().zip(c.upper.values())).all(|(v, (a, b))| a <= v && v <= b);
                if !inside {
                    return outside("state violates the walls h1 <= x <= h2".into());
                }
            }
            (EngineConfig::Spme(_) | EngineConfig::TwoWall(_), State::Scalar(_)) => {
                return outside("field engine given a scalar state".into())
            }
            (_, State::Field(_)) => return outside("scalar engine given a field state".into()),
            (_, State::Scalar(v)) if !v.is_finite() => return outside(format!("non-finite state {v}")),
            (EngineConfig::Torus, State::Scalar(v)) => {
                if !(0.0..1.0).contains(v) {
                    return outside(format!("torus state {v} outside [0, 1)"));
                }
            }
            (EngineConfig::Reflected(c), State::Scalar(v)) => {
                if *v < c.lower || *v > c.upper {
                    return outside(format!("state {v} outside [{}, {}]", c.lower, c.upper));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn check_path(&self, path: &NoisePath) -> Result<(), EngineError> {
        let mismatch = |m: String| Err(EngineError::PathMismatch(m));
        if (path.dt() - self.dt).abs() > 1e-12 * self.dt {
            return mismatch(format!("path dt {} differs from engine dt {}", path.dt(), self.dt));
        }
        let (ok_kind, dim) = match &self.config {
            EngineConfig::Ou(_) | EngineConfig::Reflected(_) | EngineConfig::Torus => {
                (path.kind() == NoiseKind::Brownian, 1)
            }
            EngineConfig::FbmSde(c) => (path.kind() == NoiseKind::Fbm { hurst: c.hurst }, 1),
            EngineConfig::Spme(c) => (path.kind() == NoiseKind::QWiener, c.grid.n),
            EngineConfig::TwoWall(c) => (matches!(path.kind(), NoiseKind::Brownian | NoiseKind::QWiener), c.grid.n),
        };
        if !ok_kind {
            return mismatch(format!("{:?} noise cannot drive the {} engine", path.kind(), self.kind().name()));
        }
        if path.dim() != dim {
            return mismatch(format!("path dimension {} but engine needs {dim}", path.dim()));
        }
        Ok(())
    }

    /// `φ` from `t0` to `t1` on `path`, starting at `x`.
    pub fn evolve(&self, path: &NoisePath, x: &State, t0: f64, t1: f64) -> Result<State, EngineError> {
        self.check_path(path)?;
        self.check_state(x)?;
        let i0 = path.index_of(t0)?;
        let i1 = path.index_of(t1)?;
        if i0 > i1 {
            return Err(EngineError::InvalidTimes { t0, t1 });
        }
        let mut inc = vec![0.0; path.dim()];
        let dt = self.dt;
        match (&self.config, x) {
            (EngineConfig::Spme(c), State::Field(f)) => {
                let mut u = f.clone();
                for k in i0..i1 {
                    path.step_increment_into(k, &mut inc);
                    u = step_spme(c, &u, &inc, dt).map_err(|residual| EngineError::NewtonFailure { step: k, residual })?;
                }
                Ok(State::Field(u))
            }
            (EngineConfig::TwoWall(c), State::Field(f)) => {
                let mut u = f.clone();
                for k in i0..i1 {
                    path.step_increment_into(k, &mut inc);
                    u = step_two_wall(c, &u, &inc, dt);
                }
                Ok(State::Field(u))
            }
            (config, State::Scalar(v)) => {
                let mut v = *v;
                let mut dw = [0.0];
                for k in i0..i1 {
                    path.step_increment_into(k, &mut dw);
                    v = match config {
                        EngineConfig::Ou(c) => step_ou(c, v, dw[0], dt),
                        EngineConfig::Reflected(c) => step_reflected(c, v, dw[0], dt),
                        EngineConfig::Torus => step_torus(v, dw[0], dt),
                        EngineConfig::FbmSde(c) => {
                            let next = step_fbm_sde(c, v, dw[0], dt);
                            if !next.is_finite() {
                                return Err(EngineError::DriftOverflow { step: k });
                            }
                            next
                        }
                        _ => unreachable!("field engines handled above"),
                    };
                }
                Ok(State::Scalar(v))
            }
            _ => unreachable!("check_state rejects mismatched states"),
        }
    }
}

/// Euler–Maruyama for `dX = −rate·X dt + dW`.
pub fn step_ou(cfg: &OuConfig, x: f64, dw: f64, dt: f64) -> f64 {
    x - cfg.rate * x * dt + dw
}

/// Projected Euler–Maruyama: `clamp(x + b(x)dt + dW, l, r)`.
pub fn step_reflected(cfg: &ReflectedConfig, x: f64, dw: f64, dt: f64) -> f64 {
    (x + cfg.drift.eval(x) * dt + dw).clamp(cfg.lower, cfg.upper)
}

/// Euler–Maruyama for `dX = X(1−X) dW`, reduced modulo 1.
pub fn step_torus(x: f64, dw: f64, _dt: f64) -> f64 {
    let r = (x + x * (1.0 - x) * dw).rem_euclid(1.0);
    // rem_euclid of a tiny negative number rounds up to 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// One noise step of the fBm-driven SDE via its random ODE: with `X = Y + B`,
/// `dY/ds = b(Y + (s/dt)·ΔB)` is integrated by RK4 over `ode_substeps`
/// substeps, `B` being linearly interpolated across the step.
pub fn step_fbm_sde(cfg: &FbmConfig, x: f64, db: f64, dt: f64) -> f64 {
    let n = cfg.ode_substeps;
    let sub = dt / n as f64;
    let slope = db / dt;
    let f = |s: f64, y: f64| cfg.drift.eval(y + slope * s);
    let mut y = x;
    for i in 0..n {
        let s = i as f64 * sub;
        let k1 = f(s, y);
        let k2 = f(s + 0.5 * sub, y + 0.5 * sub * k1);
        let k3 = f(s + 0.5 * sub, y + 0.5 * sub * k2);
        let k4 = f(s + sub, y + sub * k3);
        y += sub / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y + db
}

/// Semi-implicit step on the circle, `(I − dt·Δ_h)u = x + dt·f(x) + dW`,
/// followed by nodal clipping to the walls.
pub fn step_two_wall(cfg: &TwoWallConfig, x: &GridFunction, dw: &[f64], dt: f64) -> GridFunction {
    let h = cfg.grid.h();
    let ih2 = 1.0 / (h * h);
    let rhs: Vec<f64> = x.values().iter().zip(dw).map(|(&v, &w)| v + dt * cfg.drift.eval(v) + w).collect();
    let mut u = cyclic_solve(1.0 + 2.0 * dt * ih2, -dt * ih2, &rhs);
    for ((v, lo), hi) in u.iter_mut().zip(cfg.lower.values()).zip(cfg.upper.values()) {
        *v = v.clamp(*lo, *hi);
    }
    GridFunction::from_raw(cfg.grid, u)
}

#[inline]
fn signed_pow(u: f64, m: f64) -> f64 {
    u.abs().powf(m - 1.0) * u
}

/// `r = (1−dt)u − dt·Δ_h u^{[m]} − y`; returns `‖r‖∞`.
fn spme_residual(u: &[f64], w: &mut [f64], y: &[f64], m: f64, dt: f64, ih2: f64, r: &mut [f64]) -> f64 {
    let n = u.len();
    for (wj, &uj) in w.iter_mut().zip(u) {
        *wj = signed_pow(uj, m);
    }
    let mut norm = 0.0_f64;
    for j in 0..n {
        let left = if j > 0 { w[j - 1] } else { 0.0 };
        let right = if j + 1 < n { w[j + 1] } else { 0.0 };
        r[j] = (1.0 - dt) * u[j] - dt * ih2 * (left - 2.0 * w[j] + right) - y[j];
        norm = norm.max(r[j].abs());
    }
    norm
}

/// Fully implicit porous-medium step: solves
/// `u − dt·(Δ_h u^{[m]} + u) = x + dW` by damped Newton with a tridiagonal
/// Jacobian, falling back to nonlinear Gauss–Seidel. On failure returns the
/// best residual reached.
pub fn step_spme(cfg: &SpmeConfig, x: &GridFunction, dw: &[f64], dt: f64) -> Result<GridFunction, f64> {
    let n = x.len();
    let h = cfg.grid.h();
    let ih2 = 1.0 / (h * h);
    let m = cfg.m;
    let y: Vec<f64> = x.values().iter().zip(dw).map(|(a, b)| a + b).collect();
    let mut u = y.clone();
    let mut w = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut res = spme_residual(&u, &mut w, &y, m, dt, ih2, &mut r);

    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];
    let mut iters = 0;
    while res > cfg.newton_tol && iters < cfg.newton_max_iter {
        iters += 1;
        let delta = spme_newton_direction(cfg, &u, &r, dt, ih2);
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for j in 0..n {
                trial[j] = u[j] + lam * delta[j];
            }
            let res_trial = spme_residual(&trial, &mut w, &y, m, dt, ih2, &mut r_trial);
            if res_trial < (1.0 - 1e-4 * lam) * res {
                std::mem::swap(&mut u, &mut trial);
                std::mem::swap(&mut r, &mut r_trial);
                res = res_trial;
                accepted = true;
                break;
            }
            lam *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res <= cfg.newton_tol {
        // one polishing step, kept only if it lowers the residual further
        let delta = spme_newton_direction(cfg, &u, &r, dt, ih2);
        for j in 0..n {
            trial[j] = u[j] + delta[j];
        }
        if spme_residual(&trial, &mut w, &y, m, dt, ih2, &mut r_trial) < res {
            u = trial;
        }
        return Ok(GridFunction::from_raw(cfg.grid, u));
    }
    spme_gauss_seidel(cfg, &mut u, &y, dt, ih2)?;
    Ok(GridFunction::from_raw(cfg.grid, u))
}

/// Solves `J δ = −r` with the regularized tridiagonal Jacobian
/// `(1−dt)I − dt·Δ_h·diag(m(|u|+ε)^{m−1})`.
fn spme_newton_direction(cfg: &SpmeConfig, u: &[f64], r: &[f64], dt: f64, ih2: f64) -> Vec<f64> {
    let n = u.len();
    let d: Vec<f64> = u.iter().map(|uj| cfg.m * (uj.abs() + cfg.jac_reg).powf(cfg.m - 1.0)).collect();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for j in 0..n {
        diag[j] = (1.0 - dt) + 2.0 * dt * ih2 * d[j];
        if j > 0 {
            lower[j] = -dt * ih2 * d[j - 1];
        }
        if j + 1 < n {
            upper[j] = -dt * ih2 * d[j + 1];
        }
    }
    let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
    thomas(&lower, &diag, &upper, &neg_r)
}

/// Nodal nonlinear Gauss–Seidel sweeps; each nodal equation is strictly
/// increasing in its own unknown and is solved by bisection-safeguarded
/// Newton.
fn spme_gauss_seidel(cfg: &SpmeConfig, u: &mut [f64], y: &[f64], dt: f64, ih2: f64) -> Result<(), f64> {
    let n = u.len();
    let m = cfg.m;
    let mut w = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..20_000 {
        for j in 0..n {
            let left = if j > 0 { signed_pow(u[j - 1], m) } else { 0.0 };
            let right = if j + 1 < n { signed_pow(u[j + 1], m) } else { 0.0 };
            let rhs = y[j] + dt * ih2 * (left + right);
            let g = |v: f64| (1.0 - dt) * v + 2.0 * dt * ih2 * signed_pow(v, m) - rhs;
            // bracket the root of the increasing scalar map
            let mut lo = -1.0_f64.max(rhs.abs());
            let mut hi = 1.0_f64.max(rhs.abs());
            while g(lo) > 0.0 {
                lo *= 2.0;
            }
            while g(hi) < 0.0 {
                hi *= 2.0;
            }
            let mut v = u[j].clamp(lo, hi);
            for _ in 0..200 {
                let gv = g(v);
                if gv == 0.0 {
                    break;
                }
                if gv > 0.0 {
                    hi = v;
                } else {
                    lo = v;
                }
                let dg = (1.0 - dt) + 2.0 * dt * ih2 * m * (v.abs() + cfg.jac_reg).powf(m - 1.0);
                let next = v - gv / dg;
                v = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
                if hi - lo <= f64::EPSILON * v.abs().max(1e-300) {
                    break;
                }
            }
            u[j] = v;
        }
        let res = spme_residual(u, &mut w, y, m, dt, ih2, &mut r);
        if res <= cfg.newton_tol {
            return Ok(());
        }
        if res < 0.999 * best {
            best = res;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > 50 {
                return Err(best.min(res));
            }
        }
    }
    Err(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orders::OrderKind;
    use rand::Rng;

    fn spme_engine(n: usize, dt: f64) -> CocycleEngine {
        let grid = GridSpec::dirichlet(1.0, n).unwrap();
        let q = QSpec::power_law(n, 1.0, 1.0, 1.0).unwrap();
        CocycleEngine::new(EngineConfig::Spme(SpmeConfig::new(grid, 2.0, q)), dt).unwrap()
    }

    #[test]
    fn spme_scalar_case() {
        let grid = GridSpec::dirichlet(1.0, 1).unwrap();
        let cfg = SpmeConfig::new(grid, 2.0, QSpec::new(vec![1.0], 1.0).unwrap());
        let x = GridFunction::new(grid, vec![4.0]).unwrap();
        let u = step_spme(&cfg, &x, &[0.5], 0.5).unwrap();
        assert!((u.values()[0] - 1.0).abs() <= 1e-10);
        let z = step_spme(&cfg, &grid.zeros(), &[0.0], 0.5).unwrap();
        assert_eq!(z.values(), &[0.0]);
    }

    #[test]
    fn spme_residual_converged() {
        let e = spme_engine(32, 0.05);
        let EngineConfig::Spme(cfg) = e.config() else { unreachable!() };
        let mut rng = stream_rng(1, 0);
        for m in [1.3, 2.0, 3.5] {
            let mut cfg = cfg.clone();
            cfg.m = m;
            let x = GridFunction::new(cfg.grid, (0..32).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let dw: Vec<f64> = (0..32).map(|_| rng.random_range(-0.3..0.3)).collect();
            let u = step_spme(&cfg, &x, &dw, 0.05).unwrap();
            let y: Vec<f64> = x.values().iter().zip(&dw).map(|(a, b)| a + b).collect();
            let (mut w, mut r) = (vec![0.0; 32], vec![0.0; 32]);
            let h = cfg.grid.h();
            let res = spme_residual(u.values(), &mut w, &y, m, 0.05, 1.0 / (h * h), &mut r);
            assert!(res <= cfg.newton_tol, "m = {m}: residual {res}");
        }
    }

    #[test]
    fn spme_gauss_seidel_fallback_solves() {
        let e = spme_engine(16, 0.1);
        let EngineConfig::Spme(mut cfg) = e.config().clone() else { unreachable!() };
        cfg.newton_max_iter = 1;
        let x = cfg.grid.from_fn(|s| 5.0 * (3.0 * std::f64::consts::PI * s).sin());
        let u = step_spme(&cfg, &x, &[0.0; 16], 0.1).unwrap();
        cfg.newton_max_iter = 50;
        let v = step_spme(&cfg, &x, &[0.0; 16], 0.1).unwrap();
        for (a, b) in u.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spme_comparison_pointwise() {
        let e = spme_engine(32, 0.05);
        let EngineConfig::Spme(cfg) = e.config() else { unreachable!() };
        let mut rng = stream_rng(2, 0);
        for _ in 0..1000 {
            let x = GridFunction::new(cfg.grid, (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let xp = x.map(|v| v + rng.random_range(0.0..0.5));
            let dw: Vec<f64> = (0..32).map(|_| rng.random_range(-0.3..0.3)).collect();
            let a = step_spme(cfg, &x, &dw, 0.05).unwrap();
            let b = step_spme(cfg, &xp, &dw, 0.05).unwrap();
            assert!(OrderRelation::pointwise().leq(&a, &b).unwrap());
        }
    }

    #[test]
    fn reflected_steps() {
        let cfg = ReflectedConfig { lower: -1.0, upper: 1.0, drift: Drift::Linear { rate: 1.0 } };
        assert_eq!(step_reflected(&cfg, 0.2, 0.01, 0.01), 0.2 - 0.2 * 0.01 + 0.01);
        let push = ReflectedConfig { lower: -1.0, upper: 1.0, drift: Drift::Polynomial { coeffs: vec![1.0] } };
        assert_eq!(step_reflected(&push, 1.0, 0.0, 0.01), 1.0);
        let e = CocycleEngine::new(EngineConfig::Reflected(cfg), 0.01).unwrap();
        let p = gen_brownian(1, 0.0, 1.0, 0.01, 1).unwrap();
        assert!(matches!(e.evolve(&p, &State::Scalar(1.5), 0.0, 1.0), Err(EngineError::OutsideDomain(_))));
    }

    #[test]
    fn torus_steps() {
        assert_eq!(step_torus(0.0, 0.7, 0.01), 0.0);
        assert_eq!(step_torus(0.5, 0.0, 0.01), 0.5);
        assert!(step_torus(1.0 - 1e-17, -1e-3, 0.01) < 1.0);
        let mut rng = stream_rng(3, 0);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(0.05..0.95);
            let dw: f64 = rng.random_range(-0.05..0.05);
            let one = step_torus(x, dw, 0.01);
            let half = step_torus(step_torus(x, 0.5 * dw, 0.005), 0.5 * dw, 0.005);
            assert!((one - half).abs() <= 10.0 * dw * dw);
        }
    }

    #[test]
    fn two_wall_steps() {
        let grid = GridSpec::periodic(1.0, 8).unwrap();
        let cfg = TwoWallConfig {
            grid,
            lower: grid.from_fn(|_| -1.0),
            upper: grid.from_fn(|_| 1.0),
            drift: Drift::Polynomial { coeffs: vec![0.0] },
        };
        let u = step_two_wall(&cfg, &grid.zeros(), &[0.0; 8], 0.01);
        assert!(u.values().iter().all(|v| v.abs() < 1e-15));
        let mut dw = [0.0; 8];
        dw[3] = 50.0;
        let u = step_two_wall(&cfg, &grid.zeros(), &dw, 0.01);
        assert_eq!(u.values()[3], 1.0);
        let bad = TwoWallConfig { upper: grid.from_fn(|_| -1.0), ..cfg };
        assert!(CocycleEngine::new(EngineConfig::TwoWall(bad), 0.01).is_err());
    }

    #[test]
    fn fbm_zero_drift_is_translation() {
        let cfg = FbmConfig { hurst: 0.3, drift: Drift::Table { knots: vec![0.0], values: vec![0.0] }, ode_substeps: 4 };
        let e = CocycleEngine::new(EngineConfig::FbmSde(cfg), 0.01).unwrap();
        let p = e.noise(5, 0.0, 2.0).unwrap();
        let out = e.evolve(&p, &State::Scalar(0.5), 0.0, 2.0).unwrap();
        assert_eq!(out.as_scalar().unwrap(), 0.5 + p.value_at(2.0).unwrap()[0]);
    }

    #[test]
    fn fbm_linear_drift_matches_euler() {
        let cfg = FbmConfig { hurst: 0.5, drift: Drift::Linear { rate: 1.0 }, ode_substeps: 4 };
        let dt = 1e-3;
        let e = CocycleEngine::new(EngineConfig::FbmSde(cfg), dt).unwrap();
        for seed in 0..10 {
            let p = e.noise(seed, 0.0, 1.0).unwrap();
            let mut euler = 0.5;
            let mut x = State::Scalar(0.5);
            for k in 0..p.steps() {
                let t = k as f64 * dt;
                x = e.evolve(&p, &x, t, t + dt).unwrap();
                euler += -euler * dt + (p.row(k + 1)[0] - p.row(k)[0]);
                assert!((x.as_scalar().unwrap() - euler).abs() <= 1e-3, "seed {seed} t {t}");
            }
        }
    }

    #[test]
    fn drift_validation() {
        let r = validate_drift(&Drift::Linear { rate: 1.0 }, -3.0, 3.0, 10_000);
        assert_eq!(r.c_big, 0.0);
        assert!((r.c_small - 1.0).abs() < 1e-12);
        assert_eq!(r.violations, 0);
        let r = validate_drift(&Drift::DoubleWell, -3.0, 3.0, 10_000);
        assert!(r.fits() && r.c_big >= 1.0 && r.c_small > 0.0, "{r:?}");
        let r = validate_drift(&Drift::Polynomial { coeffs: vec![0.0, 0.0, 1.0] }, -3.0, 3.0, 10_000);
        assert!(!r.fits() && r.violations > 0 && r.worst_pair.is_some(), "{r:?}");
        let cfg = FbmConfig { hurst: 0.5, drift: Drift::Polynomial { coeffs: vec![0.0, 0.0, 1.0] }, ode_substeps: 1 };
        assert!(CocycleEngine::new(EngineConfig::FbmSde(cfg), 0.01).is_err());
    }

    #[test]
    fn drift_eval() {
        let t = Drift::Table { knots: vec![0.0, 1.0, 3.0], values: vec![0.0, 2.0, 0.0] };
        assert_eq!(t.eval(-1.0), 0.0);
        assert_eq!(t.eval(0.5), 1.0);
        assert_eq!(t.eval(2.0), 1.0);
        assert_eq!(t.eval(9.0), 0.0);
        assert_eq!(t.lipschitz_on(0.0, 3.0), 2.0);
        assert_eq!(Drift::Polynomial { coeffs: vec![1.0, 2.0, 3.0] }.eval(2.0), 17.0);
        assert!(Drift::Table { knots: vec![1.0, 0.0], values: vec![0.0, 0.0] }.validate().is_err());
    }

    #[test]
    fn identity_on_empty_interval() {
        let e = spme_engine(8, 0.01);
        let p = e.noise(1, 0.0, 1.0).unwrap();
        let x = State::Field(e.grid().unwrap().from_fn(|s| s));
        assert_eq!(e.evolve(&p, &x, 0.5, 0.5).unwrap(), x);
        assert!(matches!(e.evolve(&p, &x, 0.5, 0.25), Err(EngineError::InvalidTimes { .. })));
    }

    #[test]
    fn path_mismatch_rejected() {
        let e = spme_engine(8, 0.01);
        let p = gen_brownian(1, 0.0, 1.0, 0.01, 8).unwrap();
        let x = State::Field(e.grid().unwrap().zeros());
        assert!(matches!(e.evolve(&p, &x, 0.0, 1.0), Err(EngineError::PathMismatch(_))));
        let p = gen_q_wiener(1, &QSpec::power_law(8, 1.0, 1.0, 1.0).unwrap(), 8, 0.0, 1.0, 0.02).unwrap();
        assert!(matches!(e.evolve(&p, &x, 0.0, 1.0), Err(EngineError::PathMismatch(_))));
        let p = e.noise(1, 0.0, 1.0).unwrap();
        assert!(matches!(e.evolve(&p, &State::Scalar(0.0), 0.0, 1.0), Err(EngineError::OutsideDomain(_))));
    }

    #[test]
    fn spme_config_checks() {
        let grid = GridSpec::dirichlet(1.0, 4).unwrap();
        let q = QSpec::power_law(4, 1.0, 1.0, 1.0).unwrap();
        let ok = SpmeConfig::new(grid, 2.0, q.clone());
        assert!(CocycleEngine::new(EngineConfig::Spme(ok.clone()), 1.0).is_err());
        assert!(CocycleEngine::new(EngineConfig::Spme(SpmeConfig { m: 1.0, ..ok.clone() }), 0.1).is_err());
        assert!(CocycleEngine::new(EngineConfig::Spme(SpmeConfig { newton_tol: 1e-6, ..ok.clone() }), 0.1).is_err());
        let other = QSpec::power_law(4, 1.0, 1.0, 2.0).unwrap();
        assert!(CocycleEngine::new(EngineConfig::Spme(SpmeConfig { qspec: other, ..ok }), 0.1).is_err());
    }

    #[test]
    fn state_orders() {
        let o = StateOrder::Real { tol: 1e-10 };
        assert!(o.leq(&State::Scalar(1.0), &State::Scalar(1.0 + 1e-12)).unwrap());
        assert!(!o.leq(&State::Scalar(1.0), &State::Scalar(0.5)).unwrap());
        assert!(!StateOrder::Trivial.leq(&State::Scalar(0.2), &State::Scalar(0.3)).unwrap());
        let g = StateOrder::Grid(OrderRelation { kind: OrderKind::DualPreceq, tol: 0.0 });
        assert!(g.leq(&State::Scalar(1.0), &State::Scalar(2.0)).is_err());
        assert!((torus_distance(0.05, 0.95) - 0.1).abs() < 1e-15);
    }
}
