//! The pointwise order `≤` and the dual order `⪯` on grid functions.
//!
//! `x ⪯ y` iff `(−Δ_h)⁻¹x ≤ (−Δ_h)⁻¹y` nodally. Since `(−Δ_h)⁻¹` has a
//! nonnegative inverse, `x ≤ y` implies `x ⪯ y`, but not conversely.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{laplacian_apply, laplacian_solve, GridError, GridFunction, Norm};

/// Default absolute nodal comparison tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrderError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("tolerance must be nonnegative, got {0}")]
    InvalidTolerance(f64),
    #[error("interval endpoints are not ordered")]
    UnorderedEndpoints,
    #[error("closedness precondition violated: {0}")]
    Precondition(String),
    #[error("quadrature step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("probe index n must be at least 1")]
    InvalidIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    PointwiseLeq,
    DualPreceq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderRelation {
    pub kind: OrderKind,
    pub tol: f64,
}

impl OrderRelation {
    pub fn new(kind: OrderKind, tol: f64) -> Result<Self, OrderError> {
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(OrderError::InvalidTolerance(tol));
        }
        Ok(OrderRelation { kind, tol })
    }

    pub fn pointwise() -> Self {
        OrderRelation { kind: OrderKind::PointwiseLeq, tol: DEFAULT_TOL }
    }

    pub fn dual() -> Self {
        OrderRelation { kind: OrderKind::DualPreceq, tol: DEFAULT_TOL }
    }

    /// The representation in which this order is pointwise: the identity for
    /// `≤`, `(−Δ_h)⁻¹` for `⪯`.
    pub fn represent(&self, x: &GridFunction) -> Result<GridFunction, OrderError> {
        Ok(match self.kind {
            OrderKind::PointwiseLeq => x.clone(),
            OrderKind::DualPreceq => laplacian_solve(x)?,
        })
    }

    /// Inverse of [`represent`](Self::represent).
    pub fn unrepresent(&self, v: &GridFunction) -> GridFunction {
        match self.kind {
            OrderKind::PointwiseLeq => v.clone(),
            OrderKind::DualPreceq => laplacian_apply(v).scale(-1.0),
        }
    }

    pub fn leq(&self, x: &GridFunction, y: &GridFunction) -> Result<bool, OrderError> {
        Ok(self.violation(x, y)? <= self.tol)
    }

    /// `max_j (rx_j − ry_j)` in the order's representation, clamped at 0;
    /// `x` is below `y` iff this is at most `tol`.
    pub fn violation(&self, x: &GridFunction, y: &GridFunction) -> Result<f64, OrderError> {
        x.check_same_grid(y)?;
        let (rx, ry) = (self.represent(x)?, self.represent(y)?);
        Ok(rx.values().iter().zip(ry.values()).fold(0.0_f64, |m, (a, b)| m.max(a - b)))
    }
}

/// The order interval `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    lower: GridFunction,
    upper: GridFunction,
    order: OrderRelation,
}

impl Interval {
    pub fn new(lower: GridFunction, upper: GridFunction, order: OrderRelation) -> Result<Self, OrderError> {
        if !order.leq(&lower, &upper)? {
            return Err(OrderError::UnorderedEndpoints);
        }
        Ok(Interval { lower, upper, order })
    }

    pub fn lower(&self) -> &GridFunction {
        &self.lower
    }
    pub fn upper(&self) -> &GridFunction {
        &self.upper
    }
    pub fn order(&self) -> OrderRelation {
        self.order
    }

    pub fn contains(&self, x: &GridFunction) -> Result<bool, OrderError> {
        interval_contains(self, x)
    }
}

pub fn interval_contains(iv: &Interval, x: &GridFunction) -> Result<bool, OrderError> {
    Ok(iv.order.leq(&iv.lower, x)? && iv.order.leq(x, &iv.upper)?)
}

/// Result of [`normality_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityProbe {
    pub n: u32,
    /// `‖f̃ⁿ‖_{H₀¹(0, 2π+2)}`.
    pub seminorm: f64,
    /// `seminorm / n`; tends to `√π`.
    pub ratio: f64,
    /// `0 ≤ f̃ⁿ ≤ g̃` held at every quadrature node.
    pub enveloped: bool,
}

/// Length of the probe domain `(0, 2π+2)`.
pub const PROBE_DOMAIN: f64 = 2.0 * PI + 2.0;

/// Ramp up on `[0,1]`, `1 + sin(n(x−1))` on `[1, 2π+1]`, ramp down to 0 on
/// the last unit interval.
pub fn probe_profile(n: u32, x: f64) -> f64 {
    if x <= 1.0 {
        x
    } else if x <= 2.0 * PI + 1.0 {
        1.0 + (n as f64 * (x - 1.0)).sin()
    } else {
        PROBE_DOMAIN - x
    }
}

fn probe_slope(n: u32, x: f64) -> f64 {
    if x <= 1.0 {
        1.0
    } else if x <= 2.0 * PI + 1.0 {
        n as f64 * (n as f64 * (x - 1.0)).cos()
    } else {
        -1.0
    }
}

/// Tent `2x` rising to `2π+2` at the midpoint; dominates every `f̃ⁿ`.
pub fn probe_envelope(x: f64) -> f64 {
    if x <= PI + 1.0 {
        2.0 * x
    } else {
        2.0 * PROBE_DOMAIN - 2.0 * x
    }
}

/// Composite Simpson on `[a, b]` with at most `step` spacing.
fn simpson(a: f64, b: f64, step: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut m = ((b - a) / step).ceil() as usize;
    m += m % 2;
    let m = m.max(2);
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Measures the `H₀¹` size of the oscillating profiles that all sit in the
/// single order interval `[0, g̃]`: the seminorm grows like `√π·n` while the
/// endpoints stay fixed.
pub fn normality_probe(n: u32, quad_step: f64) -> Result<NormalityProbe, OrderError> {
    if n == 0 {
        return Err(OrderError::InvalidIndex);
    }
    if !(quad_step > 0.0 && quad_step.is_finite()) {
        return Err(OrderError::InvalidStep(quad_step));
    }
    let mid_end = 2.0 * PI + 1.0;
    let sq = |x: f64| probe_slope(n, x).powi(2);
    let total = simpson(0.0, 1.0, quad_step, sq) + simpson(1.0, mid_end, quad_step, sq) + simpson(mid_end, PROBE_DOMAIN, quad_step, sq);
    let seminorm = total.sqrt();
    let nodes = (PROBE_DOMAIN / quad_step).ceil() as usize;
    let enveloped = (0..=nodes).all(|i| {
        let x = (i as f64 * quad_step).min(PROBE_DOMAIN);
        let f = probe_profile(n, x);
        f >= -1e-12 && f <= probe_envelope(x) + 1e-12
    });
    Ok(NormalityProbe { n, seminorm, ratio: seminorm / n as f64, enveloped })
}

/// Discrete counterpart on a Dirichlet grid over `(0, 2π+2)`: with
/// `g = −Δ_h g̃` and `xₙ = −Δ_h f̃ⁿ`, all `xₙ` lie in `[0, g]_⪯` while
/// `‖xₙ‖_{H⁻¹} = ‖f̃ⁿ‖_{H₀¹}` grows with `n`. Returns
/// `(‖g‖_{H⁻¹}, ‖xₙ‖_{H⁻¹}, xₙ ∈ [0,g]_⪯)`.
pub fn discrete_normality_pair(n: u32, grid_n: usize) -> Result<(f64, f64, bool), OrderError> {
    let spec = crate::grid::GridSpec::dirichlet(PROBE_DOMAIN, grid_n)?;
    let order = OrderRelation::dual();
    let g = order.unrepresent(&spec.from_fn(probe_envelope));
    let x = order.unrepresent(&spec.from_fn(|t| probe_profile(n, t)));
    let inside = Interval::new(spec.zeros(), g.clone(), order)?.contains(&x)?;
    Ok((g.norm(Norm::Hminus1)?, x.norm(Norm::Hminus1)?, inside))
}

/// Checks that an order persists in the limit of ordered sequences.
///
/// Preconditions (reported as [`OrderError::Precondition`]): equal nonzero
/// lengths, every pair ordered, and each sequence's final term no farther
/// from its limit (in grid L²) than its first term.
pub fn closedness_check(
    order: &OrderRelation,
    x_seq: &[GridFunction],
    y_seq: &[GridFunction],
    x_lim: &GridFunction,
    y_lim: &GridFunction,
) -> Result<bool, OrderError> {
    if x_seq.is_empty() || x_seq.len() != y_seq.len() {
        return Err(OrderError::Precondition(format!("sequence lengths {} and {}", x_seq.len(), y_seq.len())));
    }
    for (k, (x, y)) in x_seq.iter().zip(y_seq).enumerate() {
        if !order.leq(x, y)? {
            return Err(OrderError::Precondition(format!("pair {k} is not ordered")));
        }
    }
    let dist = |a: &GridFunction, b: &GridFunction| -> Result<f64, OrderError> { Ok(a.sub(b)?.norm(Norm::L2)?) };
    for (seq, lim, name) in [(x_seq, x_lim, "x"), (y_seq, y_lim, "y")] {
        let first = dist(&seq[0], lim)?;
        let last = dist(&seq[seq.len() - 1], lim)?;
        if last > first {
            return Err(OrderError::Precondition(format!("{name} sequence moves away from its limit")));
        }
    }
    order.leq(x_lim, y_lim)
}
