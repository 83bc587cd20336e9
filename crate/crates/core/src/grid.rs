//! Discrete 1-D calculus on uniform grids.
//!
//! Dirichlet grids carry the interior nodes `ξ_j = jh`, `h = L/(N+1)`, with
//! implicit zero boundary values; they are the discrete stand-ins for
//! `H₀¹`, `H⁻¹` and `L^p`. Periodic grids (nodes `jh`, `h = L/N`) are used by
//! the two-wall engine on the circle.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least one node and a positive finite length (got N = {n}, L = {length})")]
    InvalidSpec { n: usize, length: f64 },
    #[error("expected {expected} nodal values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite nodal value at index {0}")]
    NonFinite(usize),
    #[error("grid mismatch")]
    Mismatch,
    #[error("Lp norm needs p >= 1, got {0}")]
    InvalidExponent(f64),
    #[error("operation requires a Dirichlet grid")]
    NotDirichlet,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub length: f64,
    pub n: usize,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn dirichlet(length: f64, n: usize) -> Result<Self, GridError> {
        Self::new(length, n, Boundary::Dirichlet)
    }

    pub fn periodic(length: f64, n: usize) -> Result<Self, GridError> {
        Self::new(length, n, Boundary::Periodic)
    }

    pub fn new(length: f64, n: usize, boundary: Boundary) -> Result<Self, GridError> {
        if n == 0 || !(length.is_finite() && length > 0.0) {
            return Err(GridError::InvalidSpec { n, length });
        }
        // a periodic Laplacian needs two distinct neighbours
        if boundary == Boundary::Periodic && n < 3 {
            return Err(GridError::InvalidSpec { n, length });
        }
        Ok(GridSpec { length, n, boundary })
    }

    pub fn h(&self) -> f64 {
        match self.boundary {
            Boundary::Dirichlet => self.length / (self.n + 1) as f64,
            Boundary::Periodic => self.length / self.n as f64,
        }
    }

    /// Node coordinates.
    pub fn nodes(&self) -> Vec<f64> {
        let h = self.h();
        match self.boundary {
            Boundary::Dirichlet => (1..=self.n).map(|j| j as f64 * h).collect(),
            Boundary::Periodic => (0..self.n).map(|j| j as f64 * h).collect(),
        }
    }

    pub fn zeros(&self) -> GridFunction {
        GridFunction { spec: *self, u: vec![0.0; self.n] }
    }

    pub fn from_fn(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction { spec: *self, u: self.nodes().into_iter().map(f).collect() }
    }
}

/// Nodal values on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    spec: GridSpec,
    u: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Norm {
    L2,
    H10,
    Hminus1,
    Lp(f64),
}

impl GridFunction {
    pub fn new(spec: GridSpec, u: Vec<f64>) -> Result<Self, GridError> {
        if u.len() != spec.n {
            return Err(GridError::Length { expected: spec.n, got: u.len() });
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(GridFunction { spec, u })
    }

    /// Skips the finiteness check; for values produced by solvers.
    pub(crate) fn from_raw(spec: GridSpec, u: Vec<f64>) -> Self {
        debug_assert_eq!(u.len(), spec.n);
        GridFunction { spec, u }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn values(&self) -> &[f64] {
        &self.u
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }
    pub fn into_values(self) -> Vec<f64> {
        self.u
    }
    pub fn len(&self) -> usize {
        self.u.len()
    }
    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<(), GridError> {
        if self.spec == other.spec {
            Ok(())
        } else {
            Err(GridError::Mismatch)
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> GridFunction {
        GridFunction::from_raw(self.spec, self.u.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction, GridError> {
        self.check_same_grid(other)?;
        Ok(GridFunction::from_raw(self.spec, self.u.iter().zip(&other.u).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction, GridError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction, GridError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map(|v| c * v)
    }

    /// Plain Euclidean dot product of nodal values (no `h` weight).
    pub fn dot(&self, other: &GridFunction) -> Result<f64, GridError> {
        self.check_same_grid(other)?;
        Ok(self.u.iter().zip(&other.u).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self, which: Norm) -> Result<f64, GridError> {
        norm(self, which)
    }

    /// One value per line, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.u.len() * 25);
        for v in &self.u {
            writeln!(s, "{v:.16e}").unwrap();
        }
        s
    }

    pub fn from_text(spec: GridSpec, text: &str) -> Result<Self, GridError> {
        let mut u = Vec::with_capacity(spec.n);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|e| GridError::Parse { line: i + 1, msg: format!("{e}") })?;
            u.push(v);
        }
        GridFunction::new(spec, u)
    }
}

/// `(Δ_h u)_j = (u_{j−1} − 2u_j + u_{j+1}) / h²`, zero boundary values on
/// Dirichlet grids and wrap-around on periodic ones.
pub fn laplacian_apply(u: &GridFunction) -> GridFunction {
    let spec = u.spec;
    let n = spec.n;
    let inv_h2 = 1.0 / (spec.h() * spec.h());
    let x = &u.u;
    let out = (0..n)
        .map(|j| {
            let (left, right) = match spec.boundary {
                Boundary::Dirichlet => {
                    (if j > 0 { x[j - 1] } else { 0.0 }, if j + 1 < n { x[j + 1] } else { 0.0 })
                }
                Boundary::Periodic => (x[(j + n - 1) % n], x[(j + 1) % n]),
            };
            (left - 2.0 * x[j] + right) * inv_h2
        })
        .collect();
    GridFunction::from_raw(spec, out)
}

/// Solves `−Δ_h v = f` on a Dirichlet grid.
pub fn laplacian_solve(f: &GridFunction) -> Result<GridFunction, GridError> {
    let spec = f.spec;
    if spec.boundary != Boundary::Dirichlet {
        return Err(GridError::NotDirichlet);
    }
    let n = spec.n;
    let inv_h2 = 1.0 / (spec.h() * spec.h());
    let lower = vec![-inv_h2; n];
    let diag = vec![2.0 * inv_h2; n];
    let upper = vec![-inv_h2; n];
    Ok(GridFunction::from_raw(spec, thomas(&lower, &diag, &upper, &f.u)))
}

/// Tridiagonal solve. `lower[0]` and `upper[n-1]` are ignored. The matrix is
/// assumed nonsingular without pivoting (diagonally dominant M-matrices here).
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n.saturating_sub(1)).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

/// Solves the cyclic tridiagonal system with constant off-diagonal `off` on
/// both sides and the corner entries, and diagonal `diag`
/// (Sherman–Morrison around [`thomas`]). Needs `n ≥ 3`.
pub fn cyclic_solve(diag: f64, off: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let gamma = -diag;
    let mut d = vec![diag; n];
    d[0] = diag - gamma;
    d[n - 1] = diag - off * off / gamma;
    let lo = vec![off; n];
    let up = vec![off; n];
    let y = thomas(&lo, &d, &up, rhs);
    let mut uvec = vec![0.0; n];
    uvec[0] = gamma;
    uvec[n - 1] = off;
    let z = thomas(&lo, &d, &up, &uvec);
    let vy = y[0] + off / gamma * y[n - 1];
    let vz = z[0] + off / gamma * z[n - 1];
    let factor = vy / (1.0 + vz);
    y.iter().zip(&z).map(|(a, b)| a - factor * b).collect()
}

pub fn norm(u: &GridFunction, which: Norm) -> Result<f64, GridError> {
    let spec = u.spec;
    let h = spec.h();
    let x = &u.u;
    match which {
        Norm::L2 => Ok((h * x.iter().map(|v| v * v).sum::<f64>()).sqrt()),
        Norm::Lp(p) => {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(GridError::InvalidExponent(p));
            }
            Ok((h * x.iter().map(|v| v.abs().powf(p)).sum::<f64>()).powf(1.0 / p))
        }
        Norm::H10 => {
            let n = x.len();
            let sum: f64 = match spec.boundary {
                Boundary::Dirichlet => {
                    let at = |j: isize| if j < 0 || j as usize >= n { 0.0 } else { x[j as usize] };
                    (-1..n as isize).map(|j| (at(j + 1) - at(j)).powi(2)).sum()
                }
                Boundary::Periodic => (0..n).map(|j| (x[(j + 1) % n] - x[j]).powi(2)).sum(),
            };
            Ok((sum / h).sqrt())
        }
        Norm::Hminus1 => {
            let v = laplacian_solve(u)?;
            // ⟨u, (−Δ_h)⁻¹u⟩ ≥ 0 up to round-off
            Ok((h * u.dot(&v)?).max(0.0).sqrt())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_fn(spec: GridSpec, seed: u64) -> GridFunction {
        let mut rng = stream_rng(seed, 0);
        GridFunction::new(spec, (0..spec.n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Dense tridiagonal oracle for Δ_h.
    fn dense_laplacian(n: usize, h: f64) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = -2.0 / (h * h);
            if i > 0 {
                a[i][i - 1] = 1.0 / (h * h);
            }
            if i + 1 < n {
                a[i][i + 1] = 1.0 / (h * h);
            }
        }
        a
    }

    #[test]
    fn laplacian_small_cases() {
        let s = GridSpec::dirichlet(1.0, 1).unwrap();
        assert_eq!(laplacian_apply(&s.zeros()).values(), &[0.0]);
        let u = GridFunction::new(s, vec![1.0]).unwrap();
        assert_eq!(laplacian_apply(&u).values(), &[-8.0]);
        let f = GridFunction::new(s, vec![8.0]).unwrap();
        assert_eq!(laplacian_solve(&f).unwrap().values(), &[1.0]);
        assert_eq!(laplacian_solve(&s.zeros()).unwrap().values(), &[0.0]);
    }

    #[test]
    fn discrete_eigenrelation() {
        let (l, n) = (2.0, 17);
        let s = GridSpec::dirichlet(l, n).unwrap();
        let h = s.h();
        let a = dense_laplacian(n, h);
        for k in 1..=n {
            let u = s.from_fn(|x| (k as f64 * PI * x / l).sin());
            let lam = -(4.0 / (h * h)) * (k as f64 * PI * h / (2.0 * l)).sin().powi(2);
            let applied = laplacian_apply(&u);
            for j in 0..n {
                let dense: f64 = (0..n).map(|i| a[j][i] * u.values()[i]).sum();
                assert!((applied.values()[j] - dense).abs() <= 1e-12 * dense.abs().max(1.0) * 1e3);
                assert!((dense - lam * u.values()[j]).abs() <= 1e-12 * lam.abs().max(1.0));
            }
        }
    }

    #[test]
    fn solve_residual() {
        let s = GridSpec::dirichlet(1.0, 128).unwrap();
        for seed in 0..5 {
            let f = random_fn(s, seed);
            let v = laplacian_solve(&f).unwrap();
            let r = laplacian_apply(&v).add(&f).unwrap();
            let fmax = f.values().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            let rmax = r.values().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            assert!(rmax / fmax <= 1e-12, "relative residual {}", rmax / fmax);
        }
    }

    #[test]
    fn zero_norms() {
        let s = GridSpec::dirichlet(1.0, 9).unwrap();
        for w in [Norm::L2, Norm::H10, Norm::Hminus1, Norm::Lp(3.0)] {
            assert_eq!(norm(&s.zeros(), w).unwrap(), 0.0);
        }
        assert_eq!(norm(&s.zeros(), Norm::Lp(0.5)), Err(GridError::InvalidExponent(0.5)));
    }

    #[test]
    fn hminus1_is_dual_of_h10() {
        let s = GridSpec::dirichlet(3.0, 40).unwrap();
        for seed in 0..100 {
            let u = random_fn(s, seed);
            let a = norm(&u, Norm::Hminus1).unwrap();
            let b = norm(&laplacian_solve(&u).unwrap(), Norm::H10).unwrap();
            assert!((a - b).abs() <= 1e-10 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn l2_of_sine() {
        let s = GridSpec::dirichlet(1.0, 255).unwrap();
        let u = s.from_fn(|x| (PI * x).sin());
        let n2 = norm(&u, Norm::L2).unwrap().powi(2);
        assert!(n2 >= 0.5 * (1.0 - 1e-3) && n2 <= 0.5 * (1.0 + 1e-3));
    }

    #[test]
    fn symmetry_positivity_poincare() {
        let s = GridSpec::dirichlet(2.5, 33).unwrap();
        for seed in 0..50 {
            let u = random_fn(s, 2 * seed);
            let v = random_fn(s, 2 * seed + 1);
            let luv = u.dot(&laplacian_apply(&v).scale(-1.0)).unwrap();
            let lvu = v.dot(&laplacian_apply(&u).scale(-1.0)).unwrap();
            assert!((luv - lvu).abs() <= 1e-12 * luv.abs().max(1.0) * 1e2);
            assert!(u.dot(&laplacian_apply(&u).scale(-1.0)).unwrap() > 0.0);
            let l2 = norm(&u, Norm::L2).unwrap();
            let h1 = norm(&u, Norm::H10).unwrap();
            assert!(l2 <= s.length / PI * h1 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn inverse_monotone() {
        let s = GridSpec::dirichlet(1.0, 50).unwrap();
        for seed in 0..50 {
            let f = random_fn(s, seed).map(f64::abs);
            assert!(laplacian_solve(&f).unwrap().values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn cyclic_solver_matches_residual() {
        let s = GridSpec::periodic(1.0, 20).unwrap();
        let f = random_fn(s, 1);
        let dt = 0.3;
        let ih2 = 1.0 / (s.h() * s.h());
        let u = cyclic_solve(1.0 + 2.0 * dt * ih2, -dt * ih2, f.values());
        let ug = GridFunction::new(s, u).unwrap();
        let back = ug.sub(&laplacian_apply(&ug).scale(dt)).unwrap();
        for (a, b) in back.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_roundtrip() {
        let s = GridSpec::dirichlet(1.0, 16).unwrap();
        let u = random_fn(s, 3).map(|v| v * 1e-7 + 1.0 / 3.0);
        let text = u.to_text();
        assert_eq!(GridFunction::from_text(s, &text).unwrap(), u);
        assert!(matches!(GridFunction::from_text(s, "1.0\nx\n"), Err(GridError::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GridSpec::dirichlet(1.0, 0).is_err());
        assert!(GridSpec::dirichlet(-1.0, 3).is_err());
        assert!(GridSpec::periodic(1.0, 2).is_err());
        let s = GridSpec::dirichlet(1.0, 2).unwrap();
        assert!(GridFunction::new(s, vec![1.0]).is_err());
        assert!(GridFunction::new(s, vec![1.0, f64::NAN]).is_err());
        let p = GridSpec::periodic(1.0, 4).unwrap();
        assert_eq!(laplacian_solve(&p.zeros()), Err(GridError::NotDirichlet));
    }
}
