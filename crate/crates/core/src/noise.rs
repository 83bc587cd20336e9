//! Two-sided driving noise: Brownian, Q-Wiener on a Dirichlet grid, and
//! fractional Brownian motion, together with the metric shift `θ_s`.
//!
//! Paths live on an integer time lattice `t = k·dt`. Every stored value is an
//! integer multiple of [`QUANTUM`] and bounded by [`VALUE_BOUND`], so sums and
//! differences of path values are exact in `f64`. That is what makes
//! `shift`, `increment` and the engine cocycle identities hold bit-for-bit.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;

/// Lattice spacing of stored path values (2^-36).
pub const QUANTUM: f64 = 1.0 / (1u64 << 36) as f64;
/// Path values must stay strictly below this magnitude (2^15).
pub const VALUE_BOUND: f64 = 32768.0;
/// Default cap on `steps × dim` for a single path.
pub const DEFAULT_MAX_VALUES: usize = 1 << 27;

const ALIGN_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("empty or reversed window [{t0}, {t1}]")]
    InvalidWindow { t0: f64, t1: f64 },
    #[error("time {t} is not a multiple of dt = {dt}")]
    Misaligned { t: f64, dt: f64 },
    #[error("time {t} outside path window [{t_start}, {t_end}]")]
    OutOfWindow { t: f64, t_start: f64, t_end: f64 },
    #[error("{requested} path values exceed the configured maximum {max}")]
    TooManySteps { requested: usize, max: usize },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("invalid Q spec: {0}")]
    InvalidQSpec(String),
    #[error("Hurst index must lie in (0, 1), got {0}")]
    InvalidHurst(f64),
    #[error(
        "circulant embedding has a negative eigenvalue {value:e} at index {index}; \
         enable eigenvalue truncation to accept an approximate path"
    )]
    NegativeEigenvalue { index: usize, value: f64 },
    #[error("path value {0} exceeds the exact-arithmetic bound {VALUE_BOUND}")]
    ValueRange(f64),
    #[error("malformed binary path: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

/// Law of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Brownian,
    QWiener,
    Fbm { hurst: f64 },
}

/// Diagonal covariance `Q e_i = q_i² e_i` in the Dirichlet sine basis of `(0, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSpec {
    pub q: Vec<f64>,
    pub domain_length: f64,
}

impl QSpec {
    pub fn new(q: Vec<f64>, domain_length: f64) -> Result<Self, NoiseError> {
        let spec = QSpec { q, domain_length };
        spec.validate()?;
        Ok(spec)
    }

    /// `q_i = amplitude / i^decay` for `i = 1..=n_modes`.
    pub fn power_law(n_modes: usize, amplitude: f64, decay: f64, domain_length: f64) -> Result<Self, NoiseError> {
        let q = (1..=n_modes).map(|i| amplitude / (i as f64).powf(decay)).collect();
        Self::new(q, domain_length)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.q.is_empty() {
            return Err(NoiseError::InvalidQSpec("no modes".into()));
        }
        if !(self.domain_length.is_finite() && self.domain_length > 0.0) {
            return Err(NoiseError::InvalidQSpec(format!("domain length {}", self.domain_length)));
        }
        if let Some(bad) = self.q.iter().find(|q| !(q.is_finite() && **q >= 0.0)) {
            return Err(NoiseError::InvalidQSpec(format!("amplitude {bad} is not finite and nonnegative")));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.q.len()
    }

    /// `Σ q_i²`.
    pub fn trace(&self) -> f64 {
        self.q.iter().map(|q| q * q).sum()
    }

    pub fn is_non_degenerate(&self) -> bool {
        self.q.iter().all(|&q| q > 0.0)
    }

    /// More modes than interior nodes: the high modes alias on the grid.
    pub fn is_aliased(&self, grid_n: usize) -> bool {
        self.q.len() > grid_n
    }

    /// `√(2/L) sin(iπξ/L)`, the `i`-th (1-based) L²-normalized eigenfunction.
    pub fn mode(&self, i: usize, xi: f64) -> f64 {
        let l = self.domain_length;
        (2.0 / l).sqrt() * (i as f64 * PI * xi / l).sin()
    }
}

/// A sampled noise realization on the lattice `t = (start_index + k)·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    kind: NoiseKind,
    dt: f64,
    start_index: i64,
    dim: usize,
    values: Vec<f64>,
    seed: Option<u64>,
}

fn quantize(x: f64) -> f64 {
    (x / QUANTUM).round() * QUANTUM
}

fn aligned_index(t: f64, dt: f64) -> Result<i64, NoiseError> {
    let raw = t / dt;
    let k = raw.round();
    if !raw.is_finite() || (raw - k).abs() > ALIGN_TOL * raw.abs().max(1.0) {
        return Err(NoiseError::Misaligned { t, dt });
    }
    Ok(k as i64)
}

/// Validated `[t0, t1]` window as `(start_index, steps)`.
fn lattice_window(t0: f64, t1: f64, dt: f64, dim: usize, max_values: usize) -> Result<(i64, usize), NoiseError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(NoiseError::InvalidStep(dt));
    }
    if !(t0.is_finite() && t1.is_finite() && t0 < t1) {
        return Err(NoiseError::InvalidWindow { t0, t1 });
    }
    if dim == 0 {
        return Err(NoiseError::ZeroDimension);
    }
    let k0 = aligned_index(t0, dt)?;
    let k1 = aligned_index(t1, dt)?;
    let steps = (k1 - k0) as u128;
    let requested = (steps + 1).saturating_mul(dim as u128);
    if requested > max_values as u128 {
        return Err(NoiseError::TooManySteps { requested: requested.min(usize::MAX as u128) as usize, max: max_values });
    }
    Ok((k0, steps as usize))
}

impl NoisePath {
    /// Builds a path from per-step increments (`steps × dim`, row-major),
    /// pinned to zero at lattice index `pin` (relative to the window start).
    fn from_increment_rows(
        kind: NoiseKind,
        dt: f64,
        start_index: i64,
        dim: usize,
        increments: &[f64],
        pin: usize,
        seed: Option<u64>,
    ) -> Result<Self, NoiseError> {
        let steps = increments.len() / dim;
        let mut values = vec![0.0; (steps + 1) * dim];
        for k in pin..steps {
            for c in 0..dim {
                values[(k + 1) * dim + c] = values[k * dim + c] + quantize(increments[k * dim + c]);
            }
        }
        for k in (0..pin).rev() {
            for c in 0..dim {
                values[k * dim + c] = values[(k + 1) * dim + c] - quantize(increments[k * dim + c]);
            }
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() < VALUE_BOUND)) {
            return Err(NoiseError::ValueRange(*v));
        }
        Ok(NoisePath { kind, dt, start_index, dim, values, seed })
    }

    /// Path on `[t_start, t_start + steps·dt]` pinned at `t_start`, from raw
    /// increments (quantized on entry).
    pub fn from_increments(
        kind: NoiseKind,
        t_start: f64,
        dt: f64,
        dim: usize,
        increments: &[f64],
    ) -> Result<Self, NoiseError> {
        if dim == 0 {
            return Err(NoiseError::ZeroDimension);
        }
        if increments.is_empty() || increments.len() % dim != 0 {
            return Err(NoiseError::Format(format!("{} increments for dimension {dim}", increments.len())));
        }
        let steps = increments.len() / dim;
        let t1 = t_start + steps as f64 * dt;
        let (k0, _) = lattice_window(t_start, t1, dt, dim, usize::MAX)?;
        Self::from_increment_rows(kind, dt, k0, dim, increments, 0, None)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
    /// Number of stored time points.
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn steps(&self) -> usize {
        self.len() - 1
    }
    pub fn start_index(&self) -> i64 {
        self.start_index
    }
    pub fn t_start(&self) -> f64 {
        self.start_index as f64 * self.dt
    }
    pub fn t_end(&self) -> f64 {
        (self.start_index + self.steps() as i64) as f64 * self.dt
    }
    /// Row-major `(time × component)` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Position of time `t` in the stored rows.
    pub fn index_of(&self, t: f64) -> Result<usize, NoiseError> {
        let k = aligned_index(t, self.dt)? - self.start_index;
        if k < 0 || k as usize > self.steps() {
            return Err(NoiseError::OutOfWindow { t, t_start: self.t_start(), t_end: self.t_end() });
        }
        Ok(k as usize)
    }

    pub fn value_at(&self, t: f64) -> Result<&[f64], NoiseError> {
        Ok(self.row(self.index_of(t)?))
    }

    /// Increment over the `k`-th step, written into `out`.
    pub fn step_increment_into(&self, k: usize, out: &mut [f64]) {
        let d = self.dim;
        for c in 0..d {
            out[c] = self.values[(k + 1) * d + c] - self.values[k * d + c];
        }
    }

    /// `path(t) − path(s)`, componentwise.
    pub fn increment(&self, s: f64, t: f64) -> Result<Vec<f64>, NoiseError> {
        let (i, j) = (self.index_of(s)?, self.index_of(t)?);
        if i > j {
            return Err(NoiseError::InvalidWindow { t0: s, t1: t });
        }
        Ok(self.row(j).iter().zip(self.row(i)).map(|(b, a)| b - a).collect())
    }

    /// `θ_s`: the path `t ↦ path(t + s) − path(s)`.
    pub fn shift(&self, s: f64) -> Result<NoisePath, NoiseError> {
        let k = self.index_of(s)?;
        let origin = self.row(k).to_vec();
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(self.dim) {
            for (v, o) in row.iter_mut().zip(&origin) {
                *v -= o;
            }
        }
        let shift_steps = aligned_index(s, self.dt)?;
        Ok(NoisePath {
            kind: self.kind,
            dt: self.dt,
            start_index: self.start_index - shift_steps,
            dim: self.dim,
            values,
            seed: self.seed,
        })
    }

    /// Little-endian dump: 32-byte header (`SYNCRDS1`, dims, dt, t_start)
    /// followed by the row-major values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), NoiseError> {
        let io = |e: std::io::Error| NoiseError::Io(e.to_string());
        w.write_all(b"SYNCRDS1").map_err(io)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.dt.to_le_bytes()).map_err(io)?;
        w.write_all(&self.t_start().to_le_bytes()).map_err(io)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    /// Inverse of [`write_binary`](Self::write_binary). The header does not
    /// record the noise law, so the caller supplies it.
    pub fn read_binary<R: Read>(mut r: R, kind: NoiseKind) -> Result<NoisePath, NoiseError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| NoiseError::Io(e.to_string()))?;
        if buf.len() < 32 || &buf[..8] != b"SYNCRDS1" {
            return Err(NoiseError::Format("missing SYNCRDS1 header".into()));
        }
        let word = |i: usize| -> [u8; 8] { buf[i..i + 8].try_into().unwrap() };
        let dim = u64::from_le_bytes(word(8)) as usize;
        let dt = f64::from_le_bytes(word(16));
        let t_start = f64::from_le_bytes(word(24));
        let body = &buf[32..];
        if dim == 0 || body.len() % (8 * dim) != 0 || body.len() < 16 * dim {
            return Err(NoiseError::Format(format!("body of {} bytes does not hold rows of dimension {dim}", body.len())));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(NoiseError::InvalidStep(dt));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(v) = values.iter().find(|v| !(v.abs() < VALUE_BOUND) || quantize(**v) != **v) {
            return Err(NoiseError::Format(format!("value {v} is off the noise lattice")));
        }
        Ok(NoisePath { kind, dt, start_index: aligned_index(t_start, dt)?, dim, values, seed: None })
    }
}

/// Standard Brownian motion with `dim` independent components on `[t0, t1]`,
/// pinned to zero at `t0`.
pub fn gen_brownian(seed: u64, t0: f64, t1: f64, dt: f64, dim: usize) -> Result<NoisePath, NoiseError> {
    gen_brownian_capped(seed, t0, t1, dt, dim, DEFAULT_MAX_VALUES)
}

pub fn gen_brownian_capped(
    seed: u64,
    t0: f64,
    t1: f64,
    dt: f64,
    dim: usize,
    max_values: usize,
) -> Result<NoisePath, NoiseError> {
    let (k0, steps) = lattice_window(t0, t1, dt, dim, max_values)?;
    let mut rng = stream_rng(seed, 0);
    let sd = dt.sqrt();
    let inc: Vec<f64> = (0..steps * dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    NoisePath::from_increment_rows(NoiseKind::Brownian, dt, k0, dim, &inc, 0, Some(seed))
}

/// Q-Wiener process evaluated at the `grid_n` interior nodes `ξ_j = jL/(grid_n+1)`:
/// `W(t, ξ_j) = Σ_i q_i √(2/L) sin(iπξ_j/L) β_i(t)`, pinned at `t0`.
pub fn gen_q_wiener(seed: u64, qspec: &QSpec, grid_n: usize, t0: f64, t1: f64, dt: f64) -> Result<NoisePath, NoiseError> {
    qspec.validate()?;
    let (k0, steps) = lattice_window(t0, t1, dt, grid_n, DEFAULT_MAX_VALUES)?;
    let modes = qspec.n_modes();
    let h = qspec.domain_length / (grid_n + 1) as f64;
    // basis[i][j] = q_i e_i(ξ_j)
    let basis: Vec<Vec<f64>> = (0..modes)
        .map(|i| (1..=grid_n).map(|j| qspec.q[i] * qspec.mode(i + 1, j as f64 * h)).collect())
        .collect();
    let mut rng = stream_rng(seed, 0);
    let sd = dt.sqrt();
    let mut inc = vec![0.0; steps * grid_n];
    let mut db = vec![0.0; modes];
    for k in 0..steps {
        for b in db.iter_mut() {
            *b = sd * rng.sample::<f64, _>(StandardNormal);
        }
        let row = &mut inc[k * grid_n..(k + 1) * grid_n];
        for (i, b) in db.iter().enumerate() {
            for (r, e) in row.iter_mut().zip(&basis[i]) {
                *r += e * b;
            }
        }
    }
    NoisePath::from_increment_rows(NoiseKind::QWiener, dt, k0, grid_n, &inc, 0, Some(seed))
}

/// Fractional Brownian motion with `Var B_1 = 1`, pinned to zero at time 0
/// (or at `t0` when the window does not contain 0).
pub fn gen_fbm(seed: u64, hurst: f64, t0: f64, t1: f64, dt: f64) -> Result<NoisePath, NoiseError> {
    gen_fbm_with(seed, hurst, t0, t1, dt, false)
}

/// As [`gen_fbm`]; with `truncate_negative` set, negative circulant
/// eigenvalues are zeroed instead of rejected and the path is only
/// approximately fBm.
pub fn gen_fbm_with(
    seed: u64,
    hurst: f64,
    t0: f64,
    t1: f64,
    dt: f64,
    truncate_negative: bool,
) -> Result<NoisePath, NoiseError> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(NoiseError::InvalidHurst(hurst));
    }
    let (k0, steps) = lattice_window(t0, t1, dt, 1, DEFAULT_MAX_VALUES)?;
    let eig = circulant_eigenvalues(hurst, steps, truncate_negative)?;
    let mut rng = stream_rng(seed, 0);
    let fgn = davies_harte_sample(&eig, steps, &mut rng);
    let scale = dt.powf(hurst);
    let inc: Vec<f64> = fgn.iter().map(|x| x * scale).collect();
    let pin = if k0 <= 0 && k0 + steps as i64 >= 0 { (-k0) as usize } else { 0 };
    NoisePath::from_increment_rows(NoiseKind::Fbm { hurst }, dt, k0, 1, &inc, pin, Some(seed))
}

/// Autocovariance of unit-step fractional Gaussian noise at lag `k`.
pub fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let k = k as f64;
    let e = 2.0 * hurst;
    0.5 * ((k + 1.0).powf(e) + (k - 1.0).abs().powf(e) - 2.0 * k.powf(e))
}

/// Eigenvalues of the `2n`-circulant embedding of the fGn covariance.
fn circulant_eigenvalues(hurst: f64, n: usize, truncate_negative: bool) -> Result<Vec<f64>, NoiseError> {
    let m = 2 * n;
    let mut row: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m];
    for k in 0..=n {
        row[k].re = fgn_autocovariance(hurst, k);
    }
    for k in 1..n {
        row[m - k].re = fgn_autocovariance(hurst, k);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut row);
    let max = row.iter().map(|c| c.re).fold(0.0_f64, f64::max);
    // round-off floor: exact eigenvalues of the fGn embedding are nonnegative
    let floor = -1e-10 * max.max(1.0);
    let mut eig = Vec::with_capacity(m);
    for (index, c) in row.iter().enumerate() {
        let value = c.re;
        if value < floor && !truncate_negative {
            return Err(NoiseError::NegativeEigenvalue { index, value });
        }
        eig.push(value.max(0.0));
    }
    Ok(eig)
}

fn davies_harte_sample<R: Rng>(eig: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let m = eig.len();
    let mut w = vec![Complex::new(0.0, 0.0); m];
    let mf = m as f64;
    w[0] = Complex::new((eig[0] / mf).sqrt() * rng.sample::<f64, _>(StandardNormal), 0.0);
    w[n] = Complex::new((eig[n] / mf).sqrt() * rng.sample::<f64, _>(StandardNormal), 0.0);
    for k in 1..n {
        let s = (eig[k] / (2.0 * mf)).sqrt();
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        w[k] = Complex::new(s * a, s * b);
        w[m - k] = w[k].conj();
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut w);
    w[..n].iter().map(|c| c.re).collect()
}
