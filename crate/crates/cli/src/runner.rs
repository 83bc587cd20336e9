//! Dispatches a parsed configuration to the diagnostics.

use std::path::Path;

use serde_json::{json, Map, Value};
use syncrds_core::diagnostics::{
    attractor_estimate, equilibrium_cesaro, equilibrium_pushforward, interval_concentration, invariant_sampler,
    ks_critical_5pct, law_distance, order_preservation_test, sample_law, sync_curve, DiagnosticsError, LawMetric,
    SamplingMode,
};
use syncrds_core::orders::normality_probe;
use syncrds_core::rng::derive_seed;
use syncrds_core::{CocycleEngine, EngineError, OrderRelation, State, StateOrder};
use toml::Table;

use crate::config::{parse_engine, parse_noise, NoiseBlock, Section, StateSpec};
use crate::output::{Cell, PlotSpec, Report};
use crate::CliError;

pub const DIAGNOSTICS: [&str; 8] = [
    "simulate",
    "pullback",
    "sync-curve",
    "equilibrium",
    "interval-check",
    "normality-probe",
    "order-check",
    "mixing-check",
];

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        DiagnosticsError::from(e).into()
    }
}

/// Result of one run: the report plus the resolved settings for the manifest.
pub struct Outcome {
    pub report: Report,
    pub resolved: Map<String, Value>,
}

struct Ctx<'a> {
    engine: CocycleEngine,
    noise: NoiseBlock,
    base: &'a Path,
    resolved: Map<String, Value>,
}

impl Ctx<'_> {
    fn state(&mut self, sec: &mut Section, key: &str) -> Result<State, CliError> {
        let spec = StateSpec::parse(sec, key, self.base)?.unwrap_or(StateSpec::Default("default".into()));
        self.resolved.insert(key.into(), serde_json::to_value(&spec).unwrap_or(Value::Null));
        spec.build(&self.engine, &format!("diagnostic.{key}"))
    }

    fn required_state(&mut self, sec: &mut Section, key: &str) -> Result<State, CliError> {
        if !sec.has(key) {
            return Err(CliError::Config(format!("missing key diagnostic.{key}")));
        }
        self.state(sec, key)
    }

    fn states(&mut self, sec: &mut Section, key: &str) -> Result<Option<Vec<State>>, CliError> {
        let Some(specs) = StateSpec::parse_list(sec, key, self.base)? else { return Ok(None) };
        self.resolved.insert(key.into(), serde_json::to_value(&specs).unwrap_or(Value::Null));
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| s.build(&self.engine, &format!("diagnostic.{key}[{i}]")))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn record(&mut self, key: &str, v: impl serde::Serialize) {
        self.resolved.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn report(&self, name: &str, columns: &[&str]) -> Report {
        let mut r = Report::new(name, columns);
        r.engine = Some(self.engine.kind().name().to_string());
        r.seed = Some(self.noise.seed);
        r
    }
}

fn state_columns(prefix: &str, s: &State) -> Vec<String> {
    match s {
        State::Scalar(_) => vec![prefix.to_string()],
        State::Field(f) => (1..=f.len()).map(|j| format!("{prefix}{j}")).collect(),
    }
}

fn floats(v: impl IntoIterator<Item = f64>) -> Vec<Cell> {
    v.into_iter().map(Cell::Float).collect()
}

/// Snaps a time to the engine lattice.
fn snap(t: f64, dt: f64) -> f64 {
    (t / dt).round() * dt
}

pub fn run(doc: &Table, base: &Path, kind: &str) -> Result<Outcome, CliError> {
    let table = match doc.get("diagnostic") {
        Some(toml::Value::Table(t)) => Some(t),
        Some(_) => return Err(CliError::Config("diagnostic must be a table".into())),
        None => None,
    };
    let mut sec = Section::new("diagnostic", table);
    sec.get("kind");
    if kind == "normality-probe" {
        let ns: Vec<u32> = match sec.opt_f64_list("ns")? {
            Some(v) => v
                .into_iter()
                .map(|n| if n >= 1.0 && n.fract() == 0.0 { Ok(n as u32) } else { Err(CliError::Config(format!("diagnostic.ns entry {n} must be a positive integer"))) })
                .collect::<Result<_, _>>()?,
            None => vec![1, 8, 32, 64],
        };
        let quad_step = sec.f64_or("quad_step", 1e-4)?;
        sec.finish()?;
        let mut r = Report::new(kind, &["n", "seminorm", "ratio"]);
        for &n in &ns {
            let p = normality_probe(n, quad_step).map_err(|e| CliError::Config(e.to_string()))?;
            r.push(vec![Cell::Int(n as u64), Cell::Float(p.seminorm), Cell::Float(p.ratio)]);
        }
        r.plot = Some(PlotSpec { x: "n".into(), ys: vec!["ratio".into()], log_y: false });
        let mut resolved = Map::new();
        resolved.insert("ns".into(), json!(ns));
        resolved.insert("quad_step".into(), json!(quad_step));
        return Ok(Outcome { report: r, resolved });
    }

    let noise = parse_noise(doc, true)?;
    let engine = parse_engine(doc, noise.dt)?;
    let mut ctx = Ctx { engine, noise, base, resolved: Map::new() };
    let dt = ctx.engine.dt();
    let seed = ctx.noise.seed;

    let report = match kind {
        "simulate" => {
            let x0 = ctx.state(&mut sec, "x0")?;
            let [t0, t1] = ctx.noise.window.unwrap_or([0.0, 1.0]);
            let every = sec.usize_or("record_every", 1)?.max(1);
            sec.finish()?;
            ctx.record("record_every", every);
            let path = ctx.engine.noise(seed, t0, t1)?;
            let mut cols = vec!["t".to_string()];
            cols.extend(state_columns(if x0.as_scalar().is_some() { "x" } else { "u" }, &x0));
            let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
            let mut r = ctx.report(kind, &col_refs);
            let mut x = x0;
            let steps = path.steps();
            let row = |t: f64, x: &State| {
                let mut c = vec![Cell::Float(t)];
                c.extend(floats(x.components()));
                c
            };
            r.push(row(t0, &x));
            let mut k = 0;
            while k < steps {
                let next = (k + every).min(steps);
                let (ta, tb) = (t0 + k as f64 * dt, t0 + next as f64 * dt);
                x = ctx.engine.evolve(&path, &x, snap(ta, dt), snap(tb, dt))?;
                r.push(row(snap(tb, dt), &x));
                k = next;
            }
            r.plot = Some(PlotSpec { x: "t".into(), ys: vec![cols[1].clone()], log_y: false });
            r
        }
        "pullback" => {
            let init = match ctx.states(&mut sec, "init")? {
                Some(v) if !v.is_empty() => v,
                Some(_) => return Err(CliError::Config("diagnostic.init must not be empty".into())),
                None => vec![ctx.engine.default_state()],
            };
            let horizons = sec.f64_list("horizons")?;
            sec.finish()?;
            ctx.record("horizons", &horizons);
            let t_max = horizons.iter().cloned().fold(0.0, f64::max);
            let path = ctx.engine.noise(seed, -t_max, 0.0)?;
            let mut cols = vec!["t_pullback".to_string(), "spread".to_string()];
            cols.extend(state_columns("a_hat", &init[0]));
            let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
            let mut r = ctx.report(kind, &col_refs);
            for &t in &horizons {
                let a = attractor_estimate(&ctx.engine, &path, &init, t)?;
                let mut c = vec![Cell::Float(t), Cell::Float(a.spread)];
                c.extend(floats(a.a_hat.components()));
                r.push(c);
            }
            r.plot = Some(PlotSpec { x: "t_pullback".into(), ys: vec!["spread".into()], log_y: true });
            r
        }
        "sync-curve" => {
            let x = ctx.required_state(&mut sec, "x")?;
            let y = ctx.required_state(&mut sec, "y")?;
            let epsilon = sec.f64("epsilon")?;
            let times = sec.f64_list("times")?;
            let n_paths = sec.usize_or("n_paths", 500)?;
            let arbitrary = sec.bool_or("arbitrary_pair", false)?;
            sec.finish()?;
            ctx.record("epsilon", epsilon);
            ctx.record("times", &times);
            ctx.record("n_paths", n_paths);
            ctx.record("arbitrary_pair", arbitrary);
            let c = sync_curve(&ctx.engine, &x, &y, epsilon, &times, n_paths, seed, arbitrary)?;
            let mut r = ctx.report(kind, &["t", "epsilon", "p_hat", "ci_low", "ci_high", "n_paths"]);
            for row in &c.rows {
                r.push(vec![
                    Cell::Float(row.t),
                    Cell::Float(c.epsilon),
                    Cell::Float(row.p_hat),
                    Cell::Float(row.ci_low),
                    Cell::Float(row.ci_high),
                    Cell::Int(row.n_paths as u64),
                ]);
            }
            r.plot = Some(PlotSpec { x: "t".into(), ys: vec!["p_hat".into(), "ci_low".into(), "ci_high".into()], log_y: false });
            r
        }
        "equilibrium" => {
            let mode = sec.str_or("mode", "pushforward")?.to_string();
            let horizons = sec.f64_list("horizons")?;
            let r_points = sec.usize_or("r_points", 10)?;
            let explicit = ctx.states(&mut sec, "mu")?;
            let mu_n = sec.usize_or("mu_n", 100)?;
            let burn_in = sec.f64_or("mu_burn_in", 10.0)?;
            let gap = sec.f64_or("mu_gap", 1.0)?;
            let x0 = ctx.state(&mut sec, "x0")?;
            sec.finish()?;
            if mode != "pushforward" && mode != "cesaro" {
                return Err(CliError::Config(format!("diagnostic.mode '{mode}' is not pushforward or cesaro")));
            }
            ctx.record("mode", &mode);
            ctx.record("horizons", &horizons);
            let mu = match explicit {
                Some(m) => m,
                None => {
                    ctx.record("mu_n", mu_n);
                    ctx.record("mu_burn_in", burn_in);
                    ctx.record("mu_gap", gap);
                    invariant_sampler(&ctx.engine, &x0, burn_in, mu_n, gap, derive_seed(seed, u64::MAX))?
                }
            };
            let t_max = horizons.iter().cloned().fold(0.0, f64::max);
            let path = ctx.engine.noise(seed, -t_max, 0.0)?;
            let mut r = ctx.report(kind, &["t_pullback", "diameter", "n_cloud"]);
            for &t in &horizons {
                let cloud = if mode == "pushforward" {
                    equilibrium_pushforward(&ctx.engine, &path, &mu, t)?
                } else {
                    ctx.record("r_points", r_points);
                    let mut grid: Vec<f64> = (0..r_points.max(1))
                        .map(|k| {
                            let f = if r_points > 1 { k as f64 / (r_points - 1) as f64 } else { 1.0 };
                            snap(0.5 * t * (1.0 + f), dt).max(dt)
                        })
                        .collect();
                    grid.dedup();
                    equilibrium_cesaro(&ctx.engine, &path, &mu, &grid, None)?.0
                };
                r.push(vec![Cell::Float(t), Cell::Float(cloud.diameter), Cell::Int(cloud.len() as u64)]);
            }
            r.plot = Some(PlotSpec { x: "t_pullback".into(), ys: vec!["diameter".into()], log_y: true });
            r
        }
        "interval-check" => {
            let order = match sec.str_or("order", "pointwise")? {
                "pointwise" => OrderRelation::pointwise(),
                "dual" => OrderRelation::dual(),
                other => return Err(CliError::Config(format!("diagnostic.order '{other}' is not pointwise or dual"))),
            };
            let alpha = sec.f64_or("alpha", 0.05)?;
            let n = sec.usize_or("n", 1000)?;
            let burn_in = sec.f64_or("burn_in", 10.0)?;
            let gap = sec.f64_or("gap", 1.0)?;
            let x0 = ctx.state(&mut sec, "x0")?;
            sec.finish()?;
            ctx.record("order", order.kind);
            ctx.record("alpha", alpha);
            ctx.record("n", n);
            ctx.record("burn_in", burn_in);
            ctx.record("gap", gap);
            let samples = invariant_sampler(&ctx.engine, &x0, burn_in, n, gap, seed)?;
            let fit = interval_concentration(&samples, order, alpha)?;
            let mut r = ctx.report(kind, &["alpha", "coverage", "n_fit", "n_eval"]);
            r.push(vec![
                Cell::Float(alpha),
                Cell::Float(fit.coverage),
                Cell::Int(fit.n_fit as u64),
                Cell::Int(fit.n_eval as u64),
            ]);
            r.summary.insert("lower".into(), json!(fit.interval.lower().values()));
            r.summary.insert("upper".into(), json!(fit.interval.upper().values()));
            r
        }
        "order-check" => {
            let natural = ctx.engine.natural_order();
            let order = match sec.str_or("order", "natural")? {
                "natural" => natural,
                "pointwise" => StateOrder::Grid(OrderRelation::pointwise()),
                "dual" => StateOrder::Grid(OrderRelation::dual()),
                "real" => StateOrder::Real { tol: syncrds_core::orders::DEFAULT_TOL },
                "trivial" => StateOrder::Trivial,
                other => {
                    return Err(CliError::Config(format!(
                        "diagnostic.order '{other}' is not natural, pointwise, dual, real or trivial"
                    )))
                }
            };
            let trials = sec.usize_or("trials", 1000)?;
            let t_horizon = sec.f64_or("t_horizon", 1.0)?;
            sec.finish()?;
            ctx.record("order", format!("{order:?}"));
            ctx.record("trials", trials);
            ctx.record("t_horizon", t_horizon);
            let rep = order_preservation_test(&ctx.engine, order, trials, t_horizon, seed)?;
            let mut r = ctx.report(kind, &["trials", "violations", "worst", "tol"]);
            r.push(vec![
                Cell::Int(rep.trials as u64),
                Cell::Int(rep.violations as u64),
                Cell::Float(rep.worst),
                Cell::Float(rep.tol),
            ]);
            r
        }
        "mixing-check" => {
            let x = ctx.required_state(&mut sec, "x")?;
            let y = ctx.required_state(&mut sec, "y")?;
            let t = sec.f64("t")?;
            let n = sec.usize_or("n", 1000)?;
            let default_metric = if x.as_scalar().is_some() { "ks_scalar" } else { "energy_grid" };
            let metric = match sec.str_or("metric", default_metric)? {
                "ks_scalar" => LawMetric::KsScalar,
                "energy_grid" => LawMetric::EnergyGrid,
                other => {
                    return Err(CliError::Config(format!("diagnostic.metric '{other}' is not ks_scalar or energy_grid")))
                }
            };
            let pvf = sec.bool_or("pullback_vs_forward", true)?;
            sec.finish()?;
            ctx.record("t", t);
            ctx.record("n", n);
            ctx.record("metric", metric);
            ctx.record("pullback_vs_forward", pvf);
            let e = &ctx.engine;
            let crit = |m: LawMetric| match m {
                LawMetric::KsScalar => Cell::Float(ks_critical_5pct(n, n)),
                LawMetric::EnergyGrid => Cell::Empty,
            };
            let mut r = ctx.report(kind, &["comparison", "t", "n", "statistic", "critical_5pct"]);
            let a = sample_law(e, &x, t, n, derive_seed(seed, 0), SamplingMode::Forward)?;
            let b = sample_law(e, &y, t, n, derive_seed(seed, 1), SamplingMode::Forward)?;
            let d = law_distance(&a, &b, metric)?;
            r.push(vec![Cell::Text("two_start".into()), Cell::Float(t), Cell::Int(n as u64), Cell::Float(d), crit(metric)]);
            if pvf {
                let p = sample_law(e, &x, t, n, derive_seed(seed, 2), SamplingMode::Pullback)?;
                let d = law_distance(&a, &p, metric)?;
                r.push(vec![
                    Cell::Text("pullback_vs_forward".into()),
                    Cell::Float(t),
                    Cell::Int(n as u64),
                    Cell::Float(d),
                    crit(metric),
                ]);
            }
            r
        }
        other => {
            return Err(CliError::Config(format!(
                "diagnostic.kind '{other}' is not one of {}",
                DIAGNOSTICS.join(", ")
            )))
        }
    };

    let mut resolved = Map::new();
    resolved.insert("engine".into(), serde_json::to_value(ctx.engine.config()).unwrap_or(Value::Null));
    resolved.insert("noise".into(), serde_json::to_value(&ctx.noise).unwrap_or(Value::Null));
    resolved.insert("diagnostic".into(), Value::Object(ctx.resolved));
    Ok(Outcome { report, resolved })
}
