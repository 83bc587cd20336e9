//! Experiment configuration: TOML text, `--set` overrides, and a strict
//! reader that names missing keys and rejects unknown ones.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::Serialize;
use syncrds_core::engines::{Drift, FbmConfig, OuConfig, ReflectedConfig, SpmeConfig, TwoWallConfig};
use syncrds_core::grid::Boundary;
use syncrds_core::{CocycleEngine, EngineConfig, GridFunction, GridSpec, QSpec, State};
use toml::{Table, Value};

use crate::CliError;

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

/// Reads keys out of one TOML table, remembering which were consumed.
pub struct Section<'a> {
    path: String,
    table: Option<&'a Table>,
    used: BTreeSet<String>,
}

impl<'a> Section<'a> {
    pub fn new(path: &str, table: Option<&'a Table>) -> Self {
        Section { path: path.to_string(), table, used: BTreeSet::new() }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    pub fn has(&self, k: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(k))
    }

    pub fn get(&mut self, k: &str) -> Option<&'a Value> {
        let v = self.table?.get(k)?;
        self.used.insert(k.to_string());
        Some(v)
    }

    pub fn require(&mut self, k: &str) -> Result<&'a Value, CliError> {
        match self.get(k) {
            Some(v) => Ok(v),
            None => cfg_err(format!("missing key {}", self.key(k))),
        }
    }

    fn as_f64(&self, k: &str, v: &Value) -> Result<f64, CliError> {
        match v {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => cfg_err(format!("{} must be a number", self.key(k))),
        }
    }

    pub fn f64(&mut self, k: &str) -> Result<f64, CliError> {
        let v = self.require(k)?;
        self.as_f64(k, v)
    }

    pub fn f64_or(&mut self, k: &str, default: f64) -> Result<f64, CliError> {
        match self.get(k) {
            Some(v) => self.as_f64(k, v),
            None => Ok(default),
        }
    }

    pub fn opt_f64(&mut self, k: &str) -> Result<Option<f64>, CliError> {
        match self.get(k) {
            Some(v) => self.as_f64(k, v).map(Some),
            None => Ok(None),
        }
    }

    fn as_u64(&self, k: &str, v: &Value) -> Result<u64, CliError> {
        match v {
            Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            _ => cfg_err(format!("{} must be a nonnegative integer", self.key(k))),
        }
    }

    pub fn u64(&mut self, k: &str) -> Result<u64, CliError> {
        let v = self.require(k)?;
        self.as_u64(k, v)
    }

    pub fn usize_or(&mut self, k: &str, default: usize) -> Result<usize, CliError> {
        match self.get(k) {
            Some(v) => self.as_u64(k, v).map(|x| x as usize),
            None => Ok(default),
        }
    }

    pub fn usize(&mut self, k: &str) -> Result<usize, CliError> {
        self.u64(k).map(|x| x as usize)
    }

    pub fn bool_or(&mut self, k: &str, default: bool) -> Result<bool, CliError> {
        match self.get(k) {
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => cfg_err(format!("{} must be true or false", self.key(k))),
            None => Ok(default),
        }
    }

    pub fn str(&mut self, k: &str) -> Result<&'a str, CliError> {
        match self.require(k)? {
            Value::String(s) => Ok(s),
            _ => cfg_err(format!("{} must be a string", self.key(k))),
        }
    }

    pub fn str_or(&mut self, k: &str, default: &'a str) -> Result<&'a str, CliError> {
        match self.get(k) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => cfg_err(format!("{} must be a string", self.key(k))),
            None => Ok(default),
        }
    }

    fn f64_list_of(&self, k: &str, v: &Value) -> Result<Vec<f64>, CliError> {
        match v {
            Value::Array(a) => a.iter().map(|x| self.as_f64(k, x)).collect(),
            _ => cfg_err(format!("{} must be an array of numbers", self.key(k))),
        }
    }

    pub fn f64_list(&mut self, k: &str) -> Result<Vec<f64>, CliError> {
        let v = self.require(k)?;
        self.f64_list_of(k, v)
    }

    pub fn opt_f64_list(&mut self, k: &str) -> Result<Option<Vec<f64>>, CliError> {
        match self.get(k) {
            Some(v) => self.f64_list_of(k, v).map(Some),
            None => Ok(None),
        }
    }

    pub fn sub(&mut self, k: &str) -> Result<Option<Section<'a>>, CliError> {
        let path = self.key(k);
        match self.get(k) {
            Some(Value::Table(t)) => Ok(Some(Section::new(&path, Some(t)))),
            Some(_) => cfg_err(format!("{path} must be a table")),
            None => Ok(None),
        }
    }

    /// Fails on any key that was never read.
    pub fn finish(self) -> Result<(), CliError> {
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !self.used.contains(*k)) {
                return cfg_err(format!("unknown key {}", self.key(k)));
            }
        }
        Ok(())
    }
}

/// Parses the override value as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Applies `a.b.c=value` to the document, creating tables as needed.
pub fn apply_override(doc: &mut Table, spec: &str) -> Result<(), CliError> {
    let Some((key, value)) = spec.split_once('=') else {
        return cfg_err(format!("override '{spec}' is not of the form key=value"));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return cfg_err(format!("override key '{key}' is malformed"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return cfg_err(format!("override '{key}': {p} is not a table")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

pub fn load_document(path: &Path, overrides: &[String]) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: Table =
        text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    Ok(doc)
}

/// How a state is written in the config.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum StateSpec {
    Default(String),
    Scalar(f64),
    Values(Vec<f64>),
    Profile { amplitude: f64, mode: u32, offset: f64 },
    File { file: PathBuf },
}

impl StateSpec {
    pub fn parse(sec: &mut Section, key: &str, base: &Path) -> Result<Option<StateSpec>, CliError> {
        let full = sec.key(key);
        match sec.get(key) {
            Some(v) => StateSpec::from_value(v, &full, base).map(Some),
            None => Ok(None),
        }
    }

    pub fn from_value(v: &Value, full: &str, base: &Path) -> Result<StateSpec, CliError> {
        let num = |x: &Value| match x {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => cfg_err(format!("{full} must contain numbers only")),
        };
        Ok(match v {
            Value::String(s) if s == "default" => StateSpec::Default(s.clone()),
            Value::Float(_) | Value::Integer(_) => StateSpec::Scalar(num(v)?),
            Value::Array(a) => StateSpec::Values(a.iter().map(num).collect::<Result<_, _>>()?),
            Value::Table(t) => {
                let mut s = Section::new(full, Some(t));
                let spec = if s.get("file").is_some() {
                    StateSpec::File { file: base.join(s.str("file")?) }
                } else {
                    StateSpec::Profile {
                        amplitude: s.f64("amplitude")?,
                        mode: s.usize_or("mode", 1)? as u32,
                        offset: s.f64_or("offset", 0.0)?,
                    }
                };
                s.finish()?;
                spec
            }
            _ => return cfg_err(format!("{full} must be a number, array, table or \"default\"")),
        })
    }

    /// A list of states written as a TOML array of state specs.
    pub fn parse_list(sec: &mut Section, key: &str, base: &Path) -> Result<Option<Vec<StateSpec>>, CliError> {
        let full = sec.key(key);
        match sec.get(key) {
            Some(Value::Array(a)) => a
                .iter()
                .enumerate()
                .map(|(i, v)| StateSpec::from_value(v, &format!("{full}[{i}]"), base))
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(_) => cfg_err(format!("{full} must be an array of states")),
            None => Ok(None),
        }
    }

    pub fn build(&self, engine: &CocycleEngine, key: &str) -> Result<State, CliError> {
        let grid = engine.grid();
        let state = match (self, grid) {
            (StateSpec::Default(_), _) => engine.default_state(),
            (StateSpec::Scalar(x), None) => State::Scalar(*x),
            (StateSpec::Scalar(c), Some(g)) => State::Field(g.from_fn(|_| *c)),
            (StateSpec::Values(v), Some(g)) => State::Field(
                GridFunction::new(g, v.clone()).map_err(|e| CliError::Config(format!("{key}: {e}")))?,
            ),
            (StateSpec::Profile { amplitude, mode, offset }, Some(g)) => {
                let k = *mode as f64;
                let arg = match g.boundary {
                    Boundary::Dirichlet => k * PI / g.length,
                    Boundary::Periodic => 2.0 * k * PI / g.length,
                };
                State::Field(g.from_fn(|s| offset + amplitude * (arg * s).sin()))
            }
            (StateSpec::File { file }, Some(g)) => {
                let text = std::fs::read_to_string(file)
                    .map_err(|e| CliError::Config(format!("{key}: cannot read {}: {e}", file.display())))?;
                State::Field(GridFunction::from_text(g, &text).map_err(|e| CliError::Config(format!("{key}: {e}")))?)
            }
            (_, None) => return cfg_err(format!("{key}: the {} engine takes a scalar state", engine.kind().name())),
        };
        engine.check_state(&state).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        Ok(state)
    }
}

fn parse_drift(sec: &mut Section, key: &str) -> Result<Drift, CliError> {
    let Some(mut d) = sec.sub(key)? else {
        return Ok(Drift::Linear { rate: 1.0 });
    };
    let drift = match d.str("type")? {
        "linear" => Drift::Linear { rate: d.f64_or("rate", 1.0)? },
        "double_well" => Drift::DoubleWell,
        "polynomial" => Drift::Polynomial { coeffs: d.f64_list("coeffs")? },
        "table" => Drift::Table { knots: d.f64_list("knots")?, values: d.f64_list("values")? },
        other => {
            return cfg_err(format!(
                "{}.{key}.type '{other}' is not one of linear, double_well, polynomial, table",
                sec.path
            ))
        }
    };
    d.finish()?;
    Ok(drift)
}

fn wall(sec: &mut Section, key: &str, grid: GridSpec) -> Result<GridFunction, CliError> {
    let full = sec.key(key);
    match sec.require(key)? {
        Value::Float(_) | Value::Integer(_) => {
            let c = sec.f64(key)?;
            Ok(grid.from_fn(|_| c))
        }
        Value::Array(_) => {
            GridFunction::new(grid, sec.f64_list(key)?).map_err(|e| CliError::Config(format!("{full}: {e}")))
        }
        Value::Table(t) => {
            let mut s = Section::new(&full, Some(t));
            let (amp, mode, offset) = (s.f64("amplitude")?, s.usize_or("mode", 1)? as f64, s.f64_or("offset", 0.0)?);
            s.finish()?;
            Ok(grid.from_fn(|x| offset + amp * (2.0 * PI * mode * x / grid.length).sin()))
        }
        _ => cfg_err(format!("{full} must be a number, array or profile table")),
    }
}

pub fn parse_engine(doc: &Table, dt: f64) -> Result<CocycleEngine, CliError> {
    let table = match doc.get("engine") {
        Some(Value::Table(t)) => Some(t),
        Some(_) => return cfg_err("engine must be a table"),
        None => return cfg_err("missing section [engine] (missing key engine.kind)"),
    };
    let mut s = Section::new("engine", table);
    let config = match s.str("kind")? {
        "ou" => EngineConfig::Ou(OuConfig { rate: s.f64_or("rate", 1.0)? }),
        "fbm_sde" => EngineConfig::FbmSde(FbmConfig {
            hurst: s.f64("hurst")?,
            drift: parse_drift(&mut s, "drift")?,
            ode_substeps: s.usize_or("ode_substeps", 1)?,
        }),
        "reflected" => EngineConfig::Reflected(ReflectedConfig {
            lower: s.f64("lower")?,
            upper: s.f64("upper")?,
            drift: parse_drift(&mut s, "drift")?,
        }),
        "torus" => EngineConfig::Torus,
        "spme" => {
            let n = s.usize("n")?;
            let length = s.f64_or("length", 1.0)?;
            let grid = GridSpec::dirichlet(length, n).map_err(|e| CliError::Config(format!("engine: {e}")))?;
            let qspec = match s.opt_f64_list("q")? {
                Some(q) => QSpec::new(q, length),
                None => QSpec::power_law(
                    s.usize_or("n_modes", n)?,
                    s.f64_or("q_amplitude", 1.0)?,
                    s.f64_or("q_decay", 1.0)?,
                    length,
                ),
            }
            .map_err(|e| CliError::Config(format!("engine: {e}")))?;
            let mut cfg = SpmeConfig::new(grid, s.f64_or("m", 2.0)?, qspec);
            cfg.newton_tol = s.f64_or("newton_tol", cfg.newton_tol)?;
            cfg.newton_max_iter = s.usize_or("newton_max_iter", cfg.newton_max_iter)?;
            cfg.jac_reg = s.f64_or("jac_reg", cfg.jac_reg)?;
            cfg.sigma = s.opt_f64("sigma")?;
            EngineConfig::Spme(cfg)
        }
        "two_wall" => {
            let n = s.usize("n")?;
            let length = s.f64_or("length", 1.0)?;
            let grid = GridSpec::periodic(length, n).map_err(|e| CliError::Config(format!("engine: {e}")))?;
            EngineConfig::TwoWall(TwoWallConfig {
                grid,
                lower: wall(&mut s, "lower", grid)?,
                upper: wall(&mut s, "upper", grid)?,
                drift: parse_drift(&mut s, "drift")?,
            })
        }
        other => {
            return cfg_err(format!(
                "engine.kind '{other}' is not one of ou, fbm_sde, reflected, torus, spme, two_wall"
            ))
        }
    };
    s.finish()?;
    CocycleEngine::new(config, dt).map_err(|e| CliError::Config(format!("engine: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseBlock {
    pub seed: u64,
    pub dt: f64,
    pub window: Option<[f64; 2]>,
}

pub fn parse_noise(doc: &Table, needs_dt: bool) -> Result<NoiseBlock, CliError> {
    let table = match doc.get("noise") {
        Some(Value::Table(t)) => Some(t),
        Some(_) => return cfg_err("noise must be a table"),
        None => None,
    };
    let mut s = Section::new("noise", table);
    let seed = s.u64("seed")?;
    let dt = if needs_dt { s.f64("dt")? } else { s.f64_or("dt", 0.01)? };
    let window = match s.opt_f64_list("window")? {
        Some(w) if w.len() == 2 => Some([w[0], w[1]]),
        Some(_) => return cfg_err("noise.window must have exactly two entries"),
        None => None,
    };
    s.finish()?;
    Ok(NoiseBlock { seed, dt, window })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub csv: bool,
    pub json: bool,
    pub plot: bool,
}

pub fn parse_output(doc: &Table, base: &Path) -> Result<OutputBlock, CliError> {
    let table = match doc.get("output") {
        Some(Value::Table(t)) => Some(t),
        Some(_) => return cfg_err("output must be a table"),
        None => None,
    };
    let mut s = Section::new("output", table);
    let dir = base.join(s.str_or("dir", "out")?);
    let formats: Vec<String> = match s.get("formats") {
        None => vec!["csv".into(), "json".into()],
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| match v {
                Value::String(f) if f == "csv" || f == "json" => Ok(f.clone()),
                _ => cfg_err("output.formats entries must be \"csv\" or \"json\""),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return cfg_err("output.formats must be an array"),
    };
    let plot = s.bool_or("plot", false)?;
    s.finish()?;
    Ok(OutputBlock { dir, csv: formats.iter().any(|f| f == "csv"), json: formats.iter().any(|f| f == "json"), plot })
}

/// Thread count from the config, else `SYNCRDS_THREADS`, else 0 (all cores).
pub fn parse_threads(doc: &Table) -> Result<usize, CliError> {
    match doc.get("threads") {
        Some(Value::Integer(n)) if *n >= 0 => Ok(*n as usize),
        Some(_) => cfg_err("threads must be a nonnegative integer"),
        None => match std::env::var("SYNCRDS_THREADS") {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("SYNCRDS_THREADS='{v}' is not a count"))),
            Err(_) => Ok(0),
        },
    }
}

pub fn check_top_level(doc: &Table) -> Result<(), CliError> {
    const KNOWN: [&str; 5] = ["engine", "noise", "diagnostic", "output", "threads"];
    match doc.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        Some(k) => cfg_err(format!("unknown key {k}")),
        None => Ok(()),
    }
}
