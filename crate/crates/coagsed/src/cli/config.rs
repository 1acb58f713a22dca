//! Flat `key = value` experiment configuration with dotted sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::diagnostics::EnvelopeMode;
use crate::diagonal_limit::Closure;
use crate::grid_fields::{derived_constants, Grid2D, ModelInputs, ParamMode, Params};
use crate::kernels::{truncate, KernelSpec};
use crate::splitting_solver::Scheme;
use crate::{Error, Result};

/// Every accepted key with its default. `None` marks an optional key.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("model.epsilon", Some("0.05")),
    ("model.alpha", Some("0.5")),
    ("model.gamma", Some("1.2")),
    ("model.b", Some("4")),
    ("model.m", Some("10")),
    ("model.a", Some("1")),
    ("model.m1", Some("64")),
    ("model.m2", Some("67108864")),
    ("model.l", Some("1")),
    ("model.mode", Some("theorem")),
    ("grid.y_min", None),
    ("grid.y_max", None),
    ("grid.ny", Some("128")),
    ("grid.v_min", Some("0.015625")),
    ("grid.q", Some("8")),
    ("grid.nv", Some("97")),
    ("kernel.type", Some("sum")),
    ("kernel.gamma", None),
    ("kernel.alpha", None),
    ("kernel.k0", Some("1")),
    ("kernel.epsilon_scale", Some("1")),
    ("kernel.truncation_N", None),
    ("solver.type", Some("splitting")),
    ("solver.scheme", Some("strang")),
    ("solver.horizon", Some("0.1")),
    ("solver.dt", Some("0.001")),
    ("solver.snapshot_every", Some("10")),
    ("picard.intervals", Some("10")),
    ("picard.substeps", Some("3")),
    ("picard.tol", Some("1e-10")),
    ("picard.max_iter", Some("12")),
    ("sweep.epsilons", Some("0.2,0.1,0.05")),
    ("sweep.delta", Some("0.25")),
    ("diagonal.dt", Some("0.001")),
    ("diagonal.horizon", None),
    ("diagonal.snapshot_every", Some("1")),
    ("diagonal.closure", Some("closed")),
    ("characteristics.epsilon", None),
    ("characteristics.starts", Some("1000")),
    ("characteristics.t_end", Some("1")),
    ("characteristics.v_lo", Some("1")),
    ("characteristics.v_hi", Some("10")),
    ("characteristics.depth", Some("5")),
    ("characteristics.rtol", Some("1e-10")),
    ("characteristics.atol", Some("1e-12")),
    ("characteristics.bound_tol", Some("1e-6")),
    ("characteristics.fd_every", Some("100")),
    ("characteristics.epsilon_ladder", None),
    ("characteristics.k3_ladder", None),
    ("characteristics.time_samples", Some("16")),
    ("envelope.mode", Some("cell_average")),
    ("envelope.subsamples", Some("16")),
    ("envelope.fit", Some("false")),
    ("envelope.ladder_start", Some("1")),
    ("envelope.ladder_count", Some("80")),
    ("check.lemma_samples", Some("100000")),
    ("check.decay_kmax", Some("12")),
    ("check.horizon", Some("0.02")),
    ("check.snapshot", None),
    ("run.seed", Some("0")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Sum,
    Rain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Splitting,
    Mild,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
    pub v_min: f64,
    pub q: usize,
    pub nv: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<Arc<Grid2D>> {
        Ok(Arc::new(Grid2D::new(self.y_min, self.y_max, self.ny, self.v_min, self.q, self.nv)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PicardConfig {
    pub intervals: usize,
    pub substeps: usize,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DiagonalConfig {
    pub dt: f64,
    pub horizon: f64,
    pub snapshot_every: usize,
    pub closure: Closure,
}

#[derive(Debug, Clone)]
pub struct CharConfig {
    pub epsilon: f64,
    pub starts: usize,
    pub t_end: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub depth: f64,
    pub rtol: f64,
    pub atol: f64,
    pub bound_tol: f64,
    pub fd_every: usize,
    pub epsilon_ladder: Vec<f64>,
    pub k3_ladder: Vec<f64>,
    pub time_samples: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EnvelopeConfig {
    pub mode: EnvelopeMode,
    pub fit: bool,
    pub ladder_start: f64,
    pub ladder_count: usize,
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub lemma_samples: usize,
    pub decay_kmax: u32,
    pub horizon: f64,
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    raw: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
    pub params: Params,
    pub grid: GridSpec,
    pub kernel_kind: KernelKind,
    pub kernel: KernelSpec,
    pub solver: SolverKind,
    pub scheme: Scheme,
    pub horizon: f64,
    pub dt: f64,
    pub snapshot_every: usize,
    pub picard: PicardConfig,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub diagonal: DiagonalConfig,
    pub characteristics: CharConfig,
    pub envelope: EnvelopeConfig,
    pub check: CheckConfig,
    pub seed: u64,
}

fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(map)
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let s = self.raw(key).ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        let Some(s) = self.raw(key) else { return Ok(Vec::new()) };
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {x:?} as a number")))
            })
            .collect()
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        let s = self.raw(key).unwrap_or_default();
        options.iter().find(|(name, _)| *name == s).map(|&(_, t)| t).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key}: expected one of {names:?}, got {s:?}"))
        })
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(parse_text(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Returns a copy with one key replaced; the result is validated again.
    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.insert(key.to_string(), value.to_string());
        Self::from_entries(raw)
    }

    /// Every key with its effective value, optional keys resolved where they have one.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    pub fn from_entries(raw: BTreeMap<String, String>) -> Result<Self> {
        for k in raw.keys() {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        let mut map = raw.clone();
        for (k, d) in KEYS {
            if let Some(d) = d {
                map.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }
        let r = Reader { map: &map };
        let mode = r.choice("model.mode", &[("theorem", ParamMode::Theorem), ("relaxed", ParamMode::Relaxed)])?;
        let inputs = ModelInputs {
            epsilon: r.get("model.epsilon")?,
            alpha: r.get("model.alpha")?,
            gamma: r.get("model.gamma")?,
            b: r.get("model.b")?,
            m: r.get("model.m")?,
            a: r.get("model.a")?,
            m1: r.get("model.m1")?,
            m2: r.get("model.m2")?,
        };
        let params = derived_constants(inputs, mode)
            .map_err(|e| Error::Config(format!("model: {e}")))?
            .with_drift(r.get("model.l")?);

        let (ny, v_min, q, nv): (usize, f64, usize, usize) =
            (r.get("grid.ny")?, r.get("grid.v_min")?, r.get("grid.q")?, r.get("grid.nv")?);
        let default_box = Grid2D::default_box(params.alpha, ny.max(2), v_min, q.max(1), nv.max(1))
            .map_err(|e| Error::Config(format!("grid: {e}")))?;
        let grid = GridSpec {
            y_min: r.opt("grid.y_min")?.unwrap_or(default_box.y_min()),
            y_max: r.opt("grid.y_max")?.unwrap_or(default_box.y_max()),
            ny,
            v_min,
            q,
            nv,
        };
        grid.build().map_err(|e| Error::Config(format!("grid: {e}")))?;

        let kernel_kind = r.choice("kernel.type", &[("sum", KernelKind::Sum), ("rain", KernelKind::Rain)])?;
        let k_gamma = r.opt("kernel.gamma")?.unwrap_or(params.gamma);
        let k_alpha = r.opt("kernel.alpha")?.unwrap_or(params.alpha);
        let k0: f64 = r.get("kernel.k0")?;
        let base = match kernel_kind {
            KernelKind::Sum => {
                let mut k = KernelSpec::sum(k_gamma);
                k.k0 = k0;
                k
            }
            KernelKind::Rain => KernelSpec::rain(k_alpha, k_gamma, k0),
        };
        let scale: f64 = r.get("kernel.epsilon_scale")?;
        let scaled = if scale == 1.0 { base } else { base.scaled(scale) };
        let kernel = match r.opt::<f64>("kernel.truncation_N")? {
            Some(n) => truncate(&scaled, n).map_err(|e| Error::Config(format!("kernel.truncation_N: {e}")))?,
            None => scaled,
        };

        let solver = r.choice("solver.type", &[("splitting", SolverKind::Splitting), ("mild", SolverKind::Mild)])?;
        let scheme = r.choice("solver.scheme", &[("strang", Scheme::Strang), ("lie", Scheme::Lie)])?;
        let horizon: f64 = r.get("solver.horizon")?;
        let dt: f64 = r.get("solver.dt")?;
        if !(horizon >= 0.0 && dt > 0.0) {
            return Err(Error::Config(format!("need solver.horizon >= 0 and solver.dt > 0, got {horizon}, {dt}")));
        }

        let epsilons = r.list("sweep.epsilons")?;
        if epsilons.is_empty() || epsilons.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Config("sweep.epsilons must be a nonempty list in (0,1)".into()));
        }

        let diagonal = DiagonalConfig {
            dt: r.get("diagonal.dt")?,
            horizon: r.opt("diagonal.horizon")?.unwrap_or(horizon),
            snapshot_every: r.get("diagonal.snapshot_every")?,
            closure: r.choice("diagonal.closure", &[("closed", Closure::Closed), ("open", Closure::Open)])?,
        };

        let characteristics = CharConfig {
            epsilon: r.opt("characteristics.epsilon")?.unwrap_or(params.epsilon),
            starts: r.get("characteristics.starts")?,
            t_end: r.get("characteristics.t_end")?,
            v_lo: r.get("characteristics.v_lo")?,
            v_hi: r.get("characteristics.v_hi")?,
            depth: r.get("characteristics.depth")?,
            rtol: r.get("characteristics.rtol")?,
            atol: r.get("characteristics.atol")?,
            bound_tol: r.get("characteristics.bound_tol")?,
            fd_every: r.get("characteristics.fd_every")?,
            epsilon_ladder: r.list("characteristics.epsilon_ladder")?,
            k3_ladder: r.list("characteristics.k3_ladder")?,
            time_samples: r.get("characteristics.time_samples")?,
        };
        if !(characteristics.v_lo > 0.0 && characteristics.v_lo <= characteristics.v_hi) {
            return Err(Error::Config("need 0 < characteristics.v_lo <= characteristics.v_hi".into()));
        }

        let envelope = EnvelopeConfig {
            mode: match r.choice("envelope.mode", &[("pointwise", false), ("cell_average", true)])? {
                false => EnvelopeMode::Pointwise,
                true => EnvelopeMode::CellAverage { subsamples: r.get("envelope.subsamples")? },
            },
            fit: r.get("envelope.fit")?,
            ladder_start: r.get("envelope.ladder_start")?,
            ladder_count: r.get("envelope.ladder_count")?,
        };

        let check = CheckConfig {
            lemma_samples: r.get("check.lemma_samples")?,
            decay_kmax: r.get("check.decay_kmax")?,
            horizon: r.get("check.horizon")?,
            snapshot: r.opt::<String>("check.snapshot")?.map(PathBuf::from),
        };

        let mut resolved = map.clone();
        resolved.insert("grid.y_min".into(), grid.y_min.to_string());
        resolved.insert("grid.y_max".into(), grid.y_max.to_string());
        resolved.insert("kernel.gamma".into(), k_gamma.to_string());
        resolved.insert("kernel.alpha".into(), k_alpha.to_string());
        resolved.insert("diagonal.horizon".into(), diagonal.horizon.to_string());
        resolved.insert("characteristics.epsilon".into(), characteristics.epsilon.to_string());

        Ok(ExperimentConfig {
            raw,
            resolved,
            params,
            grid,
            kernel_kind,
            kernel,
            solver,
            scheme,
            horizon,
            dt,
            snapshot_every: r.get("solver.snapshot_every")?,
            picard: PicardConfig {
                intervals: r.get("picard.intervals")?,
                substeps: r.get("picard.substeps")?,
                tol: r.get("picard.tol")?,
                max_iter: r.get("picard.max_iter")?,
            },
            epsilons,
            delta: r.get("sweep.delta")?,
            diagonal,
            characteristics,
            envelope,
            check,
            seed: r.get("run.seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.grid.nv, 97);
        assert_eq!(c.grid.y_max, 16.0);
        assert_eq!(c.resolved()["grid.y_min"], "-16");
        assert_eq!(c.epsilons, vec![0.2, 0.1, 0.05]);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(matches!(ExperimentConfig::parse("model.bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("model.alpha 0.5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("model.alpha = x"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("model.alpha = 0.5\nmodel.alpha = 0.4").is_err());
        assert!(ExperimentConfig::parse("solver.type = implicit").is_err());
    }

    #[test]
    fn params_validated_at_load() {
        assert!(ExperimentConfig::parse("model.a = 0.5").is_err());
        assert!(ExperimentConfig::parse("model.epsilon = 1.5").is_err());
        assert!(ExperimentConfig::parse("model.m = 6").is_err());
        assert!(ExperimentConfig::parse("model.m = 6\nmodel.mode = relaxed").is_ok());
    }

    #[test]
    fn comments_overrides_and_kernels() {
        let c = ExperimentConfig::parse("# reference\nrun.seed = 3\nkernel.truncation_N = 100\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.kernel.truncation(), Some(100.0));
        let d = c.with("run.seed", 9).unwrap();
        assert_eq!(d.seed, 9);
        assert!(c.with("nope", 1).is_err());
        let rain = ExperimentConfig::parse("kernel.type = rain\nkernel.gamma = 1.1\nkernel.k0 = 4").unwrap();
        assert_eq!(rain.kernel_kind, KernelKind::Rain);
        assert_eq!(rain.kernel.k0, 4.0);
    }
}
