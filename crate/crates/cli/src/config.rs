use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stochctl::budget::Limits;
use stochctl::model::validate_system;
use stochctl::tree::{DriverKind, TreeDriver};
use stochctl::{HorizonConfig, StochasticSystem};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    pub m: usize,
    pub noise_dim: usize,
    /// `n × n`, row-major.
    pub a: Vec<f64>,
    /// `n × m`, row-major.
    pub b: Vec<f64>,
    /// One row-major `n × n` matrix per noise channel.
    pub c: Vec<Vec<f64>>,
    /// One row-major `n × m` matrix per noise channel.
    pub d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSpec {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub max_leaves: Option<usize>,
    pub max_form_dim: Option<usize>,
    pub max_path_steps: Option<usize>,
}

impl BudgetSpec {
    pub fn is_empty(&self) -> bool {
        *self == BudgetSpec::default()
    }
}

fn default_driver() -> String {
    "bernoulli".into()
}
fn default_delta() -> f64 {
    0.5
}
fn default_delta_grid() -> Vec<f64> {
    vec![0.5, 0.9]
}
fn default_t_grid() -> Vec<f64> {
    vec![1.0, 2.0]
}
fn default_seed() -> u64 {
    2024
}
fn default_paths() -> usize {
    10_000
}
fn default_intervals() -> usize {
    5
}
fn default_drivers() -> Vec<String> {
    vec![
        "bernoulli".into(),
        "trinomial".into(),
        "quantized_gaussian(3)".into(),
    ]
}
fn default_k_list() -> Vec<usize> {
    vec![4, 6, 8]
}
fn default_dt_report() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub system: SystemSpec,
    pub horizon: HorizonSpec,
    #[serde(default = "default_driver")]
    pub driver: String,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_delta_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Number of horizon-length intervals for the stabilizer.
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    /// Initial state; defaults to the all-ones vector.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_drivers")]
    pub drivers: Vec<String>,
    #[serde(rename = "K_list", default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_dt_report")]
    pub dt_report: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BudgetSpec::is_empty")]
    pub budget: BudgetSpec,
}

/// A parsed config together with the raw bytes it came from.
pub struct Loaded {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config(format!("{} is not valid UTF-8", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.check()?;
    Ok(Loaded { config, bytes })
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("invalid value for `{key}`: {msg}"))
}

fn matrix(
    key: &str,
    values: &[f64],
    rows: usize,
    cols: usize,
) -> Result<nalgebra::DMatrix<f64>, CliError> {
    if values.len() != rows * cols {
        return Err(bad(
            key,
            format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                values.len()
            ),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad(key, "entries must be finite"));
    }
    Ok(nalgebra::DMatrix::from_row_slice(rows, cols, values))
}

impl RunConfig {
    pub fn check(&self) -> Result<(), CliError> {
        self.system()?;
        self.horizon()?;
        self.driver_kind()?;
        self.drivers()?;
        if !(0.0..1.0).contains(&self.delta) {
            return Err(bad(
                "delta",
                format!("must lie in [0, 1), got {}", self.delta),
            ));
        }
        if self.delta_grid.is_empty() || self.delta_grid.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(bad("delta_grid", "needs at least one value in (0, 1)"));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(bad("t_grid", "needs at least one positive value"));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(bad("K_list", "needs at least one positive step count"));
        }
        if self.paths == 0 {
            return Err(bad("paths", "must be positive"));
        }
        if self.intervals == 0 {
            return Err(bad("intervals", "must be positive"));
        }
        if !(self.dt_report.is_finite() && self.dt_report > 0.0) {
            return Err(bad("dt_report", "must be positive"));
        }
        self.x0()?;
        Ok(())
    }

    pub fn system(&self) -> Result<StochasticSystem, CliError> {
        let s = &self.system;
        if s.n == 0 {
            return Err(bad("system.n", "must be positive"));
        }
        if s.m == 0 {
            return Err(bad("system.m", "must be positive"));
        }
        if s.noise_dim == 0 {
            return Err(bad("system.noise_dim", "must be positive"));
        }
        if s.c.len() != s.noise_dim {
            return Err(bad(
                "system.c",
                format!("expected {} matrices, got {}", s.noise_dim, s.c.len()),
            ));
        }
        if s.d.len() != s.noise_dim {
            return Err(bad(
                "system.d",
                format!("expected {} matrices, got {}", s.noise_dim, s.d.len()),
            ));
        }
        let a = matrix("system.a", &s.a, s.n, s.n)?;
        let b = matrix("system.b", &s.b, s.n, s.m)?;
        let c =
            s.c.iter()
                .enumerate()
                .map(|(i, v)| matrix(&format!("system.c[{i}]"), v, s.n, s.n))
                .collect::<Result<Vec<_>, _>>()?;
        let d =
            s.d.iter()
                .enumerate()
                .map(|(i, v)| matrix(&format!("system.d[{i}]"), v, s.n, s.m))
                .collect::<Result<Vec<_>, _>>()?;
        let sys = StochasticSystem {
            n: s.n,
            m: s.m,
            noise_dim: s.noise_dim,
            a,
            b,
            c,
            d,
        };
        if let Some(v) = validate_system(&sys).first() {
            return Err(bad(&format!("system.{}", v.field), &v.problem));
        }
        Ok(sys)
    }

    pub fn horizon(&self) -> Result<HorizonConfig, CliError> {
        HorizonConfig::new(self.horizon.t, self.horizon.k).map_err(|e| bad("horizon", e))
    }

    pub fn driver_kind(&self) -> Result<DriverKind, CliError> {
        let kind = DriverKind::parse(&self.driver).map_err(|e| bad("driver", e))?;
        TreeDriver::new(kind).map_err(|e| bad("driver", e))?;
        Ok(kind)
    }

    pub fn tree_driver(&self) -> Result<TreeDriver, CliError> {
        TreeDriver::new(self.driver_kind()?).map_err(|e| bad("driver", e))
    }

    pub fn drivers(&self) -> Result<Vec<TreeDriver>, CliError> {
        if self.drivers.is_empty() {
            return Err(bad("drivers", "needs at least one driver"));
        }
        self.drivers
            .iter()
            .map(|s| {
                DriverKind::parse(s)
                    .and_then(TreeDriver::new)
                    .map_err(|e| bad("drivers", e))
            })
            .collect()
    }

    pub fn x0(&self) -> Result<Vec<f64>, CliError> {
        match &self.x0 {
            None => Ok(vec![1.0; self.system.n]),
            Some(v) if v.len() != self.system.n => Err(bad(
                "x0",
                format!("expected {} entries, got {}", self.system.n, v.len()),
            )),
            Some(v) if v.iter().any(|x| !x.is_finite()) => Err(bad("x0", "entries must be finite")),
            Some(v) => Ok(v.clone()),
        }
    }

    /// Config caps layered over the library defaults.
    pub fn limits(&self) -> Limits {
        let mut l = Limits::default();
        if let Some(v) = self.budget.max_leaves {
            l.max_leaves = v;
        }
        if let Some(v) = self.budget.max_form_dim {
            l.max_form_dim = v;
        }
        if let Some(v) = self.budget.max_path_steps {
            l.max_path_steps = v;
        }
        l
    }
}

/// Row-major rendering used by emitted configs and reports.
pub fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

impl SystemSpec {
    pub fn from_system(sys: &StochasticSystem) -> Self {
        Self {
            n: sys.n,
            m: sys.m,
            noise_dim: sys.noise_dim,
            a: row_major(&sys.a),
            b: row_major(&sys.b),
            c: sys.c.iter().map(row_major).collect(),
            d: sys.d.iter().map(row_major).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
n = 2
m = 1
noise_dim = 1
a = [0.0, 1.0, -1.0, 0.0]
b = [0.0, 1.0]
c = [[0.1, 0.0, 0.0, 0.1]]
d = [[0.0, 0.0]]

[horizon]
T = 1.5
K = 4
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.check().unwrap();
        let sys = cfg.system().unwrap();
        assert_eq!(sys.a[(0, 1)], 1.0);
        assert_eq!(sys.a[(1, 0)], -1.0);
        assert_eq!(cfg.x0().unwrap(), vec![1.0, 1.0]);
        assert_eq!(cfg.driver_kind().unwrap(), DriverKind::Bernoulli);
        assert_eq!(cfg.limits(), Limits::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn bad_values_name_their_key() {
        let cases = [
            ("K = 4", "K = 0", "horizon"),
            ("noise_dim = 1", "noise_dim = 2", "system.c"),
            ("[horizon]", "driver = \"pentanomial\"\n[horizon]", "driver"),
        ];
        for (from, to, key) in cases {
            let text = MINIMAL.replace(from, to);
            let err = match toml::from_str::<RunConfig>(&text) {
                Ok(cfg) => cfg.check().unwrap_err().to_string(),
                Err(e) => e.to_string(),
            };
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn budget_section_overrides_defaults() {
        let text = format!("{MINIMAL}\n[budget]\nmax_leaves = 99\n");
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.limits().max_leaves, 99);
        assert_eq!(cfg.limits().max_form_dim, Limits::default().max_form_dim);
    }
}
