use std::path::{Path, PathBuf};

use stochctl::corpus::corpus;

use crate::config::{BudgetSpec, HorizonSpec, RunConfig, SystemSpec};
use crate::error::{io_err, CliError};

fn config_for(name: &str, spec: SystemSpec) -> RunConfig {
    RunConfig {
        name: Some(name.into()),
        x0: Some(vec![1.0; spec.n]),
        system: spec,
        horizon: HorizonSpec { t: 1.0, k: 6 },
        driver: "bernoulli".into(),
        delta: 0.5,
        delta_grid: vec![0.5, 0.9],
        t_grid: vec![1.0, 2.0],
        seed: 2024,
        paths: 10_000,
        intervals: 5,
        drivers: vec![
            "bernoulli".into(),
            "trinomial".into(),
            "quantized_gaussian(3)".into(),
        ],
        k_list: vec![4, 6, 8],
        dt_report: 0.01,
        output_dir: None,
        budget: BudgetSpec::default(),
    }
}

/// Writes one config per bundled example and returns the paths in order.
pub fn emit(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for entry in corpus() {
        let cfg = config_for(entry.name, SystemSpec::from_system(&entry.system));
        let body = toml::to_string(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
        let mut text = format!("# {}: {}\n", entry.name, entry.description);
        text.push_str(&format!(
            "# expected equivalence verdict: {}\n",
            if entry.expected_verdict {
                "all true"
            } else {
                "all false"
            }
        ));
        match entry.expected_p {
            Some(p) => text.push_str(&format!("# expected Riccati solution: P = {p}\n")),
            None => text.push_str("# expected Riccati outcome: not solvable\n"),
        }
        text.push('\n');
        text.push_str(&body);
        let path = dir.join(format!("{}.toml", entry.name.to_lowercase()));
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
