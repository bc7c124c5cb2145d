use serde::Serialize;
use stochctl::model::hautus_stabilizability;
use stochctl::moment::{
    growth_constant_c0, open_loop_generator, spectral_abscissa, GrowthConstant,
};
use stochctl::null_control::{
    control_kernel, synthesize_control, verify_theorem_5_1, Gramian, SynthesisBounds,
    Theorem51Report,
};
use stochctl::observability::{
    assemble_forms, invariance_experiment, optimal_constant, optimal_constant_recursive,
    InvarianceTable, ObservabilityReport,
};
use stochctl::riccati::{
    find_stabilizing_gain, lq_value, solve_sare, RiccatiOptions, RiccatiOutcome,
};
use stochctl::stabilizer::{
    equivalence_harness, run_piecewise, run_riccati_feedback, EquivalenceOptions,
    EquivalenceReport, FeedbackRun, StabilizerRun,
};
use stochctl::tree::{build_tree, tree_growth_constant, NoiseTree};
use stochctl::{Execution, StochasticSystem};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::OutDir;

/// Largest form dimension for which `observe` uses the dense route.
const OBSERVE_DENSE_DIM: usize = 512;

pub struct Outcome<T: Serialize> {
    pub verdict: String,
    pub result: T,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn tree_for(cfg: &RunConfig, sys: &StochasticSystem) -> Result<NoiseTree, CliError> {
    Ok(build_tree(
        &cfg.tree_driver()?,
        cfg.horizon()?,
        sys.noise_dim,
    )?)
}

fn riccati_options(cfg: &RunConfig, exec: Execution) -> RiccatiOptions {
    RiccatiOptions {
        seed: cfg.seed,
        execution: exec,
        ..RiccatiOptions::default()
    }
}

fn fmt_c(c: f64) -> String {
    if c.is_finite() {
        format!("{c:.6}")
    } else {
        "inf".into()
    }
}

#[derive(Serialize)]
pub struct Validation {
    pub name: Option<String>,
    pub n: usize,
    pub m: usize,
    pub noise_dim: usize,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub driver: String,
    /// `b^(d K)`, as a float because it can overflow.
    pub leaves: f64,
    pub leaves_within_budget: bool,
}

pub fn validate(cfg: &RunConfig) -> Result<Outcome<Validation>, CliError> {
    let sys = cfg.system()?;
    let h = cfg.horizon()?;
    let driver = cfg.tree_driver()?;
    let leaves = (driver.support_size() as f64).powf((sys.noise_dim * h.k) as f64);
    let within = leaves <= stochctl::budget::max_leaves() as f64;
    Ok(Outcome {
        verdict: format!(
            "valid (n={}, m={}, d={}, {leaves} leaves)",
            sys.n, sys.m, sys.noise_dim
        ),
        result: Validation {
            name: cfg.name.clone(),
            n: sys.n,
            m: sys.m,
            noise_dim: sys.noise_dim,
            t: h.t,
            k: h.k,
            driver: driver.kind.label(),
            leaves,
            leaves_within_budget: within,
        },
    })
}

#[derive(Serialize)]
pub struct GainSummary {
    pub gain: Vec<Vec<f64>>,
    pub abscissa: f64,
    pub restart: usize,
}

#[derive(Serialize)]
pub struct Stability {
    pub open_loop_abscissa: f64,
    pub mean_square_stable: bool,
    pub hautus_stabilizable: bool,
    pub growth_constant: GrowthConstant,
    pub tree_growth_constant: f64,
    pub gain_search: GainSummary,
    pub feedback_stabilizable: bool,
}

pub fn stability(cfg: &RunConfig, exec: Execution) -> Result<Outcome<Stability>, CliError> {
    let sys = cfg.system()?;
    let h = cfg.horizon()?;
    let abscissa = spectral_abscissa(&open_loop_generator(&sys))?;
    let hautus = hautus_stabilizability(&sys.a, &sys.b, 1e-9)?;
    let gc = growth_constant_c0(&sys, h.t)?;
    let tree = tree_for(cfg, &sys)?;
    let tc = tree_growth_constant(&tree, &sys)?;
    let search = find_stabilizing_gain(&sys, &riccati_options(cfg, exec));
    let stabilizable = search.abscissa < 0.0;
    Ok(Outcome {
        verdict: format!(
            "open-loop abscissa {abscissa:.6}, {}; feedback {}",
            if abscissa < 0.0 {
                "mean-square stable"
            } else {
                "not mean-square stable"
            },
            if stabilizable {
                "stabilizable"
            } else {
                "no stabilizing gain found"
            }
        ),
        result: Stability {
            open_loop_abscissa: abscissa,
            mean_square_stable: abscissa < 0.0,
            hautus_stabilizable: hautus,
            growth_constant: gc,
            tree_growth_constant: tc,
            gain_search: GainSummary {
                gain: rows(&search.gain),
                abscissa: search.abscissa,
                restart: search.restart,
            },
            feedback_stabilizable: stabilizable,
        },
    })
}

#[derive(Serialize)]
pub struct RiccatiReport {
    pub solvable: bool,
    pub p: Option<Vec<Vec<f64>>>,
    pub gain: Option<Vec<Vec<f64>>>,
    pub residual: Option<f64>,
    pub iterations: Option<usize>,
    pub closed_loop_abscissa: f64,
    pub x0: Vec<f64>,
    /// `⟨P x0, x0⟩`.
    pub lq_value: Option<f64>,
    pub feedback: Option<FeedbackRun>,
}

pub fn riccati(
    cfg: &RunConfig,
    exec: Execution,
    out: &OutDir,
) -> Result<Outcome<RiccatiReport>, CliError> {
    let sys = cfg.system()?;
    let x0 = cfg.x0()?;
    match solve_sare(&sys, &riccati_options(cfg, exec))? {
        RiccatiOutcome::Solved(sol) => {
            let run = run_riccati_feedback(&sys, &sol.gain, &x0, cfg.horizon.t, cfg.dt_report)?;
            out.write_with("feedback.csv", |w| run.write_csv(w))?;
            let value = lq_value(&sol.p, &x0);
            Ok(Outcome {
                verdict: format!(
                    "solvable, residual {:.2e}, LQ value {value:.10}",
                    sol.residual
                ),
                result: RiccatiReport {
                    solvable: true,
                    p: Some(rows(&sol.p)),
                    gain: Some(rows(&sol.gain)),
                    residual: Some(sol.residual),
                    iterations: Some(sol.iterations),
                    closed_loop_abscissa: sol.closed_loop_abscissa,
                    x0,
                    lq_value: Some(value),
                    feedback: Some(run),
                },
            })
        }
        RiccatiOutcome::NotSolvable { best_abscissa } => Ok(Outcome {
            verdict: format!("not solvable (best abscissa {best_abscissa:.6})"),
            result: RiccatiReport {
                solvable: false,
                p: None,
                gain: None,
                residual: None,
                iterations: None,
                closed_loop_abscissa: best_abscissa,
                x0,
                lq_value: None,
                feedback: None,
            },
        }),
    }
}

#[derive(Serialize)]
pub struct Observe {
    pub route: &'static str,
    pub primary: ObservabilityReport,
    pub grid: Vec<ObservabilityReport>,
}

pub fn observe(cfg: &RunConfig, exec: Execution) -> Result<Outcome<Observe>, CliError> {
    let sys = cfg.system()?;
    let h = cfg.horizon()?;
    let driver = cfg.tree_driver()?;
    let leaves = (driver.support_size() as f64).powf((sys.noise_dim * h.k) as f64);
    let dense = leaves * sys.n as f64 <= OBSERVE_DENSE_DIM as f64;
    let mut deltas = vec![cfg.delta];
    deltas.extend(cfg.delta_grid.iter().copied());
    let reports: Vec<ObservabilityReport> = if dense {
        let tree = tree_for(cfg, &sys)?;
        let forms = assemble_forms(&tree, &sys, exec)?;
        deltas
            .iter()
            .map(|&d| optimal_constant(&forms, d))
            .collect::<Result<_, _>>()?
    } else {
        deltas
            .iter()
            .map(|&d| optimal_constant_recursive(&sys, &driver, h, d))
            .collect::<Result<_, _>>()?
    };
    let primary = reports[0].clone();
    Ok(Outcome {
        verdict: format!(
            "delta={}: c_opt={} ({})",
            primary.delta,
            fmt_c(primary.c_opt),
            if primary.observable {
                "observable"
            } else {
                "not observable"
            }
        ),
        result: Observe {
            route: if dense { "dense" } else { "recursive" },
            primary,
            grid: reports[1..].to_vec(),
        },
    })
}

pub fn invariance(
    cfg: &RunConfig,
    exec: Execution,
    out: &OutDir,
) -> Result<Outcome<InvarianceTable>, CliError> {
    let sys = cfg.system()?;
    let drivers = cfg.drivers()?;
    let table = invariance_experiment(&sys, cfg.horizon.t, cfg.delta, &drivers, &cfg.k_list, exec)?;
    out.write_with("invariance.csv", |w| table.write_csv(w))?;
    let last = table.gaps.last().map_or(0.0, |g| g.1);
    Ok(Outcome {
        verdict: format!(
            "max relative gap at K={}: {last:.3e}",
            cfg.k_list.last().copied().unwrap_or(0)
        ),
        result: table,
    })
}

#[derive(Serialize)]
pub struct Synthesis {
    pub delta: f64,
    #[serde(serialize_with = "stochctl::observability::finite_or_null")]
    pub c_opt: f64,
    pub observable: bool,
    pub gramian: Option<&'static str>,
    pub x_s: Vec<f64>,
    pub control_energy: Option<f64>,
    pub terminal_energy: Option<f64>,
    pub f_energy: Option<f64>,
    pub terminal_identity_error: Option<f64>,
    pub energy_identity_error: Option<f64>,
    pub c0_tree: Option<f64>,
    pub c0_continuous: Option<f64>,
    pub bounds: Option<SynthesisBounds>,
}

pub fn synthesize(
    cfg: &RunConfig,
    exec: Execution,
    out: &OutDir,
) -> Result<Outcome<Synthesis>, CliError> {
    let sys = cfg.system()?;
    let tree = tree_for(cfg, &sys)?;
    let x_s = cfg.x0()?;
    let delta = cfg.delta;
    let c = optimal_constant_recursive(&sys, &tree.driver, tree.horizon, delta)?.c_opt;
    let mut result = Synthesis {
        delta,
        c_opt: c,
        observable: c.is_finite(),
        gramian: None,
        x_s: x_s.clone(),
        control_energy: None,
        terminal_energy: None,
        f_energy: None,
        terminal_identity_error: None,
        energy_identity_error: None,
        c0_tree: None,
        c0_continuous: None,
        bounds: None,
    };
    if !c.is_finite() {
        return Ok(Outcome {
            verdict: format!("not delta-observable at delta={delta}; no control synthesized"),
            result,
        });
    }
    let gram = Gramian::auto(&tree, &sys, c, delta, exec)?;
    let res = synthesize_control(&tree, &sys, &x_s, &gram)?;
    out.write_with("control.csv", |w| res.u.write_csv(&tree, w))?;
    out.write_with("terminal.csv", |w| res.terminal.write_csv(&tree, w))?;
    result.gramian = Some(match gram {
        Gramian::Dense(..) => "dense",
        Gramian::MatrixFree(_) => "matrix_free",
    });
    result.control_energy = Some(res.control_energy);
    result.terminal_energy = Some(res.terminal_energy);
    result.f_energy = Some(res.f_energy);
    result.terminal_identity_error = Some(res.terminal_identity_error);
    result.energy_identity_error = Some(res.energy_identity_error);
    result.c0_tree = Some(res.c0_tree);
    result.c0_continuous = Some(res.c0_continuous);
    let ok = res.bounds.all_ok();
    result.bounds = Some(res.bounds);
    Ok(Outcome {
        verdict: format!(
            "E|x(T)|^2 = {:.3e} <= {:.3e}, energy {:.4}: bounds {}",
            res.terminal_energy,
            delta * x_s.iter().map(|v| v * v).sum::<f64>(),
            res.control_energy,
            if ok { "hold" } else { "violated" }
        ),
        result,
    })
}

pub fn theorem51(cfg: &RunConfig, exec: Execution) -> Result<Outcome<Theorem51Report>, CliError> {
    let sys = cfg.system()?;
    let tree = tree_for(cfg, &sys)?;
    let rep = verify_theorem_5_1(&tree, &sys, cfg.delta, exec)?;
    let verdict = if !rep.applicable {
        "not delta-observable; nothing to verify".to_string()
    } else {
        format!(
            "forward {}, converse {}, cost ratio {:.3}",
            if rep.forward_pass { "pass" } else { "FAIL" },
            if rep.converse_pass { "pass" } else { "FAIL" },
            rep.cost_ratio
        )
    };
    Ok(Outcome {
        verdict,
        result: rep,
    })
}

#[derive(Serialize)]
pub struct Stabilize {
    pub observable: bool,
    pub run: Option<StabilizerRun>,
}

pub fn stabilize(
    cfg: &RunConfig,
    exec: Execution,
    out: &OutDir,
) -> Result<Outcome<Stabilize>, CliError> {
    let sys = cfg.system()?;
    let tree = tree_for(cfg, &sys)?;
    let x0 = cfg.x0()?;
    let c = optimal_constant_recursive(&sys, &tree.driver, tree.horizon, cfg.delta)?.c_opt;
    if !c.is_finite() {
        return Ok(Outcome {
            verdict: format!("not delta-observable at delta={}; no stabilizer", cfg.delta),
            result: Stabilize {
                observable: false,
                run: None,
            },
        });
    }
    let gram = Gramian::auto(&tree, &sys, c, cfg.delta, exec)?;
    let kernel = control_kernel(&tree, &sys, &gram, exec)?;
    let run = run_piecewise(
        &sys,
        &tree,
        &kernel,
        &x0,
        cfg.intervals,
        cfg.paths,
        cfg.seed,
        exec,
    )?;
    out.write_with("stabilize.csv", |w| run.write_csv(w))?;
    let last = run.records.last().map_or(0.0, |r| r.second_moment);
    Ok(Outcome {
        verdict: format!(
            "E|x_{}|^2 = {last:.3e}, total energy {:.4} (bound {:.4})",
            cfg.intervals,
            run.total_energy(),
            run.energy_bound
        ),
        result: Stabilize {
            observable: true,
            run: Some(run),
        },
    })
}

pub fn equivalence(
    cfg: &RunConfig,
    exec: Execution,
) -> Result<Outcome<EquivalenceReport>, CliError> {
    let sys = cfg.system()?;
    let opts = EquivalenceOptions {
        t_grid: cfg.t_grid.clone(),
        delta_grid: cfg.delta_grid.clone(),
        k: cfg.horizon()?.k,
        driver: cfg.driver_kind()?,
        riccati: riccati_options(cfg, exec),
    };
    let rep = equivalence_harness(&sys, &opts, exec)?;
    let flags = [
        rep.riccati_solvable,
        rep.feedback_stabilizable,
        rep.weakly_observable,
        rep.null_controllable_with_cost,
    ];
    let verdict = format!(
        "{} [riccati={}, feedback={}, observable={}, null_controllable={}]",
        if !rep.agreement {
            "DISAGREE"
        } else if flags[0] {
            "all true"
        } else {
            "all false"
        },
        flags[0],
        flags[1],
        flags[2],
        flags[3]
    );
    Ok(Outcome {
        verdict,
        result: rep,
    })
}
