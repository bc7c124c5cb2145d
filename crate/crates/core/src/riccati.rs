//! Stochastic algebraic Riccati equation with unit weights
//!
//! ```text
//! PA + A^T P + sum C_i^T P C_i + I
//!   - (PB + sum C_i^T P D_i)(I + sum D_i^T P D_i)^{-1}(B^T P + sum D_i^T P C_i) = 0
//! ```
//!
//! solved by Newton–Kleinman iteration from a mean-square stabilizing gain.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Result};
use crate::exec::Execution;
use crate::linalg::{lambda_min_sym, symmetrize, unvec_cols, vec_cols};
use crate::model::{hautus_stabilizability, validate_system, StochasticSystem};
use crate::moment::{build_generator, spectral_abscissa};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub search_evals: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 100,
            restarts: 50,
            search_evals: 1500,
            seed: 0x5eed,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Abscissa of the closed-loop lift under `gain`.
    pub closed_loop_abscissa: f64,
}

#[derive(Debug, Clone)]
pub enum RiccatiOutcome {
    Solved(RiccatiSolution),
    /// No mean-square stabilizing gain exists (or none was found by the
    /// search and, for deterministic systems, the Hautus test agrees).
    NotSolvable {
        best_abscissa: f64,
    },
}

impl RiccatiOutcome {
    pub fn solution(&self) -> Option<&RiccatiSolution> {
        match self {
            RiccatiOutcome::Solved(s) => Some(s),
            RiccatiOutcome::NotSolvable { .. } => None,
        }
    }
}

/// Result of the derivative-free abscissa minimization.
#[derive(Debug, Clone)]
pub struct GainSearch {
    pub gain: DMatrix<f64>,
    pub abscissa: f64,
    /// Index of the restart that produced `gain`.
    pub restart: usize,
}

impl GainSearch {
    pub fn stabilizing(&self) -> bool {
        self.abscissa < 0.0
    }
}

fn weighted_terms(sys: &StochasticSystem, p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    // R = I + sum D^T P D,  S = B^T P + sum D^T P C
    let mut r = DMatrix::<f64>::identity(sys.m, sys.m);
    let mut s = sys.b.transpose() * p;
    for (c, d) in sys.c.iter().zip(&sys.d) {
        r += d.transpose() * p * d;
        s += d.transpose() * p * c;
    }
    (r, s)
}

/// `F = -(I + sum D^T P D)^{-1} (B^T P + sum D^T P C)`.
pub fn feedback_gain(p: &DMatrix<f64>, sys: &StochasticSystem) -> Result<DMatrix<f64>> {
    let (r, s) = weighted_terms(sys, p);
    let chol = r
        .cholesky()
        .ok_or_else(|| numerical("I + sum D^T P D is not positive definite"))?;
    Ok(-chol.solve(&s))
}

fn linear_part(sys: &StochasticSystem, p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = p * &sys.a + sys.a.transpose() * p;
    for c in &sys.c {
        out += c.transpose() * p * c;
    }
    out
}

/// Residual of the implemented (sign-corrected) equation.
pub fn riccati_residual(sys: &StochasticSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (r, s) = weighted_terms(sys, p);
    let chol = r
        .cholesky()
        .ok_or_else(|| numerical("I + sum D^T P D is not positive definite"))?;
    let eye = DMatrix::<f64>::identity(sys.n, sys.n);
    Ok(symmetrize(
        &(linear_part(sys, p) + eye - s.transpose() * chol.solve(&s)),
    ))
}

/// Residual of the equation with a `+` on the quadratic term and no
/// constant term. Exposed only for comparison with the implemented form.
pub fn printed_riccati_residual(sys: &StochasticSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (r, s) = weighted_terms(sys, p);
    let lu = r.lu();
    let solved = lu
        .solve(&s)
        .ok_or_else(|| numerical("I + sum D^T P D is singular"))?;
    Ok(symmetrize(&(linear_part(sys, p) + s.transpose() * solved)))
}

/// `<P x0, x0>`.
pub fn lq_value(p: &DMatrix<f64>, x0: &[f64]) -> f64 {
    let x = nalgebra::DVector::from_column_slice(x0);
    (x.transpose() * p * &x)[(0, 0)]
}

fn abscissa_of(sys: &StochasticSystem, gain: &DMatrix<f64>) -> f64 {
    build_generator(sys, gain)
        .and_then(|g| spectral_abscissa(&g))
        .unwrap_or(f64::INFINITY)
}

/// Compass search on the entries of `F` minimizing the lift abscissa.
fn compass_search(
    sys: &StochasticSystem,
    start: DMatrix<f64>,
    max_evals: usize,
) -> (DMatrix<f64>, f64) {
    let mut best = start;
    let mut best_val = abscissa_of(sys, &best);
    let mut step = 0.5 * best.amax().max(1.0);
    let mut evals = 1;
    let len = best.len();
    while evals < max_evals && step > 1e-10 && best_val >= -1e-3 {
        let mut improved = false;
        for idx in 0..len {
            for sign in [1.0, -1.0] {
                let mut trial = best.clone();
                trial[idx] += sign * step;
                let val = abscissa_of(sys, &trial);
                evals += 1;
                if val < best_val {
                    best = trial;
                    best_val = val;
                    improved = true;
                    break;
                }
            }
        }
        if improved {
            step *= 1.5;
        } else {
            step *= 0.5;
        }
    }
    (best, best_val)
}

fn restart_start(sys: &StochasticSystem, restart: usize, seed: u64) -> DMatrix<f64> {
    match restart {
        0 => DMatrix::zeros(sys.m, sys.n),
        1 => -sys.b.transpose(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(restart as u64);
            let scale = 1.0 + restart as f64 / 10.0;
            DMatrix::from_fn(sys.m, sys.n, |_, _| {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        }
    }
}

/// Searches for a mean-square stabilizing gain over seeded restarts.
///
/// Restarts are evaluated under `opts.execution`; the reported gain is the
/// lowest-index restart that stabilizes, or the best abscissa overall.
pub fn find_stabilizing_gain(sys: &StochasticSystem, opts: &RiccatiOptions) -> GainSearch {
    let restarts = opts.restarts.max(1);
    let runs = opts.execution.map(restarts, |r| {
        compass_search(sys, restart_start(sys, r, opts.seed), opts.search_evals)
    });
    if let Some((restart, (gain, abscissa))) = runs.iter().enumerate().find(|(_, (_, v))| *v < 0.0)
    {
        return GainSearch {
            gain: gain.clone(),
            abscissa: *abscissa,
            restart,
        };
    }
    let (restart, (gain, abscissa)) = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("at least one restart");
    GainSearch {
        gain: gain.clone(),
        abscissa: *abscissa,
        restart,
    }
}

/// Solves `L_F^*(P) + I + F^T F = 0` in the `n²` lift.
fn closed_loop_lyapunov(sys: &StochasticSystem, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gen = build_generator(sys, gain)?;
    let rhs = -vec_cols(&(DMatrix::<f64>::identity(sys.n, sys.n) + gain.transpose() * gain));
    let lu = gen.adjoint().lu();
    let v = lu
        .solve(&rhs)
        .ok_or_else(|| numerical("closed-loop Lyapunov operator is singular"))?;
    Ok(symmetrize(&unvec_cols(&v, sys.n)))
}

pub fn solve_sare(sys: &StochasticSystem, opts: &RiccatiOptions) -> Result<RiccatiOutcome> {
    let violations = validate_system(sys);
    if !violations.is_empty() {
        return Err(invalid(format!("invalid system: {}", violations[0])));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    let search = find_stabilizing_gain(sys, opts);
    if !search.stabilizing() {
        if sys.is_deterministic() && hautus_stabilizability(&sys.a, &sys.b, 1e-9)? {
            return Err(numerical(format!(
                "Hautus test passes but no stabilizing gain was found (best abscissa {:.3e})",
                search.abscissa
            )));
        }
        return Ok(RiccatiOutcome::NotSolvable {
            best_abscissa: search.abscissa,
        });
    }

    let mut gain = search.gain;
    let mut p = closed_loop_lyapunov(sys, &gain)?;
    let mut residual = riccati_residual(sys, &p)?.norm();
    let mut iterations = 0;
    while residual >= opts.tol && iterations < opts.max_iter {
        gain = feedback_gain(&p, sys)?;
        p = closed_loop_lyapunov(sys, &gain)?;
        residual = riccati_residual(sys, &p)?.norm();
        iterations += 1;
    }
    if residual >= opts.tol {
        return Err(numerical(format!(
            "Newton-Kleinman stalled at residual {residual:.3e} after {iterations} iterations"
        )));
    }
    let gain = feedback_gain(&p, sys)?;
    let closed_loop_abscissa = abscissa_of(sys, &gain);
    if lambda_min_sym(&p) <= 0.0 || closed_loop_abscissa >= 0.0 {
        return Err(numerical(
            "converged P is not the stabilizing positive definite root",
        ));
    }
    Ok(RiccatiOutcome::Solved(RiccatiSolution {
        p,
        gain,
        residual,
        iterations,
        closed_loop_abscissa,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn golden() -> f64 {
        (1.0 + 5f64.sqrt()) / 2.0
    }

    fn solve(sys: &StochasticSystem) -> RiccatiOutcome {
        solve_sare(sys, &RiccatiOptions::default()).unwrap()
    }

    #[test]
    fn s1_unit_solution() {
        let sol = solve(&StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0));
        let sol = sol.solution().unwrap();
        assert_relative_eq!(sol.p[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.gain[(0, 0)], -1.0, epsilon = 1e-10);
    }

    #[test]
    fn s2_golden_ratio() {
        let sol = solve(&StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0));
        let sol = sol.solution().unwrap();
        assert_relative_eq!(sol.p[(0, 0)], golden(), epsilon = 1e-10);
        assert_relative_eq!(sol.gain[(0, 0)], -golden(), epsilon = 1e-10);
        assert_relative_eq!(sol.closed_loop_abscissa, -5f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn s3_not_solvable() {
        let out = solve(&StochasticSystem::scalar(1.0, 0.0, 0.0, 0.0));
        assert!(matches!(out, RiccatiOutcome::NotSolvable { .. }));
    }

    #[test]
    fn control_dependent_noise_blocks_stabilization() {
        // min_f 2(1+f) + f² = 1 > 0
        let out = solve(&StochasticSystem::scalar(1.0, 1.0, 0.0, 1.0));
        match out {
            RiccatiOutcome::NotSolvable { best_abscissa } => {
                assert!((best_abscissa - 1.0).abs() < 1e-6)
            }
            _ => panic!("expected NotSolvable"),
        }
    }

    #[test]
    fn feedback_gain_cases() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        assert_relative_eq!(feedback_gain(&p, &sys).unwrap()[(0, 0)], -1.0);
        let no_input = StochasticSystem::scalar(0.3, 0.0, 0.5, 0.0);
        let p = DMatrix::from_element(1, 1, 7.0);
        assert_eq!(feedback_gain(&p, &no_input).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn lq_value_cases() {
        let p = DMatrix::from_element(1, 1, golden());
        assert_eq!(lq_value(&p, &[0.0]), 0.0);
        assert_relative_eq!(lq_value(&p, &[1.0]), golden());
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(lq_value(&eye, &[0.6, 0.8]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn printed_form_differs_from_implemented() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        let p = DMatrix::from_element(1, 1, golden());
        assert!(riccati_residual(&sys, &p).unwrap().norm() < 1e-12);
        // P + P² = golden + golden² ≠ 0
        assert!(printed_riccati_residual(&sys, &p).unwrap().norm() > 1.0);
    }
}
