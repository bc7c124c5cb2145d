//! Stabilization: concatenated null controls, Riccati feedback, and the
//! four-way equivalence check.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::linalg::{lambda_max_sym, symmetrize, unvec_cols, vec_cols};
use crate::model::{HorizonConfig, StochasticSystem};
use crate::moment::{build_generator, spectral_abscissa};
use crate::null_control::{verify_theorem_5_1, ControlKernel, Theorem51Report};
use crate::observability::{finite_or_null, optimal_constant_recursive};
use crate::riccati::{find_stabilizing_gain, solve_sare, RiccatiOptions, RiccatiOutcome};
use crate::tree::{build_tree, NoiseTree, TreeDriver};

/// Default cap on `k_max · paths · K`.
pub const DEFAULT_MAX_PATH_STEPS: usize = 50_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct IntervalRecord {
    pub k: usize,
    /// Estimate of `E|x_k|²` at the start of interval `k`.
    pub second_moment: f64,
    pub second_moment_se: f64,
    /// Energy `Δ sum E|u|²` spent on interval `k` (zero for `k = k_max`).
    pub control_energy: f64,
    pub control_energy_se: f64,
    /// Energy spent on intervals `0..k`, inclusive of `k`.
    pub cumulative_energy: f64,
    pub cumulative_energy_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilizerRun {
    pub records: Vec<IntervalRecord>,
    pub paths: usize,
    pub seed: u64,
    pub delta: f64,
    pub c: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub c0_tree: f64,
    pub c0_continuous: f64,
    /// `c δ⁻¹ c0 (1-δ)⁻¹ |x0|²` with the tree growth constant.
    pub energy_bound: f64,
    pub energy_bound_continuous: f64,
}

impl StabilizerRun {
    pub fn total_energy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_energy)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,second_moment,second_moment_se,control_energy,control_energy_se,cumulative_energy,cumulative_energy_se")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.k,
                r.second_moment,
                r.second_moment_se,
                r.control_energy,
                r.control_energy_se,
                r.cumulative_energy,
                r.cumulative_energy_se
            )?;
        }
        Ok(())
    }
}

fn mean_se(samples: impl Iterator<Item = f64> + Clone, count: usize) -> (f64, f64) {
    let nf = count as f64;
    let mean = samples.clone().sum::<f64>() / nf;
    if count < 2 {
        return (mean, 0.0);
    }
    let var = samples.map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

/// Monte Carlo over sampled tree paths. On every interval the control at a
/// visited node is the kernel applied to the state at the start of that
/// interval; each interval restarts at the root.
#[allow(clippy::too_many_arguments)]
pub fn run_piecewise(
    sys: &StochasticSystem,
    tree: &NoiseTree,
    kernel: &ControlKernel,
    x0: &[f64],
    k_max: usize,
    paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<StabilizerRun> {
    if x0.len() != sys.n || kernel.n != sys.n || kernel.m != sys.m {
        return Err(invalid("dimensions of x0, kernel and system disagree"));
    }
    if paths == 0 {
        return Err(invalid("at least one path is required"));
    }
    let steps = k_max.saturating_mul(paths).saturating_mul(tree.steps());
    let cap = crate::budget::max_path_steps();
    if steps > cap {
        return Err(Error::BudgetExceeded {
            what: "path steps",
            size: steps,
            cap,
        });
    }
    let (n, m) = (sys.n, sys.m);
    let dt = tree.dt();
    let cumulative: Vec<f64> = tree
        .branches()
        .iter()
        .scan(0.0, |acc, b| {
            *acc += b.prob;
            Some(*acc)
        })
        .collect();

    // per path: |x_k|² for k = 0..=k_max and interval energies
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = exec.map(paths, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut x = x0.to_vec();
        let mut u = vec![0.0; m];
        let mut next = vec![0.0; n];
        let mut moments = Vec::with_capacity(k_max + 1);
        let mut energies = Vec::with_capacity(k_max);
        moments.push(x.iter().map(|v| v * v).sum());
        for _ in 0..k_max {
            let xs = x.clone();
            let mut energy = 0.0;
            let mut node = 0;
            for _ in 0..tree.steps() {
                kernel.control_at(node, &xs, &mut u);
                energy += dt * u.iter().map(|v| v * v).sum::<f64>();
                let draw: f64 = rng.gen();
                let beta = cumulative
                    .iter()
                    .position(|c| draw < *c)
                    .unwrap_or(cumulative.len() - 1);
                let xi = &tree.branches()[beta].increment;
                for r in 0..n {
                    let mut drift = 0.0;
                    for c in 0..n {
                        drift += sys.a[(r, c)] * x[c];
                    }
                    for c in 0..m {
                        drift += sys.b[(r, c)] * u[c];
                    }
                    let mut noise = 0.0;
                    for (i, w) in xi.iter().enumerate() {
                        let mut diff = 0.0;
                        for c in 0..n {
                            diff += sys.c[i][(r, c)] * x[c];
                        }
                        for c in 0..m {
                            diff += sys.d[i][(r, c)] * u[c];
                        }
                        noise += diff * w;
                    }
                    next[r] = x[r] + drift * dt + noise;
                }
                std::mem::swap(&mut x, &mut next);
                node = tree.child(node, beta);
            }
            energies.push(energy);
            moments.push(x.iter().map(|v| v * v).sum());
        }
        (moments, energies)
    });

    let mut records = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let (second_moment, second_moment_se) = mean_se(per_path.iter().map(|p| p.0[k]), paths);
        let (control_energy, control_energy_se) = if k < k_max {
            mean_se(per_path.iter().map(|p| p.1[k]), paths)
        } else {
            (0.0, 0.0)
        };
        let upto = (k + 1).min(k_max);
        let (cumulative_energy, cumulative_energy_se) = mean_se(
            per_path.iter().map(|p| p.1[..upto].iter().sum::<f64>()),
            paths,
        );
        records.push(IntervalRecord {
            k,
            second_moment,
            second_moment_se,
            control_energy,
            control_energy_se,
            cumulative_energy,
            cumulative_energy_se,
        });
    }
    let x02: f64 = x0.iter().map(|v| v * v).sum();
    let (c, delta) = (kernel.c, kernel.delta);
    Ok(StabilizerRun {
        records,
        paths,
        seed,
        delta,
        c,
        t: kernel.t,
        c0_tree: kernel.c0_tree,
        c0_continuous: kernel.c0_continuous,
        energy_bound: c / delta * kernel.c0_tree / (1.0 - delta) * x02,
        energy_bound_continuous: c / delta * kernel.c0_continuous / (1.0 - delta) * x02,
    })
}

/// Feedback-to-controllability constants on `[0, T]` under a fixed gain.
#[derive(Debug, Clone, Serialize)]
pub struct FeedbackCostConstants {
    #[serde(rename = "T")]
    pub t: f64,
    /// Fitted decay rate, `0.9 ·` the negated closed-loop abscissa.
    pub alpha: f64,
    /// `max_t e^{αt} λ_max(S(t))` over the reporting grid.
    pub c_alpha: f64,
    pub gain_norm: f64,
    /// `α⁻¹ c(α) (1 - e^{-αT}) |F|`.
    pub formula_constant: f64,
    /// `|F| (c(α) (1 - e^{-αT}) / α)^{1/2}`, which bounds `‖u‖ / |x0|`.
    pub sqrt_constant: f64,
    /// Worst `‖u‖ / |x0|` with `u = F x` on `[0, T]`.
    pub measured: f64,
    pub measured_within_sqrt: bool,
    pub measured_within_formula: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeedbackRun {
    pub abscissa: f64,
    pub diverged: bool,
    /// `(t, E|x(t)|²)` on the reporting grid.
    pub curve: Vec<(f64, f64)>,
    /// `∫ (tr X + tr F X F^T) dt` including the tail estimate.
    #[serde(serialize_with = "finite_or_null")]
    pub cost: f64,
    pub tail: f64,
    pub t_max: f64,
    pub constants: Option<FeedbackCostConstants>,
}

impl FeedbackRun {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,second_moment")?;
        for (t, v) in &self.curve {
            writeln!(w, "{t},{v:e}")?;
        }
        Ok(())
    }
}

/// Simpson's rule on an even number of equal panels.
fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    debug_assert!(n % 2 == 0);
    let mut s = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

/// Exact second-moment curve and quadrature cost of the closed loop
/// `u = F x`.
pub fn run_riccati_feedback(
    sys: &StochasticSystem,
    gain: &DMatrix<f64>,
    x0: &[f64],
    horizon_t: f64,
    dt_report: f64,
) -> Result<FeedbackRun> {
    if x0.len() != sys.n {
        return Err(invalid("x0 has the wrong dimension"));
    }
    if !(dt_report > 0.0) || !(horizon_t > 0.0) {
        return Err(invalid("dt_report and T must be positive"));
    }
    if gain.iter().any(|v| !v.is_finite()) {
        return Err(invalid("gain must be finite"));
    }
    let n = sys.n;
    let gen = build_generator(sys, gain)?;
    let abscissa = spectral_abscissa(&gen)?;
    let x0m = DMatrix::from_fn(n, n, |r, c| x0[r] * x0[c]);
    let weight = DMatrix::<f64>::identity(n, n) + gain.transpose() * gain;
    let wv = vec_cols(&weight);

    let h = dt_report / 2.0;
    let step = (&gen.l * h).exp();
    let curve_to = |t_end: f64| -> Vec<(f64, f64)> {
        let mut v = vec_cols(&x0m);
        let count = (t_end / dt_report).round() as usize;
        let mut out = Vec::with_capacity(count + 1);
        for i in 0..=count {
            out.push((i as f64 * dt_report, unvec_cols(&v, n).trace()));
            v = &step * (&step * v);
        }
        out
    };

    if abscissa >= 0.0 {
        return Ok(FeedbackRun {
            abscissa,
            diverged: true,
            curve: curve_to(horizon_t),
            cost: f64::INFINITY,
            tail: f64::INFINITY,
            t_max: horizon_t,
            constants: None,
        });
    }

    let mut t_max = (10.0 / -abscissa).max(horizon_t).max(1.0);
    let (cost, tail) = loop {
        let panels = 2 * (t_max / dt_report).round() as usize;
        let mut v = vec_cols(&x0m);
        let mut integrand = Vec::with_capacity(panels + 1);
        for _ in 0..=panels {
            integrand.push(v.dot(&wv));
            v = &step * v;
        }
        let body = simpson(&integrand, h);
        let end = *integrand.last().unwrap();
        let tail = end / -abscissa;
        if tail < 1e-4 * (body + tail).abs().max(f64::MIN_POSITIVE) || t_max > 1e4 {
            break (body + tail, tail);
        }
        t_max *= 2.0;
    };

    // adjoint flow for the step-one constants
    let adj_step = (gen.adjoint() * h).exp();
    let eye = vec_cols(&DMatrix::<f64>::identity(n, n));
    let ftf = vec_cols(&(gain.transpose() * gain));
    let alpha = 0.9 * -abscissa;
    let mut s = eye.clone();
    let mut c_alpha: f64 = 1.0;
    let panels = 2 * ((horizon_t / dt_report).round() as usize).max(1);
    let hh = horizon_t / panels as f64;
    let adj_hh = (gen.adjoint() * hh).exp();
    let mut sf = ftf.clone();
    let mut sf_samples = Vec::with_capacity(panels + 1);
    for _ in 0..=panels {
        sf_samples.push(sf.clone());
        sf = &adj_hh * sf;
    }
    let mut integral = DMatrix::<f64>::zeros(n, n);
    for (i, v) in sf_samples.iter().enumerate() {
        let w = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += unvec_cols(v, n) * (w * hh / 3.0);
    }
    let measured = lambda_max_sym(&symmetrize(&integral)).max(0.0).sqrt();
    let grid_points = (t_max / h).round() as usize;
    for i in 1..=grid_points {
        s = &adj_step * s;
        let t = i as f64 * h;
        c_alpha = c_alpha.max((alpha * t).exp() * lambda_max_sym(&symmetrize(&unvec_cols(&s, n))));
    }
    let gain_norm = gain.norm();
    let decay = 1.0 - (-alpha * horizon_t).exp();
    let formula_constant = c_alpha * decay * gain_norm / alpha;
    let sqrt_constant = gain_norm * (c_alpha * decay / alpha).sqrt();
    let constants = FeedbackCostConstants {
        t: horizon_t,
        alpha,
        c_alpha,
        gain_norm,
        formula_constant,
        sqrt_constant,
        measured,
        measured_within_sqrt: measured <= sqrt_constant * (1.0 + 1e-9),
        measured_within_formula: measured <= formula_constant * (1.0 + 1e-9),
    };

    Ok(FeedbackRun {
        abscissa,
        diverged: false,
        curve: curve_to(horizon_t),
        cost,
        tail,
        t_max,
        constants: Some(constants),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceOptions {
    pub t_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub driver: crate::tree::DriverKind,
    pub riccati: RiccatiOptions,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self {
            t_grid: vec![1.0, 2.0],
            delta_grid: vec![0.5, 0.9],
            k: 6,
            driver: crate::tree::DriverKind::Bernoulli,
            riccati: RiccatiOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub riccati_solvable: bool,
    pub feedback_stabilizable: bool,
    pub weakly_observable: bool,
    pub null_controllable_with_cost: bool,
    pub agreement: bool,
    /// Best closed-loop abscissa found (Riccati gain or gain search).
    pub abscissa: f64,
    pub riccati_p: Option<Vec<f64>>,
    /// `(T, δ)` of the first grid point with a finite constant.
    pub grid_point: Option<(f64, f64)>,
    #[serde(serialize_with = "finite_or_null")]
    pub c_opt: f64,
    #[serde(rename = "K")]
    pub k_used: usize,
    pub refined: bool,
    pub theorem: Option<Theorem51Report>,
}

fn observability_stage(
    sys: &StochasticSystem,
    opts: &EquivalenceOptions,
    k: usize,
    exec: Execution,
) -> Result<(Option<(f64, f64)>, f64, Option<Theorem51Report>)> {
    let driver = TreeDriver::new(opts.driver)?;
    for &t in &opts.t_grid {
        for &delta in &opts.delta_grid {
            let h = HorizonConfig::new(t, k)?;
            let rep = optimal_constant_recursive(sys, &driver, h, delta)?;
            if rep.observable {
                let tree = build_tree(&driver, h, sys.noise_dim)?;
                let theorem = verify_theorem_5_1(&tree, sys, delta, exec)?;
                return Ok((Some((t, delta)), rep.c_opt, Some(theorem)));
            }
        }
    }
    Ok((None, f64::INFINITY, None))
}

/// Runs the four verdicts; retries the tree-based ones once at `2K` when
/// they disagree with the algebraic ones.
pub fn equivalence_harness(
    sys: &StochasticSystem,
    opts: &EquivalenceOptions,
    exec: Execution,
) -> Result<EquivalenceReport> {
    if opts.t_grid.is_empty() || opts.delta_grid.is_empty() {
        return Err(invalid("T and δ grids must be nonempty"));
    }
    if opts.delta_grid.iter().any(|d| !(*d > 0.0 && *d < 1.0))
        || opts.t_grid.iter().any(|t| !(*t > 0.0))
    {
        return Err(invalid("grid values out of range"));
    }
    let mut ropts = opts.riccati.clone();
    ropts.execution = exec;
    let outcome = solve_sare(sys, &ropts)?;
    let (riccati_solvable, riccati_p, ric_abscissa) = match &outcome {
        RiccatiOutcome::Solved(s) => (true, Some(s.p.as_slice().to_vec()), s.closed_loop_abscissa),
        RiccatiOutcome::NotSolvable { best_abscissa } => (false, None, *best_abscissa),
    };
    let search_abscissa = if riccati_solvable {
        ric_abscissa
    } else {
        find_stabilizing_gain(sys, &ropts).abscissa
    };
    let abscissa = ric_abscissa.min(search_abscissa);
    let feedback_stabilizable = abscissa < 0.0;

    let mut k = opts.k;
    let mut refined = false;
    let (mut point, mut c_opt, mut theorem) = observability_stage(sys, opts, k, exec)?;
    let verdicts = |point: &Option<(f64, f64)>, theorem: &Option<Theorem51Report>| {
        (
            point.is_some(),
            theorem.as_ref().is_some_and(|t| t.passed()),
        )
    };
    let (mut weak, mut nc) = verdicts(&point, &theorem);
    if riccati_solvable && feedback_stabilizable && !(weak && nc) {
        match observability_stage(sys, opts, 2 * k, exec) {
            Ok(res) => {
                k *= 2;
                refined = true;
                (point, c_opt, theorem) = res;
                (weak, nc) = verdicts(&point, &theorem);
            }
            Err(Error::BudgetExceeded { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let all = [riccati_solvable, feedback_stabilizable, weak, nc];
    Ok(EquivalenceReport {
        riccati_solvable,
        feedback_stabilizable,
        weakly_observable: weak,
        null_controllable_with_cost: nc,
        agreement: all.iter().all(|v| *v == all[0]),
        abscissa,
        riccati_p,
        grid_point: point,
        c_opt,
        k_used: k,
        refined,
        theorem,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::null_control::{control_kernel, Gramian};
    use crate::tree::DriverKind;

    fn setup(sys: &StochasticSystem, delta: f64, k: usize) -> (NoiseTree, ControlKernel) {
        let driver = TreeDriver::new(DriverKind::Bernoulli).unwrap();
        let h = HorizonConfig::new(1.0, k).unwrap();
        let tree = build_tree(&driver, h, 1).unwrap();
        let c = optimal_constant_recursive(sys, &driver, h, delta)
            .unwrap()
            .c_opt;
        let gram = Gramian::auto(&tree, sys, c, delta, Execution::Sequential).unwrap();
        let kernel = control_kernel(&tree, sys, &gram, Execution::Sequential).unwrap();
        (tree, kernel)
    }

    #[test]
    fn zero_initial_state() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        let (tree, kernel) = setup(&sys, 0.5, 4);
        let run = run_piecewise(
            &sys,
            &tree,
            &kernel,
            &[0.0],
            3,
            100,
            1,
            Execution::Sequential,
        )
        .unwrap();
        assert!(run
            .records
            .iter()
            .all(|r| r.second_moment == 0.0 && r.cumulative_energy == 0.0));
    }

    #[test]
    fn martingale_decay() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        let (tree, kernel) = setup(&sys, 0.5, 4);
        let run = run_piecewise(
            &sys,
            &tree,
            &kernel,
            &[1.0],
            4,
            2000,
            9,
            Execution::Parallel,
        )
        .unwrap();
        for r in &run.records {
            let bound = 0.5f64.powi(r.k as i32);
            assert!(
                r.second_moment <= bound + 3.0 * r.second_moment_se + 1e-12,
                "{r:?}"
            );
        }
        for w in run.records.windows(2) {
            assert!(w[1].cumulative_energy >= w[0].cumulative_energy);
        }
        assert!(run.total_energy() <= run.energy_bound);
    }

    #[test]
    fn reproducible_across_execution() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        let (tree, kernel) = setup(&sys, 0.5, 4);
        let a = run_piecewise(
            &sys,
            &tree,
            &kernel,
            &[1.0],
            3,
            500,
            42,
            Execution::Sequential,
        )
        .unwrap();
        let b = run_piecewise(
            &sys,
            &tree,
            &kernel,
            &[1.0],
            3,
            500,
            42,
            Execution::Parallel,
        )
        .unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.second_moment, y.second_moment);
            assert_eq!(x.cumulative_energy, y.cumulative_energy);
        }
        let c = run_piecewise(
            &sys,
            &tree,
            &kernel,
            &[1.0],
            3,
            500,
            43,
            Execution::Sequential,
        )
        .unwrap();
        assert_ne!(a.records[1].second_moment, c.records[1].second_moment);
    }

    #[test]
    fn feedback_cost_s1() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        let run = run_riccati_feedback(&sys, &DMatrix::from_element(1, 1, -1.0), &[1.0], 1.0, 0.01)
            .unwrap();
        assert!(!run.diverged);
        assert!((run.cost - 1.0).abs() < 1e-4, "{}", run.cost);
        let k = run.constants.unwrap();
        assert!(k.measured_within_sqrt);
    }

    #[test]
    fn feedback_cost_s2() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        let run = run_riccati_feedback(&sys, &DMatrix::from_element(1, 1, -g), &[1.0], 1.0, 0.01)
            .unwrap();
        assert!((run.cost - g).abs() < 1e-3, "{}", run.cost);
        assert!((run.abscissa + 5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn feedback_divergence() {
        let sys = StochasticSystem::scalar(1.0, 0.0, 0.0, 0.0);
        let run = run_riccati_feedback(&sys, &DMatrix::zeros(1, 1), &[1.0], 1.0, 0.1).unwrap();
        assert!(run.diverged && run.cost.is_infinite());
        assert!((run.abscissa - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equivalence_s1_and_s3() {
        let opts = EquivalenceOptions::default();
        let s1 = equivalence_harness(
            &StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0),
            &opts,
            Execution::Parallel,
        )
        .unwrap();
        assert!(s1.agreement && s1.riccati_solvable, "{s1:?}");
        let s3 = equivalence_harness(
            &StochasticSystem::scalar(1.0, 0.0, 0.0, 0.0),
            &opts,
            Execution::Parallel,
        )
        .unwrap();
        assert!(s3.agreement && !s3.riccati_solvable, "{s3:?}");
    }

    #[test]
    fn budget_guard() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        let (tree, kernel) = setup(&sys, 0.5, 4);
        let err = run_piecewise(
            &sys,
            &tree,
            &kernel,
            &[1.0],
            1000,
            100_000,
            0,
            Execution::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }
}
