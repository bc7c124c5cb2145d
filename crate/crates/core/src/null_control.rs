//! Minimum-energy type δ-null controls built from the Gramian operator.
//!
//! On a tree the Gramian acts on terminal variables as
//!
//! ```text
//! 𝒢 f = c · x(T; u = z(f), x0 = 0) + δ f
//! ```
//!
//! which is self-adjoint in the probability-weighted inner product, with
//! `⟨𝒢 f, ξ⟩ = c Q(f, ξ) + δ E⟨f, ξ⟩`. The control `u = -c z(f)` with
//! `f = 𝒢⁻¹ x(T; 0, x_s)` lands exactly on `x(T) = δ f`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{invalid, numerical, Result};
use crate::exec::Execution;
use crate::model::StochasticSystem;
use crate::moment::growth_constant_c0;
use crate::observability::{
    assemble_forms, finite_or_null, is_delta_observable, is_delta_observable_recursive,
    optimal_constant, optimal_constant_recursive, ObservabilityForms,
};
use crate::tree::{
    simulate_forward, solve_bsde, tree_growth_constant, AdaptedField, NoiseTree, TerminalVariable,
};

/// Largest `nL` for which the dense factorization is used by default.
pub const DENSE_LIMIT: usize = 1500;

/// Dense Gramian `cQ + δN` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramianMatrix {
    pub g_form: DMatrix<f64>,
    pub c: f64,
    pub delta: f64,
    n_diag: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GramianMatrix {
    /// Solves `𝒢 f = g` in the weighted inner product, i.e.
    /// `(cQ + δN) f = N g` in coordinates.
    pub fn solve(&self, g: &TerminalVariable) -> TerminalVariable {
        let rhs = DVector::from_fn(self.n_diag.len(), |i, _| self.n_diag[i] * g.values[i]);
        let f = self.chol.solve(&rhs);
        TerminalVariable {
            n: g.n,
            values: f.as_slice().to_vec(),
        }
    }

    /// `λ_min(N^{-1/2} G N^{-1/2})`, bounded below by `δ`.
    pub fn weighted_min_eigenvalue(&self) -> f64 {
        let dim = self.n_diag.len();
        let w = self.n_diag.map(|p| 1.0 / p.sqrt());
        crate::linalg::lambda_min_sym(&DMatrix::from_fn(dim, dim, |r, k| {
            w[r] * self.g_form[(r, k)] * w[k]
        }))
    }
}

pub fn assemble_gramian(forms: &ObservabilityForms, c: f64, delta: f64) -> Result<GramianMatrix> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(invalid("Gramian constant must be finite and nonnegative"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("Gramian needs delta in (0, 1)"));
    }
    let dim = forms.dim();
    let g_form =
        crate::linalg::symmetrize(&(&forms.q * c + DMatrix::from_diagonal(&forms.n_diag) * delta));
    let chol = Cholesky::new(g_form.clone())
        .ok_or_else(|| numerical("Cholesky factorization of cQ + δN failed"))?;
    debug_assert_eq!(chol.l().nrows(), dim);
    Ok(GramianMatrix {
        g_form,
        c,
        delta,
        n_diag: forms.n_diag.clone(),
        chol,
    })
}

/// Matrix-free Gramian: each application is one backward and one forward
/// sweep over the tree; solves use conjugate gradients in the weighted
/// inner product.
#[derive(Debug, Clone, Copy)]
pub struct MatrixFreeGramian {
    pub c: f64,
    pub delta: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl MatrixFreeGramian {
    pub fn new(c: f64, delta: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) || !(delta > 0.0 && delta < 1.0) {
            return Err(invalid(
                "matrix-free Gramian needs c >= 0 and delta in (0, 1)",
            ));
        }
        Ok(Self {
            c,
            delta,
            rel_tol: 1e-14,
            max_iter: 2000,
        })
    }

    pub fn apply(
        &self,
        tree: &NoiseTree,
        sys: &StochasticSystem,
        f: &TerminalVariable,
    ) -> Result<TerminalVariable> {
        let z = solve_bsde(tree, sys, f)?.z;
        let x = simulate_forward(tree, sys, &vec![0.0; sys.n], Some(&z))?.leaf_layer(tree);
        Ok(TerminalVariable {
            n: f.n,
            values: x
                .values
                .iter()
                .zip(&f.values)
                .map(|(xv, fv)| self.c * xv + self.delta * fv)
                .collect(),
        })
    }

    pub fn solve(
        &self,
        tree: &NoiseTree,
        sys: &StochasticSystem,
        g: &TerminalVariable,
    ) -> Result<TerminalVariable> {
        let inner = |a: &TerminalVariable, b: &TerminalVariable| tree.expect_inner(a, b);
        let axpy = |y: &mut TerminalVariable, a: f64, x: &TerminalVariable| {
            y.values
                .iter_mut()
                .zip(&x.values)
                .for_each(|(yv, xv)| *yv += a * xv);
        };
        let mut f = TerminalVariable {
            n: g.n,
            values: vec![0.0; g.values.len()],
        };
        let mut r = g.clone();
        let target = self.rel_tol * inner(g, g).sqrt();
        let mut p = r.clone();
        let mut rr = inner(&r, &r);
        for _ in 0..self.max_iter {
            if rr.sqrt() <= target {
                return Ok(f);
            }
            let ap = self.apply(tree, sys, &p)?;
            let pap = inner(&p, &ap);
            if !(pap > 0.0) {
                return Err(numerical("Gramian lost positive definiteness in CG"));
            }
            let alpha = rr / pap;
            axpy(&mut f, alpha, &p);
            axpy(&mut r, -alpha, &ap);
            let rr_new = inner(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            p.values
                .iter_mut()
                .zip(&r.values)
                .for_each(|(pv, rv)| *pv = rv + beta * *pv);
        }
        if rr.sqrt() <= 1e3 * target {
            Ok(f)
        } else {
            Err(numerical(format!(
                "CG did not converge: residual {:.3e}",
                rr.sqrt()
            )))
        }
    }
}

/// Either Gramian representation.
#[derive(Debug, Clone)]
pub enum Gramian {
    Dense(Box<GramianMatrix>, ObservabilityForms),
    MatrixFree(MatrixFreeGramian),
}

impl Gramian {
    /// Dense when `nL ≤ DENSE_LIMIT`, matrix-free otherwise.
    pub fn auto(
        tree: &NoiseTree,
        sys: &StochasticSystem,
        c: f64,
        delta: f64,
        exec: Execution,
    ) -> Result<Self> {
        if tree.leaf_count() * sys.n <= DENSE_LIMIT {
            let forms = assemble_forms(tree, sys, exec)?;
            let g = assemble_gramian(&forms, c, delta)?;
            Ok(Gramian::Dense(Box::new(g), forms))
        } else {
            Ok(Gramian::MatrixFree(MatrixFreeGramian::new(c, delta)?))
        }
    }

    pub fn c(&self) -> f64 {
        match self {
            Gramian::Dense(g, _) => g.c,
            Gramian::MatrixFree(g) => g.c,
        }
    }

    pub fn delta(&self) -> f64 {
        match self {
            Gramian::Dense(g, _) => g.delta,
            Gramian::MatrixFree(g) => g.delta,
        }
    }

    pub fn solve(
        &self,
        tree: &NoiseTree,
        sys: &StochasticSystem,
        g: &TerminalVariable,
    ) -> Result<TerminalVariable> {
        match self {
            Gramian::Dense(gm, _) => Ok(gm.solve(g)),
            Gramian::MatrixFree(mf) => mf.solve(tree, sys, g),
        }
    }

    fn admissible(&self, tree: &NoiseTree, sys: &StochasticSystem) -> Result<bool> {
        match self {
            Gramian::Dense(g, forms) => Ok(is_delta_observable(forms, g.delta, g.c)),
            Gramian::MatrixFree(g) => {
                is_delta_observable_recursive(sys, &tree.driver, tree.horizon, g.delta, g.c)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisBounds {
    /// `c δ⁻¹ c0 |x_s|²` with the tree growth constant.
    pub energy_bound: f64,
    /// Same with the continuous-time growth constant.
    pub energy_bound_continuous: f64,
    pub terminal_bound: f64,
    pub f_bound: f64,
    pub energy_ok: bool,
    pub energy_ok_continuous: bool,
    pub terminal_ok: bool,
    pub f_ok: bool,
}

impl SynthesisBounds {
    pub fn all_ok(&self) -> bool {
        self.energy_ok && self.terminal_ok && self.f_ok
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub f: TerminalVariable,
    pub u: AdaptedField,
    pub terminal: TerminalVariable,
    pub control_energy: f64,
    pub terminal_energy: f64,
    pub f_energy: f64,
    /// `max |x(T) - δ f|` over leaves and components.
    pub terminal_identity_error: f64,
    /// `|‖u‖² - c(⟨𝒢f, f⟩ - δE|f|²)|`.
    pub energy_identity_error: f64,
    pub c0_tree: f64,
    pub c0_continuous: f64,
    pub bounds: SynthesisBounds,
}

const BOUND_SLACK: f64 = 1e-9;

pub fn synthesize_control(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    x_s: &[f64],
    gram: &Gramian,
) -> Result<SynthesisResult> {
    if x_s.len() != sys.n || x_s.iter().any(|v| !v.is_finite()) {
        return Err(invalid("x_s must be a finite vector of dimension n"));
    }
    if !gram.admissible(tree, sys)? {
        return Err(invalid(format!(
            "c = {} is not a valid δ-observability constant for δ = {} (is_delta_observable is false)",
            gram.c(),
            gram.delta()
        )));
    }
    let c0_tree = tree_growth_constant(tree, sys)?;
    let c0_continuous = growth_constant_c0(sys, tree.horizon.t)?.c0;
    synthesize_with_constants(tree, sys, x_s, gram, c0_tree, c0_continuous)
}

fn synthesize_with_constants(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    x_s: &[f64],
    gram: &Gramian,
    c0_tree: f64,
    c0_continuous: f64,
) -> Result<SynthesisResult> {
    let (c, delta) = (gram.c(), gram.delta());
    let g = simulate_forward(tree, sys, x_s, None)?.leaf_layer(tree);
    let f = gram.solve(tree, sys, &g)?;
    let mut u = solve_bsde(tree, sys, &f)?.z;
    u.scale(-c);
    let terminal = simulate_forward(tree, sys, x_s, Some(&u))?.leaf_layer(tree);

    let control_energy = tree.control_energy(&u);
    let terminal_energy = tree.expect_inner(&terminal, &terminal);
    let f_energy = tree.expect_inner(&f, &f);
    let terminal_identity_error = terminal
        .values
        .iter()
        .zip(&f.values)
        .fold(0.0_f64, |acc, (x, fv)| acc.max((x - delta * fv).abs()));
    // ⟨𝒢f, f⟩ = ⟨g, f⟩ for the exact solution
    let gf = tree.expect_inner(&g, &f);
    let energy_identity_error = (control_energy - c * (gf - delta * f_energy)).abs();

    let xs2: f64 = x_s.iter().map(|v| v * v).sum();
    let energy_bound = if delta > 0.0 {
        c / delta * c0_tree * xs2
    } else {
        f64::INFINITY
    };
    let energy_bound_continuous = if delta > 0.0 {
        c / delta * c0_continuous * xs2
    } else {
        f64::INFINITY
    };
    let terminal_bound = delta * xs2;
    let f_bound = xs2 / delta;
    let within = |v: f64, b: f64| v <= b * (1.0 + BOUND_SLACK) + 1e-14;
    let bounds = SynthesisBounds {
        energy_bound,
        energy_bound_continuous,
        terminal_bound,
        f_bound,
        energy_ok: within(control_energy, energy_bound),
        energy_ok_continuous: within(control_energy, energy_bound_continuous),
        terminal_ok: within(terminal_energy, terminal_bound),
        f_ok: within(f_energy, f_bound),
    };
    Ok(SynthesisResult {
        f,
        u,
        terminal,
        control_energy,
        terminal_energy,
        f_energy,
        terminal_identity_error,
        energy_identity_error,
        c0_tree,
        c0_continuous,
        bounds,
    })
}

/// State-linear control law on one interval: at internal node `j` the
/// control is `K_j x_s`.
#[derive(Debug, Clone)]
pub struct ControlKernel {
    pub n: usize,
    pub m: usize,
    /// Row-major `m × n` blocks, one per internal node.
    pub blocks: Vec<f64>,
    pub c: f64,
    pub delta: f64,
    pub t: f64,
    pub c0_tree: f64,
    pub c0_continuous: f64,
}

impl ControlKernel {
    pub fn block(&self, node: usize) -> &[f64] {
        let sz = self.m * self.n;
        &self.blocks[node * sz..(node + 1) * sz]
    }

    /// Writes `K_node x` into `out`.
    pub fn control_at(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let blk = self.block(node);
        for (r, o) in out.iter_mut().enumerate() {
            *o = blk[r * self.n..(r + 1) * self.n]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    pub fn apply(&self, tree: &NoiseTree, x_s: &[f64]) -> AdaptedField {
        let mut u = AdaptedField::control_zeros(tree, self.m);
        for j in 0..tree.internal_count() {
            self.control_at(j, x_s, u.node_mut(j));
        }
        u
    }
}

/// Kernel from the syntheses of the `n` canonical basis states.
pub fn control_kernel(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    gram: &Gramian,
    exec: Execution,
) -> Result<ControlKernel> {
    if !gram.admissible(tree, sys)? {
        return Err(invalid(format!(
            "c = {} is not a valid δ-observability constant for δ = {} (is_delta_observable is false)",
            gram.c(),
            gram.delta()
        )));
    }
    let c0_tree = tree_growth_constant(tree, sys)?;
    let c0_continuous = growth_constant_c0(sys, tree.horizon.t)?.c0;
    let (n, m) = (sys.n, sys.m);
    let cols = exec.map(n, |i| {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        synthesize_with_constants(tree, sys, &e, gram, c0_tree, c0_continuous).map(|r| r.u)
    });
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    let internal = tree.internal_count();
    let mut blocks = vec![0.0; internal * m * n];
    for j in 0..internal {
        for (i, col) in cols.iter().enumerate() {
            for r in 0..m {
                blocks[j * m * n + r * n + i] = col.node(j)[r];
            }
        }
    }
    Ok(ControlKernel {
        n,
        m,
        blocks,
        c: gram.c(),
        delta: gram.delta(),
        t: tree.horizon.t,
        c0_tree,
        c0_continuous,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BasisRecord {
    pub state: usize,
    pub control_energy: f64,
    pub terminal_energy: f64,
    pub f_energy: f64,
    pub terminal_identity_error: f64,
    pub energy_identity_error: f64,
    pub energy_bound: f64,
    pub energy_bound_continuous: f64,
    pub bounds_ok: bool,
    pub energy_ok_continuous: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem51Report {
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub applicable: bool,
    #[serde(serialize_with = "finite_or_null")]
    pub c_opt: f64,
    pub c0_tree: f64,
    pub c0_continuous: f64,
    pub basis: Vec<BasisRecord>,
    /// Observability implies controllability with cost.
    pub forward_pass: bool,
    /// `ĉ = λ_max` of the energy Gram matrix of the basis controls, so that
    /// `‖u(x_s)‖² ≤ ĉ |x_s|²`.
    pub measured_cost: f64,
    pub converse_c: f64,
    pub converse_delta: f64,
    /// Controllability with cost implies observability with the pair.
    pub converse_pass: bool,
    /// `ĉ / (c_opt δ⁻¹ c0)`: how much of the proven bound is used.
    pub cost_ratio: f64,
    pub dense: bool,
}

impl Theorem51Report {
    pub fn passed(&self) -> bool {
        self.applicable && self.forward_pass && self.converse_pass
    }
}

/// Both quantitative directions on the given tree.
pub fn verify_theorem_5_1(
    tree: &NoiseTree,
    sys: &StochasticSystem,
    delta: f64,
    exec: Execution,
) -> Result<Theorem51Report> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta must lie in (0, 1)"));
    }
    let dense = tree.leaf_count() * sys.n <= DENSE_LIMIT;
    let forms = if dense {
        Some(assemble_forms(tree, sys, exec)?)
    } else {
        None
    };
    let c_opt = match &forms {
        Some(f) => optimal_constant(f, delta)?.c_opt,
        None => optimal_constant_recursive(sys, &tree.driver, tree.horizon, delta)?.c_opt,
    };
    let c0_tree = tree_growth_constant(tree, sys)?;
    let c0_continuous = growth_constant_c0(sys, tree.horizon.t)?.c0;
    let mut report = Theorem51Report {
        delta,
        t: tree.horizon.t,
        k: tree.horizon.k,
        applicable: c_opt.is_finite(),
        c_opt,
        c0_tree,
        c0_continuous,
        basis: Vec::new(),
        forward_pass: false,
        measured_cost: f64::NAN,
        converse_c: f64::NAN,
        converse_delta: (1.0 + delta) / 2.0,
        converse_pass: false,
        cost_ratio: f64::NAN,
        dense,
    };
    if !report.applicable {
        return Ok(report);
    }
    let gram = match forms {
        Some(f) => {
            let g = assemble_gramian(&f, c_opt, delta)?;
            Gramian::Dense(Box::new(g), f)
        }
        None => Gramian::MatrixFree(MatrixFreeGramian::new(c_opt, delta)?),
    };
    let n = sys.n;
    let results = exec.map(n, |i| {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        synthesize_with_constants(tree, sys, &e, &gram, c0_tree, c0_continuous)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    report.basis = results
        .iter()
        .enumerate()
        .map(|(i, r)| BasisRecord {
            state: i,
            control_energy: r.control_energy,
            terminal_energy: r.terminal_energy,
            f_energy: r.f_energy,
            terminal_identity_error: r.terminal_identity_error,
            energy_identity_error: r.energy_identity_error,
            energy_bound: r.bounds.energy_bound,
            energy_bound_continuous: r.bounds.energy_bound_continuous,
            bounds_ok: r.bounds.all_ok(),
            energy_ok_continuous: r.bounds.energy_ok_continuous,
        })
        .collect();
    report.forward_pass = results
        .iter()
        .all(|r| r.bounds.all_ok() && r.terminal_identity_error < 1e-8);

    let gram_energy = DMatrix::from_fn(n, n, |i, j| {
        tree.control_inner(&results[i].u, &results[j].u)
    });
    let c_hat = crate::linalg::lambda_max_sym(&gram_energy).max(0.0);
    report.measured_cost = c_hat;
    report.converse_c = c_hat * (1.0 + 2.0 / (1.0 - delta));
    report.converse_pass = match &gram {
        Gramian::Dense(_, f) => is_delta_observable(f, report.converse_delta, report.converse_c),
        Gramian::MatrixFree(_) => is_delta_observable_recursive(
            sys,
            &tree.driver,
            tree.horizon,
            report.converse_delta,
            report.converse_c,
        )?,
    };
    let proven = c_opt / delta * c0_tree;
    report.cost_ratio = if proven > 0.0 { c_hat / proven } else { 0.0 };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HorizonConfig;
    use crate::tree::{build_tree, DriverKind, TreeDriver};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tree(kind: DriverKind, d: usize, t: f64, k: usize) -> NoiseTree {
        build_tree(
            &TreeDriver::new(kind).unwrap(),
            HorizonConfig::new(t, k).unwrap(),
            d,
        )
        .unwrap()
    }

    fn martingale() -> StochasticSystem {
        StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0)
    }

    #[test]
    fn zero_state_gives_zero_control() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 3);
        let gram = Gramian::auto(&tr, &martingale(), 1.0, 0.5, Execution::Sequential).unwrap();
        let res = synthesize_control(&tr, &martingale(), &[0.0], &gram).unwrap();
        assert_eq!(res.control_energy, 0.0);
        assert_eq!(res.terminal_energy, 0.0);
        assert!(res.f.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn martingale_closed_form() {
        for delta in [0.2, 0.5, 0.8] {
            let tr = tree(DriverKind::Trinomial, 1, 2.0, 4);
            let gram =
                Gramian::auto(&tr, &martingale(), 0.5, delta, Execution::Sequential).unwrap();
            let res = synthesize_control(&tr, &martingale(), &[1.5], &gram).unwrap();
            let want = 1.5 / (1.0 + delta);
            assert!(res.f.values.iter().all(|v| (v - want).abs() < 1e-12));
            assert!((res.terminal_energy - (delta * want).powi(2)).abs() < 1e-12);
            assert!(res.bounds.all_ok());
        }
    }

    #[test]
    fn gramian_weighted_spectrum() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 3);
        let sys = StochasticSystem::scalar(0.0, 0.0, 0.0, 0.0);
        let forms = assemble_forms(&tr, &sys, Execution::Sequential).unwrap();
        let g = assemble_gramian(&forms, 3.0, 0.3).unwrap();
        assert!((g.weighted_min_eigenvalue() - 0.3).abs() < 1e-14);
        let sys = StochasticSystem::scalar(0.4, 1.0, 0.3, 0.7);
        let forms = assemble_forms(&tr, &sys, Execution::Sequential).unwrap();
        let g = assemble_gramian(&forms, 2.0, 0.3).unwrap();
        assert!(g.weighted_min_eigenvalue() >= 0.3 - 1e-10);
        let g = assemble_gramian(&forms, 1e3, 0.999).unwrap();
        assert!(g.weighted_min_eigenvalue() >= 0.999 - 1e-10);
    }

    #[test]
    fn matrix_free_matches_dense() {
        let tr = tree(DriverKind::Trinomial, 1, 1.0, 4);
        let sys = StochasticSystem::scalar(0.5, 1.0, 0.8, 0.3);
        let forms = assemble_forms(&tr, &sys, Execution::Sequential).unwrap();
        let dense = assemble_gramian(&forms, 2.0, 0.4).unwrap();
        let mf = MatrixFreeGramian::new(2.0, 0.4).unwrap();
        let g = TerminalVariable::from_fn(&tr, 1, |l, _| (l as f64 * 0.3).sin());
        let a = dense.solve(&g);
        let b = mf.solve(&tr, &sys, &g).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
        let applied = mf.apply(&tr, &sys, &a).unwrap();
        assert!(applied.max_abs_diff(&g) < 1e-10);
    }

    #[test]
    fn rejects_invalid_constant() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 3);
        let gram = Gramian::auto(&tr, &martingale(), 0.01, 0.1, Execution::Sequential).unwrap();
        let err = synthesize_control(&tr, &martingale(), &[1.0], &gram).unwrap_err();
        assert!(err.to_string().contains("is_delta_observable"));
    }

    #[test]
    fn random_instances_identity_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut done = 0;
        while done < 6 {
            let (n, m) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let mut mat = |r: usize, c: usize, s: f64| {
                DMatrix::from_fn(r, c, |_, _| s * rng.gen_range(-1.0..1.0))
            };
            let sys = StochasticSystem::new(
                mat(n, n, 1.0),
                mat(n, m, 1.5),
                vec![mat(n, n, 0.5)],
                vec![mat(n, m, 0.5)],
            )
            .unwrap();
            let tr = tree(DriverKind::Bernoulli, 1, 1.0, 4);
            let delta = 0.5;
            let forms = assemble_forms(&tr, &sys, Execution::Sequential).unwrap();
            let c = optimal_constant(&forms, delta).unwrap().c_opt;
            if !c.is_finite() || c > 1e6 {
                continue;
            }
            let gram = Gramian::Dense(Box::new(assemble_gramian(&forms, c, delta).unwrap()), forms);
            let x_s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let res = synthesize_control(&tr, &sys, &x_s, &gram).unwrap();
            assert!(res.terminal_identity_error < 1e-8);
            assert!(res.energy_identity_error < 1e-9 * (1.0 + res.control_energy));
            assert!(res.bounds.all_ok(), "{:?}", res.bounds);
            let kernel = control_kernel(&tr, &sys, &gram, Execution::Parallel).unwrap();
            assert!(kernel.apply(&tr, &x_s).max_abs_diff(&res.u) < 1e-10);
            assert!(kernel
                .apply(&tr, &vec![0.0; n])
                .values
                .iter()
                .all(|v| *v == 0.0));
            done += 1;
        }
    }

    #[test]
    fn scalar_kernel_is_unit_synthesis() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 3);
        let sys = StochasticSystem::scalar(0.2, 1.0, 0.3, 0.0);
        let gram = Gramian::auto(&tr, &sys, 5.0, 0.5, Execution::Sequential).unwrap();
        let kernel = control_kernel(&tr, &sys, &gram, Execution::Sequential).unwrap();
        let unit = synthesize_control(&tr, &sys, &[1.0], &gram).unwrap();
        assert_eq!(kernel.apply(&tr, &[1.0]).values, unit.u.values);
    }

    #[test]
    fn shrinking_delta_drives_terminal_energy_down() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 5);
        let sys = martingale();
        let c0 = optimal_constant_recursive(&sys, &tr.driver, tr.horizon, 0.0)
            .unwrap()
            .c_opt;
        assert!(c0.is_finite());
        for delta in [0.1, 0.01] {
            let gram = Gramian::auto(&tr, &sys, c0, delta, Execution::Sequential).unwrap();
            let res = synthesize_control(&tr, &sys, &[1.0], &gram).unwrap();
            assert!(res.terminal_energy <= delta);
        }
    }

    #[test]
    fn theorem_on_martingale_and_s2() {
        let tr = tree(DriverKind::Trinomial, 1, 1.0, 4);
        let rep = verify_theorem_5_1(&tr, &martingale(), 0.5, Execution::Parallel).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 6);
        let s2 = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        let rep = verify_theorem_5_1(&tr, &s2, 0.6, Execution::Parallel).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.cost_ratio <= 1.0);
    }

    #[test]
    fn theorem_not_applicable_without_control() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 2);
        let sys = StochasticSystem::scalar(0.0, 0.0, 0.0, 0.0);
        let rep = verify_theorem_5_1(&tr, &sys, 0.5, Execution::Sequential).unwrap();
        assert!(!rep.applicable && !rep.passed());
    }

    #[test]
    fn theorem_matrix_free_route() {
        let tr = tree(DriverKind::Bernoulli, 1, 1.0, 11);
        let s2 = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        let rep = verify_theorem_5_1(&tr, &s2, 0.5, Execution::Parallel).unwrap();
        assert!(!rep.dense);
        assert!(rep.passed(), "{rep:?}");
    }
}
