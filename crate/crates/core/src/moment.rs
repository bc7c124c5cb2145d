//! Second-moment lift.
//!
//! For a gain `F` the second moment `X = E[x x^T]` of the closed loop obeys
//! the linear flow
//!
//! ```text
//! dX/dt = (A+BF) X + X (A+BF)^T + sum_i (C_i+D_i F) X (C_i+D_i F)^T
//! ```
//!
//! which we represent as an `n² × n²` matrix acting on the column-stacked
//! `vec(X)`. Mean-square stability of the closed loop is equivalent to the
//! spectral abscissa of that matrix being negative.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{lambda_max_sym, symmetrize, unvec_cols, vec_cols};
use crate::model::{eigenvalues, StochasticSystem};

#[derive(Debug, Clone)]
pub struct MomentGenerator {
    /// Lift acting on column-stacked `vec(X)`.
    pub l: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstant {
    pub tau: f64,
    pub c0: f64,
}

fn lift(a: &DMatrix<f64>, cs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut l = eye.kronecker(a) + a.kronecker(&eye);
    for c in cs {
        l += c.kronecker(c);
    }
    l
}

pub fn build_generator(sys: &StochasticSystem, gain: &DMatrix<f64>) -> Result<MomentGenerator> {
    if gain.shape() != (sys.m, sys.n) {
        return Err(invalid(format!(
            "gain must be {}x{}, got {}x{}",
            sys.m,
            sys.n,
            gain.nrows(),
            gain.ncols()
        )));
    }
    let (a, cs) = sys.closed_loop(gain);
    Ok(MomentGenerator {
        l: lift(&a, &cs),
        gain: gain.clone(),
        n: sys.n,
    })
}

/// Open-loop generator (`F = 0`).
pub fn open_loop_generator(sys: &StochasticSystem) -> MomentGenerator {
    build_generator(sys, &DMatrix::zeros(sys.m, sys.n)).expect("zero gain has the right shape")
}

pub fn spectral_abscissa(gen: &MomentGenerator) -> Result<f64> {
    Ok(eigenvalues(&gen.l)?
        .iter()
        .fold(f64::NEG_INFINITY, |acc, z| acc.max(z.re)))
}

impl MomentGenerator {
    /// The lift of the adjoint flow `S ↦ A^T S + S A + sum C^T S C`.
    pub fn adjoint(&self) -> DMatrix<f64> {
        self.l.transpose()
    }

    /// `exp(t L)` for repeated propagation with a fixed step.
    pub fn flow(&self, t: f64) -> DMatrix<f64> {
        (&self.l * t).exp()
    }
}

/// `X(t) = exp(t L) X0`, symmetrized.
pub fn propagate_second_moment(
    gen: &MomentGenerator,
    x0: &DMatrix<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    if x0.shape() != (gen.n, gen.n) {
        return Err(invalid("X0 shape does not match the generator"));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(invalid(format!(
            "time must be finite and non-negative, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    let v = gen.flow(t) * vec_cols(x0);
    Ok(symmetrize(&unvec_cols(&v, gen.n)))
}

/// `S(tau)` of the uncontrolled adjoint flow started at the identity.
pub fn adjoint_flow_from_identity(sys: &StochasticSystem, tau: f64) -> DMatrix<f64> {
    let gen = open_loop_generator(sys);
    let eye = DMatrix::<f64>::identity(sys.n, sys.n);
    let v = (gen.adjoint() * tau).exp() * vec_cols(&eye);
    symmetrize(&unvec_cols(&v, sys.n))
}

/// Tight constant in `E|x(tau; 0, xi)|² <= c0 E|xi|²` for the uncontrolled
/// system: `c0 = λ_max(S(tau))`.
pub fn growth_constant_c0(sys: &StochasticSystem, tau: f64) -> Result<GrowthConstant> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    let s = adjoint_flow_from_identity(sys, tau);
    Ok(GrowthConstant {
        tau,
        c0: lambda_max_sym(&s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn golden() -> f64 {
        (1.0 + 5f64.sqrt()) / 2.0
    }

    #[test]
    fn scalar_lift_formula() {
        let (a, b, c, e, f) = (0.3, -1.2, 0.7, 0.4, 0.9);
        let sys = StochasticSystem::scalar(a, b, c, e);
        let gen = build_generator(&sys, &DMatrix::from_element(1, 1, f)).unwrap();
        let expected = 2.0 * (a + b * f) + (c + e * f).powi(2);
        assert_relative_eq!(gen.l[(0, 0)], expected, epsilon = 1e-14);
    }

    #[test]
    fn zero_system_has_zero_lift() {
        let sys = StochasticSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            vec![DMatrix::zeros(2, 2)],
            vec![DMatrix::zeros(2, 1)],
        )
        .unwrap();
        let gen = open_loop_generator(&sys);
        assert_eq!(gen.l, DMatrix::zeros(4, 4));
        assert_eq!(spectral_abscissa(&gen).unwrap(), 0.0);
        let x0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(propagate_second_moment(&gen, &x0, 5.0).unwrap(), x0);
    }

    #[test]
    fn s2_closed_loop_abscissa() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        let gen = build_generator(&sys, &DMatrix::from_element(1, 1, -golden())).unwrap();
        assert_relative_eq!(gen.l[(0, 0)], -5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(
            spectral_abscissa(&gen).unwrap(),
            -5f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn scalar_propagation_matches_exponential() {
        let sys = StochasticSystem::scalar(-1.0, 0.0, 0.0, 0.0);
        let gen = open_loop_generator(&sys);
        let x = propagate_second_moment(&gen, &DMatrix::from_element(1, 1, 1.0), 1.0).unwrap();
        assert_relative_eq!(x[(0, 0)], (-2f64).exp(), max_relative = 1e-12);
        let x0 = DMatrix::from_element(1, 1, 3.0);
        assert_eq!(propagate_second_moment(&gen, &x0, 0.0).unwrap(), x0);
    }

    #[test]
    fn growth_constant_cases() {
        let zero = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        assert_relative_eq!(
            growth_constant_c0(&zero, 3.0).unwrap().c0,
            1.0,
            epsilon = 1e-12
        );
        let s = StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0);
        assert_relative_eq!(
            growth_constant_c0(&s, 1.0).unwrap().c0,
            1f64.exp(),
            max_relative = 1e-12
        );
        let (a, c, tau) = (-0.4, 0.6, 2.5);
        let s = StochasticSystem::scalar(a, 0.0, c, 0.0);
        assert_relative_eq!(
            growth_constant_c0(&s, tau).unwrap().c0,
            ((2.0 * a + c * c) * tau).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn lift_preserves_symmetry() {
        let sys = StochasticSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.1, 2.0, -0.3, 0.4]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            vec![DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.0, -0.3])],
            vec![DMatrix::from_row_slice(2, 1, &[0.0, 0.7])],
        )
        .unwrap();
        let gen = build_generator(&sys, &DMatrix::from_row_slice(1, 2, &[-1.0, 0.5])).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let y = unvec_cols(&(&gen.l * vec_cols(&x)), 2);
        assert!((&y - y.transpose()).norm() < 1e-14);
    }
}
