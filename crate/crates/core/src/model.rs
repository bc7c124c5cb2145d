//! The controlled linear SDE
//!
//! ```text
//! dx = (A x + B u) dt + sum_i (C_i x + D_i u) dw^i
//! ```
//!
//! and its dual observation system, which reads the same record as
//! `[A^T, B^T, C^T, D^T]`.

use std::fmt;

use nalgebra::{Complex, DMatrix, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Result};

/// Constant-coefficient system `[A, B, C, D]` with dimensions `(n, m, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSystem {
    pub n: usize,
    pub m: usize,
    pub noise_dim: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub problem: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.problem)
    }
}

impl StochasticSystem {
    /// Builds a system and rejects it if [`validate_system`] finds anything.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let sys = Self {
            n: a.nrows(),
            m: b.ncols(),
            noise_dim: c.len(),
            a,
            b,
            c,
            d,
        };
        let violations = validate_system(&sys);
        if violations.is_empty() {
            Ok(sys)
        } else {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(invalid(msg.join("; ")))
        }
    }

    /// Scalar system `dx = (a x + b u) dt + (c x + e u) dw`.
    pub fn scalar(a: f64, b: f64, c: f64, e: f64) -> Self {
        let one = |v| DMatrix::from_element(1, 1, v);
        Self {
            n: 1,
            m: 1,
            noise_dim: 1,
            a: one(a),
            b: one(b),
            c: vec![one(c)],
            d: vec![one(e)],
        }
    }

    /// The dual record `[A^T, B^T, C^T, D^T]`.
    pub fn transposed(
        &self,
    ) -> (
        DMatrix<f64>,
        DMatrix<f64>,
        Vec<DMatrix<f64>>,
        Vec<DMatrix<f64>>,
    ) {
        (
            self.a.transpose(),
            self.b.transpose(),
            self.c.iter().map(|c| c.transpose()).collect(),
            self.d.iter().map(|d| d.transpose()).collect(),
        )
    }

    /// Closed-loop drift `A + BF` and diffusions `C_i + D_i F`.
    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let a = &self.a + &self.b * gain;
        let c = self
            .c
            .iter()
            .zip(&self.d)
            .map(|(c, d)| c + d * gain)
            .collect();
        (a, c)
    }

    /// True when every `C_i` and `D_i` vanishes.
    pub fn is_deterministic(&self) -> bool {
        self.c.iter().all(|c| c.iter().all(|v| *v == 0.0))
            && self.d.iter().all(|d| d.iter().all(|v| *v == 0.0))
    }
}

/// Time horizon `T` split into `K` equal steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub t: f64,
    pub k: usize,
}

impl HorizonConfig {
    pub fn new(t: f64, k: usize) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(invalid(format!("horizon T must be positive, got {t}")));
        }
        if k == 0 {
            return Err(invalid("number of steps K must be positive"));
        }
        Ok(Self { t, k })
    }

    pub fn delta_t(&self) -> f64 {
        self.t / self.k as f64
    }
}

/// Lists shape and finiteness problems; an empty list means the system is valid.
pub fn validate_system(sys: &StochasticSystem) -> Vec<Violation> {
    let mut out = Vec::new();
    let (n, m, d) = (sys.n, sys.m, sys.noise_dim);
    let mut push = |field: String, problem: String| out.push(Violation { field, problem });

    if n == 0 {
        push("n".into(), "state dimension must be positive".into());
    }
    if m == 0 {
        push("m".into(), "control dimension must be positive".into());
    }
    if d == 0 {
        push("d".into(), "noise dimension must be positive".into());
    }

    let mut check = |name: String, mat: &DMatrix<f64>, rows: usize, cols: usize| {
        if mat.shape() != (rows, cols) {
            push(
                format!("{name} shape"),
                format!(
                    "expected {rows}x{cols}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                ),
            );
        }
        if mat.iter().any(|v| !v.is_finite()) {
            push(name, "non-finite entry".into());
        }
    };
    check("A".into(), &sys.a, n, n);
    check("B".into(), &sys.b, n, m);
    for (i, c) in sys.c.iter().enumerate() {
        check(format!("C[{i}]"), c, n, n);
    }
    for (i, dm) in sys.d.iter().enumerate() {
        check(format!("D[{i}]"), dm, n, m);
    }

    if sys.c.len() != d {
        out.push(Violation {
            field: "C length".into(),
            problem: format!("expected {d} matrices, got {}", sys.c.len()),
        });
    }
    if sys.d.len() != d {
        out.push(Violation {
            field: "D length".into(),
            problem: format!("expected {d} matrices, got {}", sys.d.len()),
        });
    }
    out
}

/// Eigenvalues of a real square matrix via a real Schur form.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let scale = m.amax();
    if scale == 0.0 {
        return Ok(vec![Complex::new(0.0, 0.0); m.nrows()]);
    }
    let schur = Schur::try_new(m / scale, f64::EPSILON, 100_000)
        .ok_or_else(|| numerical("Schur decomposition did not converge"))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z * scale)
        .collect())
}

/// Hautus test for the deterministic pair `(A, B)`.
///
/// Every eigenvalue with `Re λ >= -tol` is critical; for each one the
/// matrix `[λI - A | B]` must have numerical rank `n`, singular values
/// counted above `tol * sigma_max`.
pub fn hautus_stabilizability(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if !(tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(invalid(format!(
            "inconsistent shapes: A {}x{}, B {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let n = a.nrows();
    let m = b.ncols();
    for lambda in eigenvalues(a)? {
        if lambda.re < -tol {
            continue;
        }
        let pencil = DMatrix::<Complex<f64>>::from_fn(n, n + m, |r, c| {
            if c < n {
                let diag = if r == c {
                    lambda
                } else {
                    Complex::new(0.0, 0.0)
                };
                diag - Complex::new(a[(r, c)], 0.0)
            } else {
                Complex::new(b[(r, c - n)], 0.0)
            }
        });
        let sv = pencil.singular_values();
        let smax = sv.iter().fold(0.0_f64, |acc, s| acc.max(*s));
        let rank = sv.iter().filter(|s| smax > 0.0 && **s > tol * smax).count();
        if rank < n {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_system_is_valid() {
        let sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        assert!(validate_system(&sys).is_empty());
    }

    #[test]
    fn wrong_a_shape_is_reported() {
        let mut sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        sys.n = 2;
        sys.b = DMatrix::zeros(2, 1);
        sys.c = vec![DMatrix::zeros(2, 2)];
        sys.d = vec![DMatrix::zeros(2, 1)];
        let v = validate_system(&sys);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "A shape");
    }

    #[test]
    fn non_finite_entry_is_reported() {
        let mut sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        sys.a[(0, 0)] = f64::NAN;
        let v = validate_system(&sys);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "A");
        assert!(v[0].problem.contains("non-finite"));
    }

    #[test]
    fn list_length_mismatch() {
        let mut sys = StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0);
        sys.d.push(DMatrix::zeros(1, 1));
        let v = validate_system(&sys);
        assert!(v.iter().any(|x| x.field == "D length"));
    }

    #[test]
    fn hautus_double_integrator() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        assert!(hautus_stabilizability(&a, &b, 1e-9).unwrap());
    }

    #[test]
    fn hautus_unstable_uncontrolled() {
        assert!(!hautus_stabilizability(&m(1, 1, &[1.0]), &m(1, 1, &[0.0]), 1e-9).unwrap());
    }

    #[test]
    fn hautus_stable_uncontrolled() {
        assert!(hautus_stabilizability(&m(1, 1, &[-1.0]), &m(1, 1, &[0.0]), 1e-9).unwrap());
    }

    #[test]
    fn hautus_rotation_needs_complex_pencil() {
        // eigenvalues ±i; B hits both modes
        let a = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(hautus_stabilizability(&a, &m(2, 1, &[1.0, 0.0]), 1e-9).unwrap());
        assert!(!hautus_stabilizability(&a, &m(2, 1, &[0.0, 0.0]), 1e-9).unwrap());
    }

    #[test]
    fn hautus_marginal_eigenvalue_is_critical() {
        // Re λ = -1e-12 lies inside the tolerance band and is uncontrollable
        let a = m(1, 1, &[-1e-12]);
        assert!(!hautus_stabilizability(&a, &m(1, 1, &[0.0]), 1e-9).unwrap());
    }

    #[test]
    fn horizon_step() {
        let h = HorizonConfig::new(1.0, 8).unwrap();
        assert_eq!(h.delta_t() * 8.0, 1.0);
        assert!(HorizonConfig::new(0.0, 3).is_err());
        assert!(HorizonConfig::new(1.0, 0).is_err());
    }
}
