//! Bundled example systems with known outcomes.

use nalgebra::DMatrix;

use crate::model::StochasticSystem;

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub system: StochasticSystem,
    /// Expected common verdict of the equivalence harness.
    pub expected_verdict: bool,
    /// Stabilizing Riccati root, when known in closed form.
    pub expected_p: Option<f64>,
}

/// `A = 0, B = 1`, no noise.
pub fn s1() -> StochasticSystem {
    StochasticSystem::scalar(0.0, 1.0, 0.0, 0.0)
}

/// `A = 0, B = 1`, multiplicative state noise `C = 1`.
pub fn s2() -> StochasticSystem {
    StochasticSystem::scalar(0.0, 1.0, 1.0, 0.0)
}

/// `A = 1, B = 0`: unstable and uncontrolled.
pub fn s3() -> StochasticSystem {
    StochasticSystem::scalar(1.0, 0.0, 0.0, 0.0)
}

/// `A = 1, B = 1, D = 1`: the drift pair passes the Hautus test, but every
/// control also feeds the noise, so `d E x² / dt = (2 + 2f + f²) E x²` is
/// positive for every gain `f`.
pub fn s4() -> StochasticSystem {
    StochasticSystem::scalar(1.0, 1.0, 0.0, 1.0)
}

/// Two-dimensional martingale case `A = C = 0, B = I, D = 0`.
pub fn m0() -> StochasticSystem {
    StochasticSystem::new(
        DMatrix::zeros(2, 2),
        DMatrix::identity(2, 2),
        vec![DMatrix::zeros(2, 2)],
        vec![DMatrix::zeros(2, 2)],
    )
    .expect("static system is valid")
}

pub fn corpus() -> Vec<CorpusEntry> {
    vec![
        CorpusEntry {
            name: "S1",
            description: "A=0, B=1, C=D=0; stabilizable, P = 1",
            system: s1(),
            expected_verdict: true,
            expected_p: Some(1.0),
        },
        CorpusEntry {
            name: "S2",
            description: "A=0, B=1, C=1, D=0; stabilizable, P = (1+sqrt 5)/2",
            system: s2(),
            expected_verdict: true,
            expected_p: Some((1.0 + 5f64.sqrt()) / 2.0),
        },
        CorpusEntry {
            name: "S3",
            description: "A=1, B=0, C=D=0; not stabilizable, no output",
            system: s3(),
            expected_verdict: false,
            expected_p: None,
        },
        CorpusEntry {
            name: "S4",
            description: "A=1, B=1, C=0, D=1; Hautus passes but control noise prevents mean-square stabilization",
            system: s4(),
            expected_verdict: false,
            expected_p: None,
        },
        CorpusEntry {
            name: "M0",
            description: "A=C=0, B=I, D=0 in two dimensions; martingale case with c_opt(0) = 1/T",
            system: m0(),
            expected_verdict: true,
            expected_p: None,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hautus_stabilizability;
    use crate::riccati::{solve_sare, RiccatiOptions};

    #[test]
    fn corpus_riccati_outcomes() {
        for entry in corpus() {
            let out = solve_sare(&entry.system, &RiccatiOptions::default()).unwrap();
            assert_eq!(
                out.solution().is_some(),
                entry.expected_verdict,
                "{}",
                entry.name
            );
            if let (Some(p), Some(sol)) = (entry.expected_p, out.solution()) {
                assert!((sol.p[(0, 0)] - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn s4_passes_hautus() {
        let s = s4();
        assert!(hautus_stabilizability(&s.a, &s.b, 1e-9).unwrap());
    }
}
