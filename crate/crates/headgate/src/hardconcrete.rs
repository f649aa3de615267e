//! Hard-Concrete gates: a mixed discrete-continuous distribution on [0, 1]
//! with point masses at both endpoints.
//!
//! A gate is a single stochastic scalar with one learnable location
//! parameter. Sampling stretches a binary-Concrete draw to (gamma, zeta) and
//! clamps it to [0, 1], which is what produces exact zeros and ones. The
//! closed-form probability of the gate being non-zero drives the expected-L0
//! penalty used for sparsification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed gate temperature. Only the location parameter is trained.
pub const DEFAULT_BETA: f64 = 0.33;
/// Default lower stretch limit.
pub const DEFAULT_GAMMA: f64 = -0.1;
/// Default upper stretch limit.
pub const DEFAULT_ZETA: f64 = 1.1;
/// Default location init: gates start mostly open so the task signal,
/// not the init, decides which heads close.
pub const DEFAULT_PHI_INIT: f64 = 2.0;

/// Parameters of one Hard-Concrete gate.
///
/// `phi` is the learnable location; `beta`, `gamma`, `zeta` are fixed shape
/// constants shared by every gate of a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub phi: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            phi: DEFAULT_PHI_INIT,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            zeta: DEFAULT_ZETA,
        }
    }
}

impl GateParams {
    pub fn new(phi: f64, beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let p = GateParams {
            phi,
            beta,
            gamma,
            zeta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Gate with default shape constants at the given location.
    pub fn with_phi(phi: f64) -> Self {
        GateParams {
            phi,
            ..GateParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.phi.is_finite() {
            return Err(Error::Invalid(format!("gate phi must be finite, got {}", self.phi)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Invalid(format!("gate beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(Error::Invalid(format!(
                "gate stretch limits must satisfy gamma < 0 < 1 < zeta, got gamma={} zeta={}",
                self.gamma, self.zeta
            )));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reparameterized gate sample from noise u in (0, 1).
///
/// s = sigmoid((ln u - ln(1-u) + phi) / beta), stretched to (gamma, zeta)
/// and clamped to [0, 1]. The path through u carries the training gradient.
pub fn sample_gate(p: &GateParams, u: f64) -> Result<f64> {
    Ok(sample_gate_with_grad(p, u)?.0)
}

/// Gate sample plus the pathwise derivative dg/dphi at fixed noise.
///
/// The derivative is zero wherever the clamp is active; the estimator is
/// non-differentiable exactly at the kinks.
pub fn sample_gate_with_grad(p: &GateParams, u: f64) -> Result<(f64, f64)> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Invalid(format!(
            "gate noise must lie strictly inside (0,1), got {u}"
        )));
    }
    let logit_u = u.ln() - (1.0 - u).ln();
    let s = sigmoid((logit_u + p.phi) / p.beta);
    let stretched = s * (p.zeta - p.gamma) + p.gamma;
    if stretched <= 0.0 {
        Ok((0.0, 0.0))
    } else if stretched >= 1.0 {
        Ok((1.0, 0.0))
    } else {
        let ds_dphi = s * (1.0 - s) / p.beta;
        Ok((stretched, ds_dphi * (p.zeta - p.gamma)))
    }
}

/// Closed-form P(g != 0): sigmoid(phi - beta * ln(-gamma / zeta)).
///
/// Strictly increasing in phi; this is the per-gate term of the expected-L0
/// penalty.
pub fn prob_open(p: &GateParams) -> f64 {
    sigmoid(p.phi - p.beta * (-p.gamma / p.zeta).ln())
}

/// d prob_open / d phi.
pub fn prob_open_grad(p: &GateParams) -> f64 {
    let q = prob_open(p);
    q * (1.0 - q)
}

/// Deterministic inference-time gate value: the clamped stretched sigmoid
/// point estimate, clamp(sigmoid(phi) * (zeta - gamma) + gamma, 0, 1).
pub fn expected_gate(p: &GateParams) -> f64 {
    (sigmoid(p.phi) * (p.zeta - p.gamma) + p.gamma).clamp(0.0, 1.0)
}

/// Expected-L0 penalty: the sum of prob_open over a collection of gates.
pub fn l0_penalty<'a, I>(gates: I) -> f64
where
    I: IntoIterator<Item = &'a GateParams>,
{
    gates.into_iter().map(prob_open).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, RngStream};

    #[test]
    fn sample_symmetry_at_center() {
        // u = 0.5, phi = 0: sigmoid(0) = 0.5, stretched 0.5 * 1.2 - 0.1 = 0.5.
        let p = GateParams::with_phi(0.0);
        let g = sample_gate(&p, 0.5).unwrap();
        assert!((g - 0.5).abs() < 1e-15, "g = {g}");
    }

    #[test]
    fn sample_saturates_low() {
        let p = GateParams::with_phi(-20.0);
        assert_eq!(sample_gate(&p, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn sample_clamps_high() {
        // u = 0.9, phi = 0: s = sigmoid(ln 9 / 0.33) ~ 0.9987, stretched > 1.
        let p = GateParams::with_phi(0.0);
        assert_eq!(sample_gate(&p, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn sample_rejects_endpoint_noise() {
        let p = GateParams::default();
        assert!(sample_gate(&p, 0.0).is_err());
        assert!(sample_gate(&p, 1.0).is_err());
    }

    #[test]
    fn prob_open_reference_value() {
        // sigmoid(-0.33 * ln(1/11)) = sigmoid(0.33 * ln 11) = 0.68815...
        let p = GateParams::with_phi(0.0);
        let q = prob_open(&p);
        assert!((q - 0.688).abs() < 5e-4, "prob_open {q}");
    }

    #[test]
    fn prob_open_saturation() {
        assert!(prob_open(&GateParams::with_phi(20.0)) > 1.0 - 1e-6);
        assert!(prob_open(&GateParams::with_phi(-20.0)) < 1e-6);
    }

    #[test]
    fn prob_open_matches_monte_carlo() {
        // Agreement within 3 binomial standard deviations at several phi.
        let n = 100_000;
        let mut rng = RngStream::new(1234);
        for &phi in &[-3.0, -1.0, 0.0, 1.0, 3.0] {
            let p = GateParams::with_phi(phi);
            let mut nonzero = 0usize;
            for _ in 0..n {
                if sample_gate(&p, rng.uniform()).unwrap() > 0.0 {
                    nonzero += 1;
                }
            }
            let q = prob_open(&p);
            let sd = (q * (1.0 - q) / n as f64).sqrt();
            let observed = nonzero as f64 / n as f64;
            assert!(
                (observed - q).abs() <= 3.0 * sd,
                "phi={phi}: observed {observed}, closed-form {q}, sd {sd}"
            );
        }
    }

    #[test]
    fn support_has_both_endpoint_masses() {
        let p = GateParams::with_phi(0.0);
        let mut rng = RngStream::new(9);
        let (mut zeros, mut ones) = (0usize, 0usize);
        for _ in 0..100_000 {
            let g = sample_gate(&p, rng.uniform()).unwrap();
            assert!((0.0..=1.0).contains(&g));
            if g == 0.0 {
                zeros += 1;
            }
            if g == 1.0 {
                ones += 1;
            }
        }
        assert!(zeros > 0 && ones > 0, "zeros {zeros}, ones {ones}");
    }

    #[test]
    fn expected_gate_values() {
        assert!((expected_gate(&GateParams::with_phi(0.0)) - 0.5).abs() < 1e-15);
        assert_eq!(expected_gate(&GateParams::with_phi(-20.0)), 0.0);
        assert_eq!(expected_gate(&GateParams::with_phi(20.0)), 1.0);
    }

    #[test]
    fn monotone_in_phi() {
        let phis = [-5.0, -2.0, -0.5, 0.0, 0.5, 2.0, 5.0];
        for w in phis.windows(2) {
            let (a, b) = (GateParams::with_phi(w[0]), GateParams::with_phi(w[1]));
            assert!(prob_open(&a) < prob_open(&b));
            assert!(expected_gate(&a) <= expected_gate(&b));
        }
    }

    #[test]
    fn penalty_empty_and_pair() {
        assert_eq!(l0_penalty([].iter()), 0.0);
        let pair = [GateParams::with_phi(0.0), GateParams::with_phi(0.0)];
        let v = l0_penalty(pair.iter());
        assert!((v - 1.376).abs() < 1e-3, "pair penalty {v}");
    }

    #[test]
    fn penalty_additive_over_disjoint_sets() {
        let a = [GateParams::with_phi(-1.0), GateParams::with_phi(2.0)];
        let b = [GateParams::with_phi(0.3)];
        let joint: Vec<_> = a.iter().chain(b.iter()).collect();
        let lhs = l0_penalty(joint.into_iter());
        let rhs = l0_penalty(a.iter()) + l0_penalty(b.iter());
        assert!((lhs - rhs).abs() < 1e-15);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        for &phi in &[-5.0, -1.0, 0.0, 1.0, 5.0] {
            let p = GateParams::with_phi(phi);
            let analytic = [prob_open_grad(&p)];
            let report = grad_check(
                |x| prob_open(&GateParams::with_phi(x[0])),
                &[phi],
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "phi={phi}: rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn pathwise_gradient_matches_finite_differences() {
        // Probe points chosen away from clamp kinks (interior samples only).
        let mut rng = RngStream::new(77);
        let mut checked = 0;
        while checked < 50 {
            let u = rng.uniform();
            let phi = rng.normal();
            let p = GateParams::with_phi(phi);
            let (g, dg) = sample_gate_with_grad(&p, u).unwrap();
            // Skip saturated draws and near-kink points: the clamped sampler
            // is non-differentiable there.
            if g <= 1e-3 || g >= 1.0 - 1e-3 {
                continue;
            }
            let report = grad_check(
                |x| sample_gate(&GateParams::with_phi(x[0]), u).unwrap(),
                &[phi],
                &[dg],
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "u={u} phi={phi}: rel err {}",
                report.max_rel_err
            );
            checked += 1;
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(GateParams::new(f64::NAN, 0.33, -0.1, 1.1).is_err());
        assert!(GateParams::new(0.0, 0.0, -0.1, 1.1).is_err());
        assert!(GateParams::new(0.0, 0.33, 0.1, 1.1).is_err());
        assert!(GateParams::new(0.0, 0.33, -0.1, 0.9).is_err());
    }
}
