//! Binary probability losses shared by the teacher and student objectives.
//!
//! Every model output here is a two-logit pair, so each loss depends only on
//! the logit difference `u = z1 - z0`. Gradients are returned with respect to
//! `u`; [`logit_grad`] spreads them back onto the pair.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub(crate) fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// `x ln y` with `0 ln 0 = 0`.
pub(crate) fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Cross entropy of prediction `q` against target probability `p`:
/// `-p ln q - (1 - p) ln(1 - q)`, with `q` clamped.
pub fn binary_cross_entropy(p: f64, q: f64) -> Result<f64> {
    check_prob("target", p)?;
    check_prob("prediction", q)?;
    let q = clamp_prob(q);
    Ok(-p * q.ln() - (1.0 - p) * (1.0 - q).ln())
}

/// Positive-class probability of `softmax(logits / tau)`.
pub fn positive_prob(logits: [f64; 2], tau: f64) -> f64 {
    crate::model::sigmoid((logits[1] - logits[0]) / tau)
}

/// Gradient w.r.t. `(z0, z1)` from a gradient w.r.t. `u = z1 - z0`.
pub fn logit_grad(du: f64) -> [f64; 2] {
    [-du, du]
}

/// d/du of `BCE(p, q)` or `KL(p || q)` where `q = sigm(u / tau)`.
///
/// Both share the same derivative `(q - p) / tau`. The clamp on `q` is
/// ignored here so saturated predictions still receive a learning signal.
pub fn cross_entropy_grad(target: f64, q: f64, tau: f64) -> f64 {
    (q - target) / tau
}

/// d/du of the Bernoulli entropy of `p = sigm(u)`; equals `-u p (1 - p)`.
pub fn entropy_grad(u: f64, p: f64) -> f64 {
    -u * p * (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_of_matched_uniform_is_ln2() {
        let v = binary_cross_entropy(0.5, 0.5).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_clamps_saturated_predictions() {
        let v = binary_cross_entropy(1.0, 0.0).unwrap();
        assert!((v - (-(PROB_CLAMP).ln())).abs() < 1e-9);
        assert!(binary_cross_entropy(1.2, 0.5).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let bce_of_u = |t: f64, u: f64, tau: f64| binary_cross_entropy(t, crate::model::sigmoid(u / tau)).unwrap();
        let ent_of_u = |u: f64| {
            let p = crate::model::sigmoid(u);
            -xlogy(p, p) - xlogy(1.0 - p, 1.0 - p)
        };
        let h = 1e-6;
        for &u in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            for &(t, tau) in &[(0.0, 1.0), (1.0, 2.0), (0.3, 0.5)] {
                let fd = (bce_of_u(t, u + h, tau) - bce_of_u(t, u - h, tau)) / (2.0 * h);
                let an = cross_entropy_grad(t, crate::model::sigmoid(u / tau), tau);
                assert!((fd - an).abs() < 1e-7, "u={u} t={t}: {fd} vs {an}");
            }
            let fd = (ent_of_u(u + h) - ent_of_u(u - h)) / (2.0 * h);
            let an = entropy_grad(u, crate::model::sigmoid(u));
            assert!((fd - an).abs() < 1e-7);
        }
    }
}
