//! Joint two-objective descent weights.
//!
//! The trainer keeps exponential moving averages of the adversarial and
//! interval-bound gradients (first moments, vector-valued) and of their l2
//! norms (second moments, scalar). The averages are always one step behind:
//! step t's weights are computed before step t's gradients enter the state,
//! so the weights are independent of the randomness in the current batch.
//!
//! Per-step weights fall into three cases on the bias-corrected moments:
//! agreeing gradients (positive dot product) are blended through their
//! normalized bisector; conflicting gradients keep the prioritized objective
//! whole and project the other onto its orthogonal complement. Which
//! objective gets priority is decided by the FOSC value of the current
//! adversarial batch against the threshold c_t: a well-solved inner problem
//! (small FOSC) favors the adversarial objective, otherwise the certified
//! one, plus a squared-loss regularizer.

use serde::{Deserialize, Serialize};

use crate::error::{CertError, Result};
use crate::tensor::{dot, l2_norm};

/// Moment estimates. `m1_hat`/`v1_hat` track the adversarial gradient,
/// `m2_hat`/`v2_hat` the interval-bound gradient; all are stored uncorrected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m1_hat: Vec<f64>,
    pub m2_hat: Vec<f64>,
    pub v1_hat: f64,
    pub v2_hat: f64,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl MomentState {
    pub fn new(dim: usize, beta1: f64, beta2: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CertError::InvalidArgument(format!(
                    "{name} must lie in [0,1), got {b}"
                )));
            }
        }
        Ok(MomentState {
            m1_hat: vec![0.0; dim],
            m2_hat: vec![0.0; dim],
            v1_hat: 0.0,
            v2_hat: 0.0,
            t: 0,
            beta1,
            beta2,
        })
    }

    /// Folds in the gradients of the PREVIOUS step. Calling this with the
    /// current step's gradients before computing weights would break the
    /// independence property.
    pub fn update_moments(&mut self, g_adv_prev: &[f64], g_ibp_prev: &[f64]) -> Result<()> {
        if g_adv_prev.len() != self.m1_hat.len() || g_ibp_prev.len() != self.m2_hat.len() {
            return Err(CertError::ShapeMismatch {
                context: "update_moments",
                expected: vec![self.m1_hat.len()],
                got: vec![g_adv_prev.len(), g_ibp_prev.len()],
            });
        }
        let b1 = self.beta1;
        for (m, g) in self.m1_hat.iter_mut().zip(g_adv_prev) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        for (m, g) in self.m2_hat.iter_mut().zip(g_ibp_prev) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        let b2 = self.beta2;
        self.v1_hat = b2 * self.v1_hat + (1.0 - b2) * l2_norm(g_adv_prev);
        self.v2_hat = b2 * self.v2_hat + (1.0 - b2) * l2_norm(g_ibp_prev);
        self.t += 1;
        Ok(())
    }

    /// Divides out the initialization bias: m / (1 - beta1^t), v / (1 - beta2^t).
    pub fn bias_correct(&self) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
        if self.t == 0 {
            return Err(CertError::MomentsUndefined);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        Ok((
            self.m1_hat.iter().map(|m| m / bc1).collect(),
            self.m2_hat.iter().map(|m| m / bc1).collect(),
            self.v1_hat / bc2,
            self.v2_hat / bc2,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightTriple {
    pub kappa_adv: f64,
    pub kappa_ibp: f64,
    pub kappa_reg: f64,
}

const PURE_ADVERSARIAL: WeightTriple = WeightTriple {
    kappa_adv: 1.0,
    kappa_ibp: 0.0,
    kappa_reg: 0.0,
};

/// Fixed-weight reference mode: both objectives at weight 1, no regularizer,
/// independent of any moment state.
pub fn baseline_weights() -> WeightTriple {
    WeightTriple {
        kappa_adv: 1.0,
        kappa_ibp: 1.0,
        kappa_reg: 0.0,
    }
}

/// Per-step weights from the (strictly past) moment estimates and the
/// current FOSC value against its threshold.
pub fn compute_weights(state: &MomentState, fosc_value: f64, c_t: f64) -> WeightTriple {
    if state.t == 0 {
        // Cold start: no history yet, descend the adversarial objective.
        return PURE_ADVERSARIAL;
    }
    let (m1, m2, v1, v2) = state
        .bias_correct()
        .expect("bias_correct is defined for t >= 1");
    if v1 < 1e-12 || v2 < 1e-12 {
        log::warn!(
            "degenerate gradient moments (v1 = {v1:.3e}, v2 = {v2:.3e}); falling back to pure adversarial weights"
        );
        return PURE_ADVERSARIAL;
    }
    let cross = dot(&m1, &m2);
    if cross > 0.0 {
        // Agreement: step along the (moment-normalized) bisector.
        let u: Vec<f64> = m1
            .iter()
            .zip(&m2)
            .map(|(a, b)| a / v1 + b / v2)
            .collect();
        let uu = dot(&u, &u);
        if uu < 1e-24 {
            log::warn!("degenerate bisector direction; falling back to pure adversarial weights");
            return PURE_ADVERSARIAL;
        }
        let sum: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| a + b).collect();
        let gamma = 0.5 * dot(&sum, &u) / uu;
        WeightTriple {
            kappa_adv: gamma / v1,
            kappa_ibp: gamma / v2,
            kappa_reg: 0.0,
        }
    } else if fosc_value <= c_t {
        // Inner problem well solved: keep the adversarial gradient whole,
        // project the certified one onto its orthogonal complement.
        WeightTriple {
            kappa_adv: 1.0,
            kappa_ibp: -cross / (v2 * v2),
            kappa_reg: 0.0,
        }
    } else {
        // Under-solved inner problem: prioritize the certified objective
        // and add the squared-loss regularizer.
        WeightTriple {
            kappa_adv: -cross / (v1 * v1),
            kappa_ibp: 1.0,
            kappa_reg: 0.5,
        }
    }
}

/// g_final = kappa_adv*g_adv + kappa_ibp*g_ibp + kappa_reg * 2*loss_ibp*g_ibp.
/// The last term is the gradient of kappa_reg * loss_ibp^2.
pub fn combine_gradients(
    w: &WeightTriple,
    g_adv: &[f64],
    g_ibp: &[f64],
    loss_ibp: f64,
) -> Result<Vec<f64>> {
    if g_adv.len() != g_ibp.len() {
        return Err(CertError::ShapeMismatch {
            context: "combine_gradients",
            expected: vec![g_adv.len()],
            got: vec![g_ibp.len()],
        });
    }
    let ibp_factor = w.kappa_ibp + 2.0 * w.kappa_reg * loss_ibp;
    Ok(g_adv
        .iter()
        .zip(g_ibp)
        .map(|(a, b)| w.kappa_adv * a + ibp_factor * b)
        .collect())
}
