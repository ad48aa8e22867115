//! Cross-entropy, focal loss and their convex blend, all recorded on a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the focal term: `(1 - lambda) * CE + lambda * FL`.
    pub lambda: f64,
    /// Focal scaling factor (often written alpha in focal-loss literature).
    pub beta: f64,
    /// Focusing exponent.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("loss.lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("loss.beta {} must be positive", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma {} must be nonnegative", self.gamma)));
        }
        Ok(())
    }
}

/// Clamped `log p_t` per row, plus `p_t` itself.
fn log_true_class(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<(Var, Var)> {
    let probs = tape.softmax(logits, 1)?;
    let p_true = tape.pick(probs, labels)?;
    let log_p = tape.log_clamped(p_true, PROB_FLOOR);
    Ok((p_true, log_p))
}

fn focal_from_parts(tape: &mut Tape, p_true: Var, log_p: Var, beta: f64, gamma: f64) -> Result<Var> {
    let miss = tape.affine(p_true, -1.0, 1.0);
    let weight = tape.pow(miss, gamma);
    let weighted = tape.mul(weight, log_p)?;
    let mean = tape.mean(weighted);
    Ok(tape.scale(mean, -beta))
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, log_p) = log_true_class(tape, logits, labels)?;
    let mean = tape.mean(log_p);
    Ok(tape.scale(mean, -1.0))
}

/// Batch mean of `-beta (1 - p_t)^gamma log p_t`.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[usize], beta: f64, gamma: f64) -> Result<Var> {
    let (p_true, log_p) = log_true_class(tape, logits, labels)?;
    focal_from_parts(tape, p_true, log_p, beta, gamma)
}

/// `(1 - lambda) * CE + lambda * FL`.
pub fn combined_loss(tape: &mut Tape, logits: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let (p_true, log_p) = log_true_class(tape, logits, labels)?;
    let ce_mean = tape.mean(log_p);
    let ce = tape.scale(ce_mean, -1.0);
    let fl = focal_from_parts(tape, p_true, log_p, cfg.beta, cfg.gamma)?;
    let a = tape.scale(ce, 1.0 - cfg.lambda);
    let b = tape.scale(fl, cfg.lambda);
    tape.add(a, b)
}
