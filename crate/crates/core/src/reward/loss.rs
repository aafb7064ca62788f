use crate::tape::{Tape, Var};

use super::RewardError;

/// `−ln σ(r_a − r_b)` for chosen `a`, as `softplus(r_b − r_a)`.
pub fn btl_loss(tape: &mut Tape, r_a: Var, r_b: Var) -> Result<Var, RewardError> {
    let gap = tape.sub(r_b, r_a)?;
    Ok(tape.softplus(gap)?)
}

/// Plain-number form of [`btl_loss`].
pub fn btl_loss_value(r_a: f64, r_b: f64) -> f64 {
    let x = r_b - r_a;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `σ(r_a − r_b)`: probability that `a` is preferred.
pub fn btl_prob(r_a: f64, r_b: f64) -> f64 {
    let x = r_a - r_b;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian rewards `(mean, variance)`; `a` preferred with probability
/// `Φ((μ_a − μ_b) / √(σ²_a + σ²_b))`. The loss is `−ln` of that.
pub fn dpl_loss(tape: &mut Tape, a: (Var, Var), b: (Var, Var)) -> Result<Var, RewardError> {
    for v in [a.1, b.1] {
        let x = tape.value(v).item();
        if x <= 0.0 || x.is_nan() {
            return Err(RewardError::Variance(x as f64));
        }
    }
    let gap = tape.sub(a.0, b.0)?;
    let var = tape.add(a.1, b.1)?;
    let log_var = tape.log(var)?;
    let half = tape.scale(log_var, -0.5)?;
    let inv_std = tape.exp(half)?;
    let z = tape.mul(gap, inv_std)?;
    let log_p = tape.log_normal_cdf(z)?;
    Ok(tape.scale(log_p, -1.0)?)
}

/// Plain-number form of [`dpl_loss`].
pub fn dpl_loss_value(a: (f64, f64), b: (f64, f64)) -> Result<f64, RewardError> {
    for v in [a.1, b.1] {
        if v <= 0.0 || v.is_nan() {
            return Err(RewardError::Variance(v));
        }
    }
    Ok(-crate::tape::log_ndtr((a.0 - b.0) / (a.1 + b.1).sqrt()))
}
