use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tape, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;
pub const KL_CLAMP: f64 = 1e-8;

/// Mean over rows of `-log softmax(logits)[target]`; zero when there are no
/// rows.
pub fn mlm_loss<T: Element>(tape: &mut Tape<'_, T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "mlm_loss",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    if let Some(t) = targets.iter().find(|t| **t >= shape[1]) {
        return Err(Error::Index {
            what: "mlm target",
            index: *t as i64,
            size: shape[1],
        });
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, targets)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Mean over masked rows of `KL(softmax(raw) || softmax(predicted))`, with the
/// predicted probabilities clamped at 1e-8 before the log.
pub fn mpm_loss<T: Element>(tape: &mut Tape<'_, T>, predicted: Var, raw: &Tensor<T>) -> Result<Var> {
    let shape = tape.value(predicted).shape().to_vec();
    if shape != raw.shape() || shape.len() != 2 {
        return Err(Error::Shape {
            op: "mpm_loss",
            lhs: shape,
            rhs: raw.shape().to_vec(),
        });
    }
    let rows = shape[0];
    if rows == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut p = raw.clone();
    let mut entropy_term = T::zero();
    for r in 0..rows {
        let row = p.row_mut(r);
        crate::tensor::softmax_row(row, None);
        for v in row.iter() {
            if *v > T::zero() {
                entropy_term = entropy_term + *v * v.ln();
            }
        }
    }
    let q = tape.softmax(predicted)?;
    let q = tape.clamp(q, lit(KL_CLAMP), T::one())?;
    let log_q = tape.log(q)?;
    let p = tape.constant(p);
    let cross = tape.mul(p, log_q)?;
    let cross = tape.sum(cross)?;
    let kl = tape.neg(cross)?;
    let kl = tape.add_scalar(kl, entropy_term)?;
    tape.scale(kl, lit(1.0 / rows as f64))
}

/// Mean binary cross-entropy of probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Element>(tape: &mut Tape<'_, T>, probs: Var, labels: &[f32]) -> Result<Var> {
    let n = tape.value(probs).len();
    if n != labels.len() || n == 0 {
        return Err(Error::Shape {
            op: "bce_loss",
            lhs: tape.value(probs).shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let shape = tape.value(probs).shape().to_vec();
    let p = tape.clamp(probs, lit(PROB_CLAMP), lit(1.0 - PROB_CLAMP))?;
    let log_p = tape.log(p)?;
    let one_minus = tape.neg(p)?;
    let one_minus = tape.add_scalar(one_minus, T::one())?;
    let log_q = tape.log(one_minus)?;
    let y = Tensor::new(shape.clone(), labels.iter().map(|v| lit(*v as f64)).collect())?;
    let not_y = Tensor::new(shape, labels.iter().map(|v| lit(1.0 - *v as f64)).collect())?;
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);
    let a = tape.mul(log_p, y)?;
    let b = tape.mul(log_q, not_y)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.neg(m)
}

/// Text-image prediction loss for a single score.
pub fn tip_loss<T: Element>(tape: &mut Tape<'_, T>, score: Var, label: f32) -> Result<Var> {
    bce_loss(tape, score, &[label])
}
