use crate::error::{Error, Result};
use crate::pretrain::bce_loss;
use crate::tensor::{lit, Element, Tape, Var};

pub const UNIT_TOLERANCE: f64 = 1e-4;

fn check_unit<T: Element>(tape: &Tape<'_, T>, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    for r in 0..t.rows() {
        let n: f64 = t.row(r).iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Invalid(format!("{what} row {r} has norm {n}, expected unit length")));
        }
    }
    Ok(())
}

/// `gamma * q a^T` after checking both sides are unit rows of equal count.
fn scaled_cosines<T: Element>(tape: &mut Tape<'_, T>, q: Var, a: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::config("finetune.gamma", "must be positive"));
    }
    let (qs, as_) = (tape.value(q).shape().to_vec(), tape.value(a).shape().to_vec());
    if qs != as_ || qs.len() != 2 {
        return Err(Error::Shape {
            op: "batch_probabilities",
            lhs: qs,
            rhs: as_,
        });
    }
    check_unit(tape, q, "query embedding")?;
    check_unit(tape, a, "product embedding")?;
    let at = tape.transpose(a)?;
    let s = tape.matmul(q, at)?;
    tape.scale(s, lit(gamma))
}

/// Row-stochastic `W x W` matrix of in-batch candidate probabilities:
/// row `i` is the softmax over products `j` of `gamma * cos(q_i, a_j)`.
pub fn batch_probabilities<T: Element>(tape: &mut Tape<'_, T>, q: Var, a: Var, gamma: f64) -> Result<Var> {
    let s = scaled_cosines(tape, q, a, gamma)?;
    tape.softmax(s)
}

/// Bidirectional in-batch log loss: queries choose among the batch's
/// products and products among the batch's queries, pair `i` positive in both.
pub fn semantic_matching_loss<T: Element>(tape: &mut Tape<'_, T>, q: Var, a: Var, gamma: f64) -> Result<Var> {
    let s = scaled_cosines(tape, q, a, gamma)?;
    let w = tape.value(s).rows();
    let diag: Vec<usize> = (0..w).collect();
    let fwd = tape.log_softmax(s)?;
    let fwd = tape.pick(fwd, &diag)?;
    let st = tape.transpose(s)?;
    let bwd = tape.log_softmax(st)?;
    let bwd = tape.pick(bwd, &diag)?;
    let both = tape.add(fwd, bwd)?;
    let total = tape.sum(both)?;
    tape.scale(total, lit(-1.0 / w as f64))
}

/// Domain classifier loss for discriminator outputs on queries (label 1) and
/// products (label 0): `-(1/W) sum [log D(q) + log(1 - D(a))]`.
pub fn adversarial_loss<T: Element>(tape: &mut Tape<'_, T>, d_query: Var, d_product: Var) -> Result<Var> {
    let nq = tape.value(d_query).len();
    let np = tape.value(d_product).len();
    if nq != np {
        return Err(Error::Shape {
            op: "adversarial_loss",
            lhs: vec![nq],
            rhs: vec![np],
        });
    }
    let lq = bce_loss(tape, d_query, &vec![1.0; nq])?;
    let la = bce_loss(tape, d_product, &vec![0.0; np])?;
    tape.add(lq, la)
}

/// Cross-entropy of discriminator outputs on both domains against the
/// uninformative target 1/2; minimal (`2 ln 2`) exactly when `D = 1/2`.
pub fn confusion_loss<T: Element>(tape: &mut Tape<'_, T>, d_query: Var, d_product: Var) -> Result<Var> {
    let nq = tape.value(d_query).len();
    let np = tape.value(d_product).len();
    let lq = bce_loss(tape, d_query, &vec![0.5; nq])?;
    let la = bce_loss(tape, d_product, &vec![0.5; np])?;
    tape.add(lq, la)
}
