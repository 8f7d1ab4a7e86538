use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lit, Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const REL_FLOOR: f64 = 1e-8;

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Five-point central difference of `g` at 0 with step `h`.
fn central_difference(g: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let p1 = g(h)?;
    let m1 = g(-h)?;
    let p2 = g(2.0 * h)?;
    let m2 = g(-2.0 * h)?;
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Compares the tape gradient of scalar `f` at `x` against central finite
/// differences with step `eps`, returning the maximum elementwise relative
/// error.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<'static, T>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite difference step must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.to_f64().unwrap()).collect(),
        None => vec![0.0; x.len()],
    };

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let l = f(&mut tape, v)?;
        Ok(tape.scalar(l).to_f64().unwrap())
    };
    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (j, a) in analytic.iter().enumerate() {
        let orig = probe.data()[j];
        let mut g = |delta: f64| {
            probe.data_mut()[j] = orig + lit::<T>(delta);
            let v = eval(&probe);
            probe.data_mut()[j] = orig;
            v
        };
        let numeric = central_difference(&mut g, eps)?;
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}

/// Result of checking one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Finite-difference check of every parameter in `ids` for the scalar loss
/// built by `f`. Tensors larger than `max_per_param` elements are checked on a
/// seeded sample that mixes arbitrary elements with ones whose analytic
/// gradient is nonzero.
pub fn check_param_gradients<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    f: F,
    eps: f64,
    max_per_param: usize,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    T: Element,
    F: for<'a> Fn(&mut Tape<'a, T>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        tape.param_grads()
    };
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::inference(s);
        let l = f(&mut tape)?;
        Ok(tape.scalar(l).to_f64().unwrap())
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = store.get(id).len();
        let zeros = vec![T::zero(); len];
        let analytic = grads.get(id).unwrap_or(&zeros).to_vec();
        let picks: Vec<usize> = if len <= max_per_param {
            (0..len).collect()
        } else {
            let half = max_per_param / 2;
            let mut v: Vec<usize> = sample(&mut rng, len, max_per_param - half).into_vec();
            let nonzero: Vec<usize> = (0..len).filter(|&i| analytic[i] != T::zero()).collect();
            let take = half.min(nonzero.len());
            v.extend(sample(&mut rng, nonzero.len(), take).into_iter().map(|i| nonzero[i]));
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut worst = 0.0f64;
        for &j in &picks {
            let orig = work.get(id).data()[j];
            let mut g = |delta: f64| {
                work.get_mut(id).data_mut()[j] = orig + lit::<T>(delta);
                let v = eval(&work);
                work.get_mut(id).data_mut()[j] = orig;
                v
            };
            let numeric = central_difference(&mut g, eps)?;
            worst = worst.max(relative_error(analytic[j].to_f64().unwrap(), numeric));
        }
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            checked: picks.len(),
            max_rel_err: worst,
        });
    }
    Ok(out)
}
