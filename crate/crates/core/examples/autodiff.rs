//! Reverse-mode differentiation on the tape, checked against finite
//! differences.

use acebert::tensor::{finite_difference_check, Tape, Tensor};

fn main() -> acebert::Result<()> {
    let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::new([3, 2], vec![0.2, -0.4, 1.0, 0.5, -0.3, 0.8])?;

    // loss = mean(gelu(x w))
    let mut tape: Tape<'static, f64> = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let h = tape.matmul(xv, wv)?;
    let h = tape.gelu(h)?;
    let loss = tape.mean(h)?;
    tape.backward(loss)?;
    println!("loss   {:.6}", tape.scalar(loss));
    println!("dL/dx  {:?}", tape.grad(xv).unwrap());
    println!("dL/dw  {:?}", tape.grad(wv).unwrap());

    let err = finite_difference_check(
        |t, x| {
            let w = t.constant(w.clone());
            let h = t.matmul(x, w)?;
            let h = t.gelu(h)?;
            t.mean(h)
        },
        &x,
        1e-3,
    )?;
    println!("max relative error against finite differences: {err:.2e}");

    // A value used twice accumulates both contributions.
    let mut tape: Tape<'static, f64> = Tape::new();
    let a = tape.leaf(Tensor::scalar(3.0));
    let sq = tape.mul(a, a)?;
    tape.backward(sq)?;
    println!("d(a*a)/da at 3 = {}", tape.grad(a).unwrap()[0]);
    Ok(())
}
