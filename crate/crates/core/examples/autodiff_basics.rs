//! Reverse-mode gradients on the tape, checked against central differences,
//! and the semi-tensor product on a hand-sized input.
//!
//! cargo run --example autodiff_basics

use compact_rec::tensor::{Tape, Tensor};

fn loss_of(x: &Tensor, w: &Tensor) -> compact_rec::Result<f64> {
    let mut tape = Tape::new();
    let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let h = tape.matmul(x, w)?;
    let h = tape.tanh(h);
    let l = tape.cross_entropy(h, &[1, 0])?;
    Ok(tape.value(l).item())
}

fn main() -> compact_rec::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.0, 0.4, -0.7]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.1], vec![0.7, 0.3], vec![-0.5, 0.9]])?;

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone());
    let h = tape.matmul(xv, wv)?;
    let h = tape.tanh(h);
    let loss = tape.cross_entropy(h, &[1, 0])?;
    println!("loss = {:.6}", tape.value(loss).item());
    let grads = tape.backward(loss)?;
    let analytic = grads.tensor(wv);

    let eps = 1e-6;
    println!("{:>6} {:>14} {:>14}", "w[i]", "tape", "central diff");
    for i in 0..w.numel() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += eps;
        down.data_mut()[i] -= eps;
        let numeric = (loss_of(&x, &up)? - loss_of(&x, &down)?) / (2.0 * eps);
        println!("{i:>6} {:>14.9} {:>14.9}", analytic.data()[i], numeric);
    }

    // [1, 2, 3, 4] ⋉ [5, 6] with blocks of n = 2
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0])?);
    let b = tape.constant(Tensor::new(vec![1, 2, 1], vec![5.0, 6.0])?);
    let c = tape.stp(a, b, 2)?;
    println!("[1, 2, 3, 4] stp [5, 6] = {:?}", tape.value(c).data());
    Ok(())
}
