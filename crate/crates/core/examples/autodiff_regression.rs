//! Least-squares fit of a linear map with the tape and Adam.

use gnnfp::autodiff::{Adam, Tape, Tensor};

fn main() {
    let x = Tensor::from_fn(64, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
    let truth = Tensor::from_fn(3, 1, |r, _| [1.5, -2.0, 0.5][r]);
    let y = Tensor::from_fn(64, 1, |r, _| {
        (0..3).map(|c| x.get(r, c) * truth.get(c, 0)).sum()
    });

    let mut w = Tensor::zeros(3, 1);
    let mut adam = Adam::new(0.05);
    for step in 0..400 {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred = tape.matmul(xv, wv).unwrap();
        let neg = tape.scale(yv, -1.0);
        let err = tape.add(pred, neg).unwrap();
        let sq = tape.square(err);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(wv).unwrap().clone();
        adam.step(&mut [&mut w], &[&g]).unwrap();
        if step % 100 == 0 {
            println!("step {step:3} loss {:.3e}", tape.value(loss).item());
        }
    }
    println!("fitted {:?}, true {:?}", w.as_slice(), truth.as_slice());
}
