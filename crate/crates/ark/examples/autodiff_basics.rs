//! Tour of the tape-based reverse-mode autodiff core: record a computation,
//! run one backward pass, and verify gradients against finite differences.

use ark::tensor::{grad_check, Tape, Tensor};

fn main() {
    // A tiny two-layer computation: loss = mean((relu(x W1) W2 - y)^2).
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7])
        .unwrap()
        .with_grad();
    let w1 = Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())
        .unwrap()
        .with_grad();
    let w2 = Tensor::new(vec![4, 1], vec![0.3, -0.2, 0.5, 0.1])
        .unwrap()
        .with_grad();
    let y = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();

    let mut tape = Tape::new();
    let (xl, w1l, w2l) = (tape.leaf(&x), tape.leaf(&w1), tape.leaf(&w2));
    let h = tape.matmul(&xl, &w1l).unwrap();
    let h = tape.relu(&h);
    let pred = tape.matmul(&h, &w2l).unwrap();
    let yl = tape.leaf(&y);
    let loss = tape.mse(&pred, &yl).unwrap();
    println!("forward: loss = {:.6}", loss.values[0]);

    tape.backward(&loss).unwrap();
    println!("dL/dW2      = {:?}", tape.grad(&w2l).unwrap());
    println!("dL/dx row 0 = {:?}", &tape.grad(&xl).unwrap()[..3]);

    // A second backward pass on the same tape is rejected: gradients are
    // consumed by design, so accidental accumulation cannot happen silently.
    let again = tape.backward(&loss);
    println!("second backward -> {}", again.unwrap_err());

    // Check every composed gradient against central finite differences.
    for (name, input) in [("x", &x), ("w1", &w1)] {
        let report = grad_check(
            |t, leaf| {
                let w1l = t.leaf(&w1.detached());
                let w2l = t.leaf(&w2.detached());
                let (a, b) = if name == "x" {
                    (leaf.clone(), w1l)
                } else {
                    (t.leaf(&x.detached()), leaf.clone())
                };
                let h = t.matmul(&a, &b)?;
                let h = t.relu(&h);
                let pred = t.matmul(&h, &w2l)?;
                let yl = t.leaf(&y);
                t.mse(&pred, &yl)
            },
            input,
            1e-5,
            1e-4,
        )
        .unwrap();
        println!(
            "grad check vs finite differences ({name}): max rel err {:.3e} -> {}",
            report.max_rel_err,
            if report.pass { "pass" } else { "FAIL" }
        );
    }
}
