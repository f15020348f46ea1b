//! Builds a small graph on the tape, runs backward and checks it against
//! central differences.

use ndarray::array;
use priorlab::autodiff::{grad_check, Graph};

fn main() -> priorlab::Result<()> {
    let mut g = Graph::new();
    let x = g.input(array![[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]]);
    let w = g.param(array![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]]);
    let h = g.matmul(x, w)?;
    let a = g.gelu(h)?;
    let target = g.input(array![[0.0, 1.0], [1.0, 0.0]]);
    let loss = g.mse(a, target)?;
    g.forward()?;
    g.backward(loss)?;
    println!("loss {:.6}, dL/dW =\n{:.6}", g.scalar(loss), g.grad(w).expect("parameter gradient"));
    println!("max relative discrepancy vs finite differences: {:.2e}", grad_check(&mut g, loss, w, 1e-5)?);
    Ok(())
}
