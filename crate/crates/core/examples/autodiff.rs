//! Reverse-mode gradients on a tiny graph, checked against central differences.

use clwf::tensor::finite_difference_grad;
use clwf::{Graph, Tensor};

fn main() -> clwf::Result<()> {
    let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 2.0, 0.1, -0.3])?;
    let x = Tensor::matrix(1, 2, vec![1.5, -0.5])?;

    let loss_of = |w: &Tensor| -> clwf::Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let wv = g.param("w", w.clone())?;
        let h = g.matmul(xv, wv)?;
        let t = g.tanh(h)?;
        let loss = g.sum(t)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item().unwrap(), grads.by_name("w").unwrap().clone()))
    };

    let (loss, analytic) = loss_of(&w)?;
    let numeric = finite_difference_grad(|ps| Ok(loss_of(&ps[0])?.0), std::slice::from_ref(&w), 1e-5)?;
    println!("loss = {loss:.6}");
    for (a, n) in analytic.data().iter().zip(numeric[0].data()) {
        println!("  analytic {a:+.8}  numeric {n:+.8}");
    }
    Ok(())
}
