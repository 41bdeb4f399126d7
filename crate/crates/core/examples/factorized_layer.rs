//! A factorized linear layer serving two tasks from one shared matrix.

use clwf::{param_overhead, seed, FactorizedLinear, Tensor};

fn main() -> clwf::Result<()> {
    let mut rng = seed::rng(11, &[]);
    let mut layer = FactorizedLinear::new("proj", 6, 4, 2, true, &mut rng)?;
    layer.add_task("en", 0.5, &mut rng)?;
    layer.add_task("de", 0.5, &mut rng)?;

    let x = Tensor::matrix(1, 6, vec![1.0, 0.0, -1.0, 0.5, 0.25, 2.0])?;
    for task in ["en", "de"] {
        let y = layer.apply(&x, task)?;
        // The same output through the materialized dense weight.
        let w = layer.effective_weight(task)?;
        let dense: Vec<f64> = (0..4)
            .map(|o| (0..6).map(|i| w.data()[o * 6 + i] * x.data()[i]).sum::<f64>() + layer.shared_bias().unwrap().data()[o])
            .collect();
        println!("{task}: factorized {:?}", y.data().iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>());
        println!("{task}: dense      {:?}", dense.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>());
    }

    let o = param_overhead(8, 1024, 1024)?;
    println!("k=8 on a 1024x1024 matrix adds {} params per task ({:.3}% of dense)", o.added_per_task, 100.0 * o.fraction_of_dense);
    Ok(())
}
