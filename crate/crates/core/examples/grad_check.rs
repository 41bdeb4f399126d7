//! Finite-difference gradient checks of the factorized layer, the full model
//! (with and without attention) and the EWC penalty over several seeds.

use clwf::gradcheck::{attention_check, full_check};

fn main() -> clwf::Result<()> {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let r = full_check(seed)?;
        let a = attention_check(seed)?;
        println!(
            "seed {seed}: max relative error {:.3e} over {} coordinates (worst in {}); with attention {:.3e}",
            r.max_rel_error, r.coords, r.worst, a.max_rel_error
        );
        worst = worst.max(r.max_rel_error).max(a.max_rel_error);
    }
    println!("worst {worst:.3e}");
    Ok(())
}
