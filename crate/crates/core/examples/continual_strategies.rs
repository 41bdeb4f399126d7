//! Compares the five continual-learning strategies and a joint baseline on a
//! small suite: one initial group followed by two continual iterations.
//!
//! Pass a seed as the first argument to change the suite and training run.

use clwf::bench::{run_seed, summarize, BenchConfig};
use clwf::{ModelConfig, Split, SuiteConfig, TrainPlan};

fn main() -> clwf::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = BenchConfig {
        suite: SuiteConfig { groups: vec![2, 1, 1], n_train: 800, n_dev: 200, n_test: 400, ..Default::default() },
        model: ModelConfig { d_model: 32, ..Default::default() },
        plan: TrainPlan {
            initial_steps: 1500,
            steps_per_iteration: 400,
            warmup_steps: 100,
            checkpoint_every: 100,
            average_last_n: 4,
            fisher_samples_per_task: 200,
            ..Default::default()
        },
        ..Default::default()
    };
    let outcome = run_seed(&cfg, seed)?;
    print!("{}", outcome.report.render(Split::Test));
    let summary = summarize(std::slice::from_ref(&outcome), Split::Test)?;
    for s in &summary.strategies {
        println!("{:<12} group-0 degradation {:+6.1}%  last-group error {:5.1}%", s.strategy, 100.0 * s.mean_old_group_degradation, 100.0 * s.mean_new_group_error);
    }
    if let Some(j) = summary.mean_joint_new_group_error {
        println!("{:<12} last-group error {:5.1}%", "joint", 100.0 * j);
    }
    Ok(())
}
