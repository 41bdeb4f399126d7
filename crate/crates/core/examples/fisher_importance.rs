//! Trains a small model on one task group, estimates the diagonal Fisher of
//! the shared weights and reports how many of them count as important.

use clwf::ewc::important_fraction;
use clwf::{generate_suite, train_initial, Corpus, FisherEstimator, ModelConfig, SuiteConfig, TrainPlan};

fn main() -> clwf::Result<()> {
    let suite = generate_suite(&SuiteConfig { groups: vec![2, 1], n_train: 600, n_dev: 100, n_test: 100, ..Default::default() }, 3)?;
    let corpus = Corpus::generate(suite)?;
    let model = ModelConfig { d_model: 32, ..Default::default() };
    let plan = TrainPlan { initial_steps: 600, warmup_steps: 60, checkpoint_every: 100, fisher_samples_per_task: 200, ..Default::default() };
    let state = train_initial(&corpus, &corpus.suite.group_ids(0), &model, &plan)?;

    for estimator in [FisherEstimator::Variance, FisherEstimator::MeanSquare] {
        let f = state.estimate_fisher(&corpus, &corpus.suite.group_ids(0), &TrainPlan { fisher_estimator: estimator, ..plan.clone() })?;
        println!("{} estimator: {} params, max {:.4e}", estimator.as_str(), f.len(), f.max());
        for tau in [0.01, 0.1, 0.25, 0.5] {
            println!(
                "  tau {tau:<5} normalized {:6.2}%  raw {:6.2}%",
                100.0 * important_fraction(&f, tau, true)?,
                100.0 * important_fraction(&f, tau, false)?
            );
        }
    }
    Ok(())
}
