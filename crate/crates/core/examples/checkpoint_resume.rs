//! Interrupts a continual iteration, saves and reloads it, and compares the
//! resumed run with an uninterrupted one. Tensors are stored as f32, so the
//! two agree closely but not bitwise; two identical uninterrupted runs hash
//! the same.

use clwf::trainer::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use clwf::{generate_suite, train_initial, Corpus, ModelConfig, ParamMap, Parameterized, Phase, Strategy, SuiteConfig, TrainPlan, TrainState};

fn max_diff(a: &TrainState, b: &TrainState) -> f64 {
    let (pa, pb): (ParamMap, ParamMap) = (a.model.snapshot(), b.model.snapshot());
    pa.iter()
        .flat_map(|(n, t)| t.data().iter().zip(pb[n].data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn main() -> clwf::Result<()> {
    let corpus = Corpus::generate(generate_suite(&SuiteConfig { groups: vec![2, 1], n_train: 300, n_dev: 60, n_test: 60, ..Default::default() }, 5)?)?;
    let model = ModelConfig { d_model: 16, ..Default::default() };
    let plan = TrainPlan { initial_steps: 200, steps_per_iteration: 120, warmup_steps: 20, checkpoint_every: 40, fisher_samples_per_task: 50, seed: 5, ..Default::default() };
    let initial = train_initial(&corpus, &corpus.suite.group_ids(0), &model, &plan)?;
    let new = corpus.suite.group_ids(1);

    let mut straight = initial.clone();
    straight.begin_iteration(Phase::Continual(Strategy::WfEwc), &new, plan.steps_per_iteration, &plan)?;
    for _ in 0..50 {
        straight.step(&corpus, &plan)?;
    }
    let root = std::env::temp_dir().join("clwf-checkpoint-example");
    save_checkpoint(&straight, &plan, &root.join("mid"))?;
    let (mut resumed, plan2) = load_checkpoint(&root.join("mid"))?;
    println!("after reload:        max |diff| {:.3e}", max_diff(&straight, &resumed));

    straight.step(&corpus, &plan)?;
    resumed.step(&corpus, &plan2)?;
    println!("after one more step: max |diff| {:.3e}", max_diff(&straight, &resumed));

    straight.run_to_end(&corpus, &plan)?;
    straight.finish_iteration(&corpus, &plan)?;
    resumed.run_to_end(&corpus, &plan2)?;
    resumed.finish_iteration(&corpus, &plan2)?;
    println!("end of iteration:    max |diff| {:.3e}", max_diff(&straight, &resumed));

    let mut again = initial.clone();
    clwf::continual_step(&mut again, &corpus, &new, Strategy::WfEwc, &plan)?;
    save_checkpoint(&straight, &plan, &root.join("a"))?;
    save_checkpoint(&again, &plan, &root.join("b"))?;
    println!("uninterrupted run   {}", checkpoint_hash(&root.join("a"))?);
    println!("repeated run        {}", checkpoint_hash(&root.join("b"))?);
    Ok(())
}
