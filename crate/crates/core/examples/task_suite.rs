//! Generates a seeded task suite, writes it to disk, reads it back and reports
//! the noise floor and the Bayes-oracle error of every task.

use clwf::{generate_suite, Corpus, Split, SuiteConfig};

fn main() -> clwf::Result<()> {
    let cfg = SuiteConfig { groups: vec![2, 1, 1], n_train: 400, n_dev: 100, n_test: 200, ..Default::default() };
    let suite = generate_suite(&cfg, 7)?;
    let dir = std::env::temp_dir().join("clwf-task-suite-example");
    suite.write_dir(&dir)?;
    let corpus = Corpus::load_dir(&dir)?;
    println!("{} tasks in {} groups under {}", corpus.suite.tasks.len(), corpus.suite.n_groups(), dir.display());
    for spec in &corpus.suite.tasks {
        let test = corpus.get(&spec.task_id, Split::Test)?;
        let mut wrong = 0;
        for s in &test.samples {
            if corpus.suite.oracle_predict(&spec.task_id, s)? != s.y as usize {
                wrong += 1;
            }
        }
        println!(
            "{} group {} label noise {:.2} oracle error {:.3} on {} samples",
            spec.task_id,
            spec.group,
            spec.noise_rho,
            wrong as f64 / test.len() as f64,
            test.len()
        );
    }
    Ok(())
}
