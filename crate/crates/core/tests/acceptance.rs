//! Acceptance criteria 1 to 10. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use clwf::bench::{run_seed, summarize, BenchConfig, SeedOutcome, JOINT};
use clwf::ewc::{ewc_penalty, estimate_fisher};
use clwf::gradcheck::full_check;
use clwf::metrics::OverheadContext;
use clwf::trainer::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use clwf::{
    continual_step, generate_suite, param_overhead, seed, train_initial, Activation, Batch, Corpus, Dataset,
    EvalReport, FactorizedLinear, FisherEstimator, ModelConfig, ParamMap, Parameterized, Phase, Split, Strategy,
    SuiteConfig, Tensor, ToyEncoderClassifier, TrainPlan, TrainState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn randn<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

fn small_corpus(seed_value: u64) -> Corpus {
    let cfg = SuiteConfig { groups: vec![2, 1], n_train: 300, n_dev: 60, n_test: 100, ..Default::default() };
    Corpus::generate(generate_suite(&cfg, seed_value).unwrap()).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig { d_model: 16, ..Default::default() }
}

fn small_plan(seed_value: u64) -> TrainPlan {
    TrainPlan {
        initial_steps: 200,
        steps_per_iteration: 120,
        warmup_steps: 20,
        checkpoint_every: 40,
        average_last_n: 3,
        fisher_samples_per_task: 50,
        seed: seed_value,
        ..Default::default()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn max_abs_diff(a: &ParamMap, b: &ParamMap) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .flat_map(|(n, t)| t.data().iter().zip(b[n].data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

// 1. Analytic gradients against central differences on 100 seeded instances
// of the layer, the attention-free model (d_model 16, 2 blocks, k 2) and the
// EWC penalty.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut coords = 0;
    for s in 0..100 {
        let r = full_check(s).unwrap();
        if r.max_rel_error > worst {
            worst = r.max_rel_error;
            worst_param = r.worst.clone();
        }
        coords += r.coords;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("max rel error {worst:.3e} (limit 1e-4, in {worst_param}) over {coords} coordinates, {secs:.1}s (limit 60s)"),
    )
}

fn dense_linear(w: &Tensor, b: &[f64], x: &[f64], d_in: usize) -> Vec<f64> {
    let d_out = w.shape()[0];
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut acc = b[o];
            for i in 0..d_in {
                acc += w.data()[o * d_in + i] * x[r * d_in + i];
            }
            out[r * d_out + o] = acc;
        }
    }
    out
}

fn dense_layer(layer: &FactorizedLinear, x: &[f64], task: &str) -> Vec<f64> {
    let w = layer.effective_weight(task).unwrap();
    let zero = vec![0.0; layer.d_out()];
    let b = layer.shared_bias().map_or(&zero[..], |t| t.data());
    dense_linear(&w, b, x, layer.d_in())
}

/// Independent forward of the whole model through materialized weights.
fn dense_model(model: &ToyEncoderClassifier, x: &[f64], seq_len: usize, task: &str) -> Vec<f64> {
    let cfg = model.config();
    let d = cfg.d_model;
    let mut h = dense_layer(model.input_proj(), x, task);
    let n = h.len() / d;
    for block in model.blocks() {
        if let Some(a) = &block.attention {
            let q = dense_layer(&a.q, &h, task);
            let k = dense_layer(&a.k, &h, task);
            let v = dense_layer(&a.v, &h, task);
            let mut ctx = vec![0.0; n * d];
            for s in 0..n / seq_len {
                for i in 0..seq_len {
                    let qi = &q[(s * seq_len + i) * d..][..d];
                    let scores: Vec<f64> = (0..seq_len)
                        .map(|j| {
                            let kj = &k[(s * seq_len + j) * d..][..d];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for c in 0..d {
                            ctx[(s * seq_len + i) * d + c] += ej / z * v[(s * seq_len + j) * d + c];
                        }
                    }
                }
            }
            let o = dense_layer(&a.o, &ctx, task);
            h.iter_mut().zip(o).for_each(|(h, o)| *h += o);
        }
        let pre = dense_layer(&block.ffn, &h, task);
        for (h, p) in h.iter_mut().zip(pre) {
            *h += match cfg.activation {
                Activation::Tanh => p.tanh(),
                Activation::Relu => p.max(0.0),
            };
        }
    }
    let b = n / seq_len;
    let mut pooled = vec![0.0; b * d];
    for s in 0..b {
        for i in 0..seq_len {
            for c in 0..d {
                pooled[s * d + c] += h[(s * seq_len + i) * d + c] / seq_len as f64;
            }
        }
    }
    let out = model.output_proj();
    dense_linear(out.weight(), out.bias().data(), &pooled, d)
}

// 2. Factorized forward against materialized dense weights.
fn dense_equivalence() -> Outcome {
    let mut rng = seed::rng(2, &[]);
    let mut layer = FactorizedLinear::new("layer", 12, 9, 2, true, &mut rng).unwrap();
    let tasks = ["t0", "t1", "t2"];
    for t in tasks {
        layer.add_task(t, 0.5, &mut rng).unwrap();
    }
    let mut layer_err = 0.0f64;
    for t in tasks {
        for _ in 0..100 {
            let x = randn(&mut rng, &[1, 12]);
            let y = layer.apply(&x, t).unwrap();
            let z = dense_layer(&layer, x.data(), t);
            layer_err = y.data().iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(layer_err, f64::max);
        }
    }

    let mut model_err = 0.0f64;
    for use_attention in [false, true] {
        let cfg = ModelConfig { d_in: 8, d_model: 16, n_blocks: 2, n_classes: 5, k: 2, use_attention, ..Default::default() };
        let mut model = ToyEncoderClassifier::new(cfg, &mut rng).unwrap();
        for t in tasks {
            model.add_language(t, 0.3, &mut rng).unwrap();
        }
        for t in tasks {
            for _ in 0..100 {
                let seq_len = 5;
                let x = randn(&mut rng, &[seq_len, 8]);
                let y = model.forward(&x, t).unwrap();
                let z = dense_model(&model, x.data(), seq_len, t);
                model_err = y.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(model_err, f64::max);
            }
        }
    }
    outcome(
        layer_err <= 1e-10 && model_err <= 1e-9,
        format!("layer max |diff| {layer_err:.2e} (limit 1e-10), model max |diff| {model_err:.2e} (limit 1e-9)"),
    )
}

// 3. Fisher estimates against a two-pass brute-force moment computation.
fn fisher_oracle() -> Outcome {
    let mut rng = seed::rng(3, &[]);
    let cfg = ModelConfig { d_in: 6, d_model: 16, n_blocks: 2, n_classes: 4, k: 2, ..Default::default() };
    let mut model = ToyEncoderClassifier::new(cfg.clone(), &mut rng).unwrap();
    model.add_language("a", 0.3, &mut rng).unwrap();
    let seq_len = 4;
    let samples: Vec<Batch> = (0..50)
        .map(|_| Batch::new(randn(&mut rng, &[seq_len, cfg.d_in]), vec![rng.random_range(0..cfg.n_classes)], seq_len).unwrap())
        .collect();
    let names = model.shared_param_names();
    let grads = |b: &Batch| Ok(model.loss_and_grads(b, "a", None)?.1);

    let per_sample: Vec<ParamMap> = samples.iter().map(|b| grads(b).unwrap()).collect();
    let n = samples.len() as f64;
    let mut worst = 0.0f64;
    let mut perm_worst = 0.0f64;
    for estimator in [FisherEstimator::Variance, FisherEstimator::MeanSquare] {
        let est = estimate_fisher(&samples, &names, estimator, grads).unwrap();
        for name in &names {
            let len = per_sample[0][name].len();
            for j in 0..len {
                let col: Vec<f64> = per_sample.iter().map(|g| g[name].data()[j]).collect();
                let mean = col.iter().sum::<f64>() / n;
                let expected = match estimator {
                    FisherEstimator::MeanSquare => col.iter().map(|g| g * g).sum::<f64>() / n,
                    FisherEstimator::Variance => col.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n,
                };
                worst = worst.max((est.values[name].data()[j] - expected).abs());
            }
        }
        let mut shuffled: Vec<&Batch> = samples.iter().collect();
        shuffled.shuffle(&mut rng);
        let perm = estimate_fisher(&shuffled, &names, estimator, |b: &&Batch| grads(b)).unwrap();
        perm_worst = perm_worst.max(max_abs_diff(&est.values, &perm.values));
    }
    outcome(
        worst <= 1e-10 && perm_worst <= 1e-12,
        format!("brute-force max |diff| {worst:.2e} (limit 1e-10), permutation max |diff| {perm_worst:.2e} (limit 1e-12)"),
    )
}

// 4. WfFrozen leaves old tasks and shared weights bitwise untouched.
fn frozen_zero_forgetting() -> Outcome {
    let corpus = small_corpus(4);
    let plan = small_plan(4);
    let old = corpus.suite.group_ids(0);
    let mut state = train_initial(&corpus, &old, &small_model(), &plan).unwrap();
    let before_params = state.model.snapshot();
    let logits = |m: &ToyEncoderClassifier| -> Vec<Vec<u64>> {
        old.iter()
            .map(|t| {
                let d = corpus.get(t, Split::Test).unwrap();
                let idx: Vec<usize> = (0..d.len()).collect();
                let b = d.batch(&idx).unwrap();
                bits(&m.logits_batch(&b.frames, b.seq_len, t).unwrap())
            })
            .collect()
    };
    let before_logits = logits(&state.model);
    continual_step(&mut state, &corpus, &corpus.suite.group_ids(1), Strategy::WfFrozen, &plan).unwrap();
    let after = state.model.snapshot();

    let mut changed = 0;
    let mut checked = 0;
    for (name, t) in &before_params {
        checked += 1;
        if bits(t) != bits(&after[name]) {
            changed += 1;
        }
    }
    let same_logits = before_logits == logits(&state.model);
    outcome(
        changed == 0 && same_logits,
        format!("{changed} of {checked} pre-existing tensors changed; old-task logits bitwise equal: {same_logits}"),
    )
}

fn bench_config() -> BenchConfig {
    BenchConfig { suite: SuiteConfig { groups: vec![4, 2], ..Default::default() }, ..Default::default() }
}

// 5. Degradation ordering of the strategies, mean over seeds.
fn ordering(outcomes: &[SeedOutcome], secs: f64) -> Outcome {
    let s = summarize(outcomes, Split::Test).unwrap();
    let deg = |st: Strategy| s.strategy(st).unwrap().mean_old_group_degradation;
    let (v, e, f, we) = (deg(Strategy::Vanilla), deg(Strategy::EwcOnly), deg(Strategy::WfFrozen), deg(Strategy::WfEwc));
    let pass = v >= e && e >= we && we >= 0.0 && f == 0.0 && v >= 2.0 * we && secs < 30.0 * 60.0;
    outcome(
        pass,
        format!(
            "mean old-group degradation vanilla {:+.1}% ewc {:+.1}% wf_ewc {:+.1}% wf_frozen {:+.1}%; vanilla/wf_ewc {:.1}x (need 2x); {} seeds in {:.0}s (target 1800s)",
            100.0 * v,
            100.0 * e,
            100.0 * we,
            100.0 * f,
            v / we,
            outcomes.len(),
            secs
        ),
    )
}

// 6. WfEwc new-group error within +25% of the joint baseline.
fn forward_transfer(outcomes: &[SeedOutcome]) -> Outcome {
    let s = summarize(outcomes, Split::Test).unwrap();
    let wf = &s.strategy(Strategy::WfEwc).unwrap().new_group_error;
    let joint = &s.joint_new_group_error;
    let ratios: Vec<f64> = wf.iter().zip(joint).map(|(a, b)| a / b).collect();
    let mean_ratio = s.strategy(Strategy::WfEwc).unwrap().mean_new_group_error / s.mean_joint_new_group_error.unwrap();
    let pass = ratios.len() == outcomes.len() && ratios.iter().all(|&r| r <= 1.25) && mean_ratio <= 1.25;
    let per_seed: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        pass,
        format!("wf_ewc/{JOINT} new-group error ratio per seed [{}], mean {mean_ratio:.3} (limit 1.25)", per_seed.join(", ")),
    )
}

// 7. Normalized importance rises after iteration 1; raw importance never falls.
fn importance_direction(outcomes: &[SeedOutcome]) -> Outcome {
    let mut rises = Vec::new();
    let mut monotone = true;
    for o in outcomes {
        let series = |strategy: &str, normalize: bool| -> Vec<f64> {
            let mut pts: Vec<_> = o
                .report
                .importance
                .iter()
                .filter(|p| p.strategy == strategy && p.normalize == normalize && p.threshold == 0.25)
                .collect();
            pts.sort_by_key(|p| p.iteration);
            pts.iter().map(|p| p.fraction).collect()
        };
        let wf = series(Strategy::WfEwc.as_str(), true);
        rises.push((wf[0], wf[1]));
        for s in o.finals.keys() {
            let raw = series(s.as_str(), false);
            monotone &= raw.len() >= 2 && raw.windows(2).all(|w| w[1] >= w[0]);
        }
    }
    let pass = rises.iter().all(|(a, b)| b > a) && monotone;
    let text: Vec<String> = rises.iter().map(|(a, b)| format!("{:.1}%->{:.1}%", 100.0 * a, 100.0 * b)).collect();
    outcome(pass, format!("wf_ewc normalized tau=0.25 per seed [{}]; raw fractions nondecreasing: {monotone}", text.join(", ")))
}

// 8. Parameter growth per task and the overhead figures.
fn parameter_accounting() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for use_attention in [false, true] {
        let cfg = ModelConfig { use_attention, ..Default::default() };
        let mut rng = seed::rng(8, &[]);
        let mut model = ToyEncoderClassifier::new(cfg.clone(), &mut rng).unwrap();
        let (k, d) = (cfg.k, cfg.d_model);
        let square_layers = cfg.n_blocks * if use_attention { 5 } else { 1 };
        let expected = 2 * k * (cfg.d_in + d) + square_layers * 2 * k * (2 * d);
        for t in ["a", "b", "c"] {
            let before = model.param_count();
            model.add_language(t, 0.01, &mut rng).unwrap();
            ok &= model.param_count() - before == expected;
        }
        notes.push(format!("{expected} per task (attention {use_attention})"));
    }
    let o = param_overhead(8, 1024, 1024).unwrap();
    ok &= o.added_per_task == 32768 && o.fraction_of_dense == 0.03125;

    let mut rng = seed::rng(8, &[1]);
    let mut model = ToyEncoderClassifier::new(ModelConfig::default(), &mut rng).unwrap();
    model.add_language("a", 0.01, &mut rng).unwrap();
    let report = EvalReport { overhead: Some(OverheadContext::for_model(&model).unwrap()), ..Default::default() };
    let ctx = report.overhead.as_ref().unwrap();
    let rendered = report.render(Split::Test);
    let json = report.to_json().unwrap();
    ok &= (0.005..0.01).contains(&ctx.reference_model_fraction)
        && rendered.contains("3.125%")
        && json.contains("reference_model_fraction");
    outcome(
        ok,
        format!(
            "{}; k=8 1024x1024 adds {} ({:.3}%); whole-model context {:.2}% per language reported",
            notes.join(", "),
            o.added_per_task,
            100.0 * o.fraction_of_dense,
            100.0 * ctx.reference_model_fraction
        ),
    )
}

// 9. Identical runs hash the same, resume tracks the uninterrupted run, and
// the dataset container round-trips byte-exactly.
fn determinism_and_persistence() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let corpus = small_corpus(9);
    let plan = small_plan(9);
    let old = corpus.suite.group_ids(0);
    let new = corpus.suite.group_ids(1);

    let run = || {
        let mut s = train_initial(&corpus, &old, &small_model(), &plan).unwrap();
        continual_step(&mut s, &corpus, &new, Strategy::WfEwc, &plan).unwrap();
        s
    };
    save_checkpoint(&run(), &plan, &root.path().join("a")).unwrap();
    save_checkpoint(&run(), &plan, &root.path().join("b")).unwrap();
    let ha = checkpoint_hash(&root.path().join("a")).unwrap();
    let same_hash = ha == checkpoint_hash(&root.path().join("b")).unwrap();

    let mut straight = train_initial(&corpus, &old, &small_model(), &plan).unwrap();
    straight.begin_iteration(Phase::Continual(Strategy::WfEwc), &new, plan.steps_per_iteration, &plan).unwrap();
    for _ in 0..37 {
        straight.step(&corpus, &plan).unwrap();
    }
    save_checkpoint(&straight, &plan, &root.path().join("mid")).unwrap();
    let (mut resumed, plan2) = load_checkpoint(&root.path().join("mid")).unwrap();
    straight.step(&corpus, &plan).unwrap();
    resumed.step(&corpus, &plan2).unwrap();
    let resume_diff = max_abs_diff(&straight.model.snapshot(), &resumed.model.snapshot());

    let mut bytes_equal = true;
    for split in Split::ALL {
        let d = corpus.get(&old[0], split).unwrap();
        let p1 = root.path().join(format!("{split}.1.clwf"));
        let p2 = root.path().join(format!("{split}.2.clwf"));
        d.save(&p1).unwrap();
        let back = Dataset::load(&p1).unwrap();
        back.save(&p2).unwrap();
        bytes_equal &= fs::read(&p1).unwrap() == fs::read(&p2).unwrap() && &back == d;
    }
    outcome(
        same_hash && resume_diff <= 1e-6 && bytes_equal,
        format!(
            "identical runs hash equal: {same_hash} ({}...); resume max |diff| after one step {resume_diff:.2e} (limit 1e-6); dataset bytes round-trip: {bytes_equal}",
            &ha[..12]
        ),
    )
}

// 10. The penalty vanishes at its anchor, and WfEwc with lambda 0 is WfFinetune.
fn ewc_anchor_identity() -> Outcome {
    let corpus = small_corpus(10);
    let plan = small_plan(10);
    let initial = train_initial(&corpus, &corpus.suite.group_ids(0), &small_model(), &plan).unwrap();
    let ewc = initial.ewc.as_ref().unwrap();
    let p = ewc_penalty(&ewc.anchor, &ewc.fisher_sum, &ewc.anchor, 123.0).unwrap();
    let zero_at_anchor = p.loss == 0.0 && p.grads.values().all(|g| g.data().iter().all(|&v| v == 0.0));

    let mut zero_plan = plan.clone();
    zero_plan.ewc.lambda0 = 0.0;
    let new = corpus.suite.group_ids(1);
    let begin = |s: Strategy| -> TrainState {
        let mut st = initial.clone();
        st.begin_iteration(Phase::Continual(s), &new, zero_plan.steps_per_iteration, &zero_plan).unwrap();
        st
    };
    let (mut a, mut b) = (begin(Strategy::WfEwc), begin(Strategy::WfFinetune));
    let mut identical = true;
    for _ in 0..zero_plan.steps_per_iteration {
        let (ia, ib) = (a.step(&corpus, &zero_plan).unwrap(), b.step(&corpus, &zero_plan).unwrap());
        identical &= ia.loss.to_bits() == ib.loss.to_bits() && ia.grad_norm.to_bits() == ib.grad_norm.to_bits();
        let (sa, sb): (BTreeMap<_, _>, BTreeMap<_, _>) = (a.model.snapshot(), b.model.snapshot());
        identical &= sa.iter().all(|(n, t)| bits(t) == bits(&sb[n]));
    }
    outcome(
        zero_at_anchor && identical,
        format!(
            "penalty and gradient exactly zero at anchor: {zero_at_anchor}; lambda=0 wf_ewc equals wf_finetune bitwise over {} steps: {identical}",
            zero_plan.steps_per_iteration
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<28} {} {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "dense equivalence", dense_equivalence());
    report(3, "fisher oracle", fisher_oracle());
    report(4, "frozen zero forgetting", frozen_zero_forgetting());

    let cfg = bench_config();
    let start = Instant::now();
    let outcomes: Vec<SeedOutcome> = (1..=3).map(|s| run_seed(&cfg, s).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();
    report(5, "strategy ordering", ordering(&outcomes, secs));
    report(6, "forward transfer", forward_transfer(&outcomes));
    report(7, "importance direction", importance_direction(&outcomes));

    report(8, "parameter accounting", parameter_accounting());
    report(9, "determinism and persistence", determinism_and_persistence());
    report(10, "ewc anchor identity", ewc_anchor_identity());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
