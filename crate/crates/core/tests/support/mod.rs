//! Test-only oracles: central finite differences and brute-force CTC.
#![allow(dead_code)]

use std::collections::HashMap;

use adaptcl::tensor::rng::{normal_vec, stream};
use adaptcl::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn randn(seed: u64, tag: &str, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, tag, 0), n, std)).unwrap()
}

/// Relative error with an absolute floor for near-zero entries.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    if analytic.abs() < FD_ABS_FLOOR && numeric.abs() < FD_ABS_FLOOR {
        return (analytic - numeric).abs() < FD_ABS_FLOOR;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()) < FD_REL_TOL
}

#[derive(Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients of `build` against central differences for every
/// element of every input. `build` records a scalar loss from the leaves.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> Result<usize, Mismatch>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let g = grads.get(*v).unwrap_or(&zero).clone();
        for e in 0..inputs[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[e];
            if !grad_close(analytic, numeric) {
                return Err(Mismatch {
                    input: i,
                    element: e,
                    analytic,
                    numeric,
                });
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Collapses a frame labeling: merge repeats, drop blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// `-log sum p(path)` over all `v^F` frame labelings that collapse to `labels`.
pub fn ctc_brute_force(logp: &Tensor, labels: &[usize], blank: usize) -> f64 {
    let (frames, vocab) = (logp.rows(), logp.cols());
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    let count = vocab.pow(frames as u32);
    for code in 0..count {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % vocab;
            c /= vocab;
        }
        if ctc_collapse(&path, blank) == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp.get(t, k)).sum();
            total += lp.exp();
        }
    }
    -total.ln()
}

/// Probability mass of every collapsed label sequence, for sanity checks.
pub fn ctc_label_distribution(logp: &Tensor, blank: usize) -> HashMap<Vec<usize>, f64> {
    let (frames, vocab) = (logp.rows(), logp.cols());
    let mut out = HashMap::new();
    let mut path = vec![0usize; frames];
    for code in 0..vocab.pow(frames as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % vocab;
            c /= vocab;
        }
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp.get(t, k)).sum();
        *out.entry(ctc_collapse(&path, blank)).or_insert(0.0) += lp.exp();
    }
    out
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone());
    let l = tape.log_softmax(v);
    tape.value(l).clone()
}

pub mod tiny {
    use adaptcl::harness::ExperimentConfig;
    use adaptcl::methods::{Method, TrainPolicy};
    use adaptcl::metrics::EvalMode;
    use adaptcl::model::ModelConfig;
    use adaptcl::taskgen::TaskSpec;
    use std::path::Path;

    /// A fast task: 8 lexical symbols in 8-dimensional frames.
    pub fn spec(task_id: usize) -> TaskSpec {
        let t = task_id as u64;
        TaskSpec {
            task_id,
            vocab_size: 8,
            feature_dim: 8,
            frames_per_token: 2,
            rotation_seed: t,
            rotation_angle: if task_id == 1 { 0.0 } else { 0.8 },
            substitution_seed: t,
            substituted_symbols: Some(vec![2 * (task_id - 1) % 8, (2 * (task_id - 1) + 1) % 8]),
            corpus_seed: 100 + t,
            train_count: 24,
            dev_count: 6,
            test_count: 6,
            min_len: 2,
            max_len: 4,
            ..TaskSpec::default()
        }
    }

    pub fn model() -> ModelConfig {
        ModelConfig {
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            attention_dim: 8,
            feedforward_dim: 16,
            num_heads: 2,
            vocab_size: 10,
            feature_dim: 8,
            ctc_weight: 0.3,
            adapter_dim: 4,
        }
    }

    pub fn policy(method: Method) -> TrainPolicy {
        TrainPolicy {
            method,
            lr_initial: 3e-3,
            epochs_initial: 2,
            epochs_adapt: 2,
            epochs_cautious: 1,
            batch_size: 8,
            memory_capacity: 10,
            ..TrainPolicy::default()
        }
    }

    pub fn config(method: Method, num_tasks: usize, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            tasks: (1..=num_tasks).map(spec).collect(),
            policy: policy(method),
            model: model(),
            eval_modes: vec![EvalMode::TaskLabel, EvalMode::ConfInfer, EvalMode::AvgApt],
            beam: 2,
            output_dir: out.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }
}
