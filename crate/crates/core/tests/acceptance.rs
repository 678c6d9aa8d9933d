//! End-to-end checks, one line per criterion. Exits non-zero if any fails.

mod support;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adaptcl::adapters::count_parameters;
use adaptcl::error::Error;
use adaptcl::harness::{checkpoint, run_experiment, run_experiment_with_hook, ExperimentConfig, Outcome};
use adaptcl::methods::{first_task_wer, select_weight_decay, Method, TrainPolicy, TrainRun};
use adaptcl::metrics::{avg, cov, EvalMode, ResultMatrix};
use adaptcl::model::{Bound, HybridModel, ModelConfig, Trainable, Utterance, SOS_EOS};
use adaptcl::tensor::rng::{normal_vec, stream};
use adaptcl::tensor::Tape;
use adaptcl::taskgen::{generate_task, interference_suite, TaskSpec};
use support::{ctc_brute_force, gradcheck, log_softmax_rows, randn, tiny};

type Check = Result<String, String>;
type Criterion = (u32, &'static str, Box<dyn FnOnce(&mut Desk) -> Check>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    }};
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

fn desk_model() -> ModelConfig {
    ModelConfig {
        num_encoder_layers: 2,
        num_decoder_layers: 1,
        attention_dim: 32,
        feedforward_dim: 64,
        num_heads: 2,
        vocab_size: 34,
        feature_dim: 16,
        ctc_weight: 0.3,
        adapter_dim: 8,
    }
}

fn desk_policy(method: Method) -> TrainPolicy {
    TrainPolicy {
        method,
        lr_initial: 3e-3,
        epochs_initial: 10,
        epochs_adapt: 20,
        epochs_cautious: 20,
        batch_size: 16,
        ..TrainPolicy::default()
    }
}

fn desk_config(method: Method, out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        tasks: interference_suite(3, 0).unwrap(),
        data_dir: None,
        policy: desk_policy(method),
        model: desk_model(),
        eval_modes: vec![EvalMode::TaskLabel],
        seeds: DESK_SEEDS.to_vec(),
        beam: 4,
        output_dir: out,
    }
}

/// Desk runs shared by the forgetting, ordering and label-free criteria.
struct Desk {
    root: PathBuf,
    outcomes: BTreeMap<Method, Result<Outcome, String>>,
}

impl Desk {
    fn new(root: PathBuf) -> Self {
        Desk {
            root,
            outcomes: BTreeMap::new(),
        }
    }

    fn dir(&self, method: Method) -> PathBuf {
        self.root.join(format!("{method:?}"))
    }

    fn get(&mut self, method: Method) -> Result<&Outcome, String> {
        if !self.outcomes.contains_key(&method) {
            let t0 = Instant::now();
            let r = ok(run_experiment(&desk_config(method, self.dir(method))));
            eprintln!("  desk run {method}: {:.0}s", t0.elapsed().as_secs_f64());
            self.outcomes.insert(method, r);
        }
        self.outcomes[&method].as_ref().map_err(Clone::clone)
    }

    fn matrix(&mut self, method: Method, seed: u64) -> Result<ResultMatrix, String> {
        let o = self.get(method)?;
        let run = o.runs.iter().find(|r| r.seed == seed).ok_or("missing seed")?;
        run.matrices
            .iter()
            .find(|m| m.mode == EvalMode::TaskLabel)
            .cloned()
            .ok_or_else(|| "missing task_label matrix".to_string())
    }
}

fn metric_formulas() -> Check {
    let sep = ResultMatrix::from_rows(
        EvalMode::TaskLabel,
        vec![
            vec![23.6],
            vec![23.6, 23.5],
            vec![23.6, 23.5, 45.4],
            vec![23.6, 23.5, 45.4, 40.5],
        ],
    )
    .unwrap();
    let a = ok(avg(&sep))?;
    ensure!(a == 33.25, "avg {a}");
    let (ft, best) = (15.25, 13.14);
    let lwf = ok(cov(14.88, ft, best))?;
    let er = ok(cov(14.20, ft, best))?;
    ensure!((lwf - 17.5).abs() <= 0.3, "LWF cov {lwf}");
    ensure!((er - 49.8).abs() <= 0.3, "ER cov {er}");
    Ok(format!("avg 33.25, cov LWF {lwf:.2}, ER {er:.2}"))
}

/// All label sequences of length `..=max` over symbols `1..v`.
fn label_sequences(v: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max {
        let mut next = vec![];
        for s in &frontier {
            for k in 1..v {
                let mut t: Vec<usize> = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn ctc_oracle() -> Check {
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        for frames in 1..=4usize {
            for vocab in 2..=4usize {
                let lp = log_softmax_rows(&randn(seed, "ctc", &[frames, vocab], 2.0));
                for labels in label_sequences(vocab, 2) {
                    let expected = ctc_brute_force(&lp, &labels, 0);
                    let mut tape = Tape::new();
                    let x = tape.constant(lp.clone());
                    match tape.ctc_loss(x, &labels, 0) {
                        Ok(l) => {
                            let got = tape.value(l).item();
                            ensure!(expected.is_finite(), "seed {seed} F {frames} {labels:?}: infeasible but got {got}");
                            let d = (got - expected).abs();
                            worst = worst.max(d);
                            ensure!(d < 1e-8, "seed {seed} F {frames} v {vocab} {labels:?}: {got} vs {expected}");
                        }
                        Err(e) => ensure!(!expected.is_finite(), "seed {seed} {labels:?}: {e}"),
                    }
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} cases, max |diff| {worst:.1e}"))
}

fn small_model(enc: usize, dec: usize) -> HybridModel {
    HybridModel::new(ModelConfig {
        num_encoder_layers: enc,
        num_decoder_layers: dec,
        attention_dim: 8,
        feedforward_dim: 12,
        num_heads: 2,
        vocab_size: 6,
        feature_dim: 3,
        ctc_weight: 0.3,
        adapter_dim: 4,
    })
    .unwrap()
}

fn gradient_suite() -> Check {
    let m = small_model(2, 1);
    let p = m.init_shared(&mut stream(21, "init", 0));
    let mut bank = ok(m.new_first_bank(&mut stream(21, "bank", 0)))?;
    // move away from the identity so every adapter weight has a gradient
    let mut rng = stream(21, "perturb", 0);
    for t in bank.tensors_mut() {
        let n = t.len();
        for (x, d) in t.data_mut().iter_mut().zip(normal_vec(&mut rng, n, 0.3)) {
            *x += d;
        }
    }
    let u = Utterance {
        id: "g".into(),
        frames: randn(21, "frames", &[5, 3], 1.0),
        tokens: vec![2, 4, 4],
        task_id: None,
    };
    let n_shared = p.len();
    let mut inputs = p.tensors().to_vec();
    inputs.extend(bank.tensors().cloned());
    let checked = gradcheck(&inputs, |tape, vars| {
        let bound = Bound {
            shared: vars[..n_shared].to_vec(),
            bank: Some(vars[n_shared..].to_vec()),
        };
        m.hybrid_loss_on(tape, &bound, &u).unwrap()
    })
    .map_err(|e| format!("{e:?}"))?;
    let total = p.scalar_count() + bank.parameter_count();
    ensure!(checked == total, "checked {checked} of {total}");
    Ok(format!("{checked} scalars within rel. err 1e-4"))
}

fn adapter_identity() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let m = small_model(2, 1);
        let p = m.init_shared(&mut stream(seed, "init", 0));
        let bank = ok(m.new_first_bank(&mut stream(seed, "bank", 0)))?;
        let frames = randn(seed, "frames", &[6, 3], 2.0);
        let inputs = [SOS_EOS, 2, 3, 5];
        let mut outs = vec![];
        for b in [None, Some(&bank)] {
            let mut tape = Tape::new();
            let bound = ok(m.bind(&mut tape, &p, b, Trainable::nothing()))?;
            let enc = ok(m.encode_on(&mut tape, &bound, &frames))?;
            let ctc = ok(m.ctc_log_probs_on(&mut tape, &bound, enc))?;
            let dec = ok(m.decoder_logits_on(&mut tape, &bound, enc, &inputs))?;
            let mut v = tape.value(ctc).data().to_vec();
            v.extend_from_slice(tape.value(dec).data());
            outs.push(v);
        }
        for (a, b) in outs[0].iter().zip(&outs[1]) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-12, "logit change {worst:e}");
    let wide = ok(count_parameters(256, 32, 1))?.per_adapter;
    ensure!(wide == 17_184, "h=256 d=32 gives {wide}");
    for (enc, h, d) in [(1, 8, 4), (2, 8, 2), (3, 16, 4)] {
        let m = HybridModel::new(ModelConfig {
            num_encoder_layers: enc,
            attention_dim: h,
            adapter_dim: d,
            ..small_model(enc, 1).config().clone()
        })
        .unwrap();
        let bank = ok(m.new_first_bank(&mut stream(0, "bank", 0)))?;
        let formula = ok(count_parameters(h, d, enc))?.per_bank;
        ensure!(bank.parameter_count() == formula, "h={h} d={d}: {} vs {formula}", bank.parameter_count());
    }
    Ok(format!("max logit change {worst:e}, N_a(256, 32) = {wide}"))
}

fn zero_forgetting(desk: &mut Desk) -> Check {
    let o = desk.get(Method::AFreeze)?;
    let row = o
        .report
        .rows
        .iter()
        .find(|r| r.mode == EvalMode::TaskLabel)
        .ok_or("no task_label row")?;
    for s in &row.per_seed {
        ensure!(s.summary.bwt == Some(0.0), "seed {}: BWT {:?}", s.seed, s.summary.bwt);
    }
    for seed in DESK_SEEDS {
        let path = desk.dir(Method::AFreeze).join(format!("seed_{seed}/task_3/checkpoint.bin"));
        let (_, _, store) = ok(checkpoint::load(&path))?;
        let fps = store.banks.boundary_fingerprints();
        ensure!(fps.len() == 3 && fps.windows(2).all(|w| w[0] == w[1]), "seed {seed}: shared fingerprints moved");
    }
    Ok("BWT 0.0 on every seed, shared fingerprints identical at all boundaries".into())
}

fn forgetting_demo(desk: &mut Desk) -> Check {
    let mut bwts = vec![];
    for seed in DESK_SEEDS {
        let m = desk.matrix(Method::FineTune, seed)?;
        bwts.push(ok(adaptcl::metrics::bwt(&m))?);
    }
    let negative = bwts.iter().filter(|&&b| b < 0.0).count();
    let shown: Vec<String> = bwts.iter().map(|b| format!("{b:.2}")).collect();
    ensure!(negative >= 2, "BWT per seed [{}]", shown.join(", "));
    Ok(format!("BWT per seed [{}]", shown.join(", ")))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn method_ordering(desk: &mut Desk) -> Check {
    let mut covs: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for seed in DESK_SEEDS {
        let ft = ok(avg(&desk.matrix(Method::FineTune, seed)?))?;
        let sep = ok(avg(&desk.matrix(Method::SepModel, seed)?))?;
        for method in [Method::FineTune, Method::AFreeze, Method::ACft] {
            let a = ok(avg(&desk.matrix(method, seed)?))?;
            covs.entry(method).or_default().push(ok(cov(a, ft, sep))?);
        }
    }
    let med: BTreeMap<Method, f64> = covs.iter().map(|(k, v)| (*k, median(v.clone()))).collect();
    let (ft, fr, cft) = (med[&Method::FineTune], med[&Method::AFreeze], med[&Method::ACft]);
    let detail = format!("median COV A/CFT {cft:.1}, A/Freeze {fr:.1}, FT {ft:.1}");
    ensure!(ft == 0.0, "{detail}");
    ensure!(cft > fr && fr > ft, "{detail}");
    ensure!(cft > 50.0, "{detail}");
    Ok(detail)
}

fn label_free(desk: &mut Desk) -> Check {
    desk.get(Method::ACft)?;
    let path = desk.dir(Method::ACft).join("seed_0/task_2/checkpoint.bin");
    let (_, model, store) = ok(checkpoint::load(&path))?;
    ensure!(store.banks.len() == 2, "{} banks", store.banks.len());
    let specs = interference_suite(2, 0).unwrap();
    let (a, b) = (&specs[0], &specs[1]);
    let disjoint = a
        .substituted_symbols
        .as_ref()
        .zip(b.substituted_symbols.as_ref())
        .is_some_and(|(x, y)| x.iter().all(|s| !y.contains(s)));
    ensure!(disjoint && a.rotation_seed != b.rotation_seed, "tasks are not separated");

    let decoder = store.decoder(&model).with_beam(4);
    let (mut hits, mut total) = (0, 0);
    for spec in &specs {
        let test = ok(generate_task(spec))?.test;
        let before = decoder.counters().decodes;
        for u in &test {
            let (_, t) = ok(decoder.conf_infer(&u.frames))?;
            hits += usize::from(t == spec.task_id);
            total += 1;
        }
        let used = decoder.counters().decodes - before;
        ensure!(used == 2 * test.len() as u64, "conf_infer used {used} decodes for {}", test.len());
    }
    let rate = 100.0 * hits as f64 / total as f64;
    ensure!(rate > 80.0, "task id recovered on {rate:.1}%");

    let test = ok(generate_task(&specs[0]))?.test;
    let fresh = store.decoder(&model).with_beam(4);
    for u in test.iter().take(50) {
        ok(fresh.avg_apt(&u.frames))?;
    }
    let c = fresh.counters();
    ensure!(c.decodes == 50 && c.averagings == 1, "avg_apt counters {c:?}");
    Ok(format!("task id recovered on {rate:.1}% of {total}; decodes T per conf_infer, 1 per avg_apt"))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_logs(dir: &Path, tasks: usize) -> Result<Vec<TrainRun>, String> {
    (1..=tasks)
        .map(|t| {
            let text = read(&dir.join(format!("task_{t}/run_log.json")))?;
            let v: serde_json::Value = ok(serde_json::from_slice(&text))?;
            ok(serde_json::from_value(v["run"].clone()))
        })
        .collect()
}

fn a_cft_stages(scratch: &Path) -> Check {
    let freeze = scratch.join("freeze");
    let cft0 = scratch.join("cft0");
    ok(run_experiment(&tiny::config(Method::AFreeze, 3, &freeze)))?;
    let mut cfg = tiny::config(Method::ACft, 3, &cft0);
    cfg.policy.epochs_cautious = 0;
    ok(run_experiment(&cfg))?;
    for t in 1..=3 {
        let (_, _, a) = ok(checkpoint::load(&freeze.join(format!("task_{t}/checkpoint.bin"))))?;
        let (_, _, b) = ok(checkpoint::load(&cft0.join(format!("task_{t}/checkpoint.bin"))))?;
        ensure!(a.fingerprints() == b.fingerprints(), "task {t}: parameters differ");
        let ra: serde_json::Value = ok(serde_json::from_slice(&read(&freeze.join(format!("task_{t}/matrix_row.json")))?))?;
        let rb: serde_json::Value = ok(serde_json::from_slice(&read(&cft0.join(format!("task_{t}/matrix_row.json")))?))?;
        ensure!(ra["rows"] == rb["rows"], "task {t}: WER rows differ");
    }

    let cft = scratch.join("cft");
    let cfg = tiny::config(Method::ACft, 2, &cft);
    ok(run_experiment(&cfg))?;
    let logs = run_logs(&cft, 2)?;
    let stage = logs[1].stages.iter().find(|s| s.name == "cautious").ok_or("no cautious stage")?;
    let expected = cfg.policy.lr_initial / 100.0;
    ensure!((stage.lr - expected).abs() <= 1e-15 * expected, "logged lr {} vs {expected}", stage.lr);
    Ok(format!("zero-epoch A/CFT matches A/Freeze; stage-2 lr {:e}", stage.lr))
}

fn weight_decay_selection() -> Check {
    let spec = TaskSpec {
        train_count: 400,
        dev_count: 100,
        test_count: 0,
        ..interference_suite(1, 0).unwrap().remove(0)
    };
    let data = ok(generate_task(&spec))?;
    let model = ok(HybridModel::new(desk_model()))?;
    let policy = desk_policy(Method::AFreeze);
    let candidates: Vec<f64> = (1..=8).map(|k| -(k as f64)).collect();
    let sel = ok(select_weight_decay(&model, &data.train, &data.dev, &candidates, 0.01, &policy))?;

    let reference = ok(first_task_wer(&model, &data.train, &data.dev, &policy, 0.0))?;
    let mut sweep = vec![];
    for &w in &candidates {
        sweep.push(ok(first_task_wer(&model, &data.train, &data.dev, &policy, 10f64.powf(w)))?);
    }
    let expected = candidates
        .iter()
        .zip(&sweep)
        .find(|(_, &wer)| wer <= reference * 1.01)
        .map(|(&w, _)| w);
    ensure!(sel.reference_wer == reference, "reference {} vs {reference}", sel.reference_wer);
    ensure!(sel.selected == expected, "selected {:?}, sweep says {expected:?}", sel.selected);
    Ok(format!("selected {:?} (reference WER {reference:.2})", sel.selected))
}

fn protocol_guard(scratch: &Path) -> Check {
    let bad = scratch.join("bad");
    let cfg = tiny::config(Method::FineTune, 2, &bad);
    let r = run_experiment_with_hook(&cfg, |guard, t| {
        if t == 2 {
            guard.train(1)?;
        }
        Ok(())
    });
    ensure!(matches!(r, Err(Error::Protocol(_))), "run was not aborted");
    ensure!(!bad.join("task_2").exists(), "task 2 output was written");
    let good = scratch.join("good");
    ok(run_experiment_with_hook(&tiny::config(Method::FineTune, 2, &good), |guard, t| {
        guard.train(t).map(|_| ())
    }))?;
    Ok("reading task 1 training data during task 2 aborts with a protocol error".into())
}

fn reproducibility(scratch: &Path) -> Check {
    let mut files = 0;
    for method in [Method::Kd, Method::ACft] {
        let dirs = [scratch.join(format!("{method:?}-a")), scratch.join(format!("{method:?}-b"))];
        for d in &dirs {
            let mut cfg = tiny::config(method, 3, d);
            cfg.seeds = vec![3];
            ok(run_experiment(&cfg))?;
        }
        let mut names = vec!["report.txt".to_string(), "report.json".into(), "plot_data.csv".into()];
        for t in 1..=3 {
            names.push(format!("task_{t}/checkpoint.bin"));
            names.push(format!("task_{t}/matrix_row.json"));
        }
        for n in names {
            ensure!(read(&dirs[0].join(&n))? == read(&dirs[1].join(&n))?, "{method}: {n} differs");
            files += 1;
        }
    }
    Ok(format!("{files} report and checkpoint files byte-identical"))
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let mut desk = Desk::new(root.join("desk"));
    let scratch = |name: &str| root.join(name);

    let mut checks: Vec<Criterion> = vec![
        (1, "metric formulas", Box::new(|_| metric_formulas())),
        (2, "CTC oracle", Box::new(|_| ctc_oracle())),
        (3, "gradient suite", Box::new(|_| gradient_suite())),
        (4, "adapter identity", Box::new(|_| adapter_identity())),
        (5, "zero forgetting", Box::new(zero_forgetting)),
        (6, "forgetting under fine-tuning", Box::new(forgetting_demo)),
        (7, "method ordering", Box::new(method_ordering)),
        (8, "label-free decoding", Box::new(label_free)),
    ];
    let (s9, s11, s12) = (scratch("stages"), scratch("guard"), scratch("repro"));
    checks.push((9, "A/CFT stage contract", Box::new(move |_| a_cft_stages(&s9))));
    checks.push((10, "weight-decay selection", Box::new(|_| weight_decay_selection())));
    checks.push((11, "protocol guard", Box::new(move |_| protocol_guard(&s11))));
    checks.push((12, "reproducibility", Box::new(move |_| reproducibility(&s12))));

    let mut failed = 0;
    for (n, name, check) in checks {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut desk)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
