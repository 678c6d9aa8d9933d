use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::count_parameters;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{self, Provenance};
use crate::harness::config::{canonical_json, ExperimentConfig};
use crate::harness::guard::DataGuard;
use crate::harness::report::{emit_report, MethodRun, Report, Storage};
use crate::inference::{corpus_wer, Decoder};
use crate::methods::{train_task, MemorySnapshot, ParameterStore, RehearsalMemory, TrainRun};
use crate::metrics::{EvalMode, ResultMatrix};
use crate::model::HybridModel;
use crate::params::SharedParams;
use crate::taskgen::{generate_task, load_task_for, TaskDataset};
use crate::tensor::rng::stream;

/// Evaluations made after one task, as stored in `task_<t>/matrix_row.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub config_hash: String,
    pub seed: u64,
    pub task: usize,
    pub rows: BTreeMap<EvalMode, Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunLog {
    config_hash: String,
    overrides: Vec<String>,
    run: TrainRun,
}

pub struct Outcome {
    pub report: Report,
    pub runs: Vec<MethodRun>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    cfg.tasks
        .iter()
        .map(|spec| match &cfg.data_dir {
            Some(dir) => load_task_for(&dir.join(format!("task_{}", spec.task_id)), spec),
            None => generate_task(spec),
        })
        .collect()
}

pub fn storage_for(cfg: &ExperimentConfig) -> Result<Storage> {
    let model = HybridModel::new(cfg.model.clone())?;
    let shared = model.init_shared(&mut stream(0, "count", 0)).scalar_count();
    let bank = if cfg.policy.method.uses_adapters() {
        let m = &cfg.model;
        Some(count_parameters(m.attention_dim, m.adapter_dim, m.num_encoder_layers)?.per_bank)
    } else {
        None
    };
    Ok(Storage::new(shared, bank))
}

/// Runs every seed of `cfg`, resuming after the last completed task found
/// in the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    run_experiment_with_hook(cfg, |_, _| Ok(()))
}

/// Like [`run_experiment`], calling `hook` right after each task begins.
pub fn run_experiment_with_hook(
    cfg: &ExperimentConfig,
    mut hook: impl FnMut(&DataGuard, usize) -> Result<()>,
) -> Result<Outcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    for w in cfg.policy.overrides() {
        log::warn!("{w}");
    }
    let config_path = cfg.output_dir.join("config.json");
    if config_path.exists() {
        let existing = ExperimentConfig::load(&config_path)?;
        if existing.hash()? != hash {
            return Err(Error::Integrity(format!(
                "{} holds a different configuration ({}); refusing to mix runs",
                config_path.display(),
                existing.hash()?
            )));
        }
    } else {
        let mut text = serde_json::to_string_pretty(&serde_json::from_str::<serde_json::Value>(
            &canonical_json(cfg)?,
        )?)?;
        text.push('\n');
        write(&config_path, &text)?;
    }

    let datasets = load_datasets(cfg)?;
    let model = HybridModel::new(cfg.model.clone())?;
    let storage = storage_for(cfg)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let matrices = run_seed(cfg, &hash, &model, &datasets, seed, &mut hook)?;
        runs.push(MethodRun {
            method: cfg.policy.method,
            seed,
            config_hash: hash.clone(),
            matrices,
            storage: storage.clone(),
        });
    }
    let report = emit_report(&runs)?;
    write(&cfg.output_dir.join("report.txt"), &report.to_text())?;
    write(&cfg.output_dir.join("report.json"), &report.to_json()?)?;
    write(&cfg.output_dir.join("plot_data.csv"), &plot_data(&runs))?;
    Ok(Outcome { report, runs })
}

/// WER trajectories in long format, one line per matrix entry.
pub fn plot_data(runs: &[MethodRun]) -> String {
    let mut s = String::from("method,seed,mode,after_task,task,wer\n");
    for r in runs {
        for m in &r.matrices {
            for (i, row) in m.rows().iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    s.push_str(&format!("{},{},{},{},{},{w}\n", r.method.label(), r.seed, m.mode, i + 1, j + 1));
                }
            }
        }
    }
    s
}

fn completed_tasks(dir: &Path, num_tasks: usize) -> usize {
    (1..=num_tasks)
        .take_while(|t| {
            let d = dir.join(format!("task_{t}"));
            d.join("matrix_row.json").exists() && d.join("checkpoint.bin").exists()
        })
        .count()
}

fn evaluate(
    decoder: &Decoder<'_>,
    datasets: &[TaskDataset],
    task: usize,
    mode: EvalMode,
) -> Result<f64> {
    corpus_wer(decoder, &datasets[task - 1].test, mode)
}

struct SeedState {
    store: ParameterStore,
    matrices: Vec<ResultMatrix>,
    /// Shared parameters after each task, for the separate-model bounds.
    snapshots: Vec<SharedParams>,
    memory: Option<RehearsalMemory>,
}

fn resume(
    dir: &Path,
    hash: &str,
    seed: u64,
    done: usize,
    separate: bool,
    guard: &mut DataGuard,
    state: &mut SeedState,
) -> Result<()> {
    log::info!("{}: resuming after task {done}", dir.display());
    for t in 1..=done {
        let tdir = dir.join(format!("task_{t}"));
        let row: MatrixRow = read_json(&tdir.join("matrix_row.json"))?;
        if row.config_hash != hash || row.seed != seed || row.task != t {
            return Err(Error::Integrity(format!("{}: row belongs to another run", tdir.display())));
        }
        for m in &mut state.matrices {
            let r = row
                .rows
                .get(&m.mode)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("{}: no {} row", tdir.display(), m.mode)))?;
            m.push_row(r)?;
        }
        if !(separate || t == done) {
            continue;
        }
        let (header, _, store) = checkpoint::load(&tdir.join("checkpoint.bin"))?;
        if header.provenance.config_hash != hash {
            return Err(Error::Integrity(format!(
                "{}: checkpoint from another configuration",
                tdir.display()
            )));
        }
        if separate {
            state.snapshots.push(store.shared.clone());
        }
        if t == done {
            state.store = store;
        }
    }
    if let Some(mem) = &mut state.memory {
        let snap: MemorySnapshot = read_json(&dir.join(format!("task_{done}")).join("memory.json"))?;
        *mem = guard.restore_memory(&snap, seed)?;
    }
    guard.resume_after(done)
}

fn run_seed(
    cfg: &ExperimentConfig,
    hash: &str,
    model: &HybridModel,
    datasets: &[TaskDataset],
    seed: u64,
    hook: &mut impl FnMut(&DataGuard, usize) -> Result<()>,
) -> Result<Vec<ResultMatrix>> {
    let dir = cfg.seed_dir(seed);
    let num_tasks = datasets.len();
    let policy = crate::methods::TrainPolicy {
        seed,
        ..cfg.policy.clone()
    };
    let method = policy.method;
    let separate = method.separate_scope().is_some();
    let mut guard = DataGuard::new(datasets.iter().map(|d| d.train.clone()).collect());
    let mut st = SeedState {
        store: ParameterStore::init(model, seed),
        matrices: cfg.effective_modes().into_iter().map(ResultMatrix::new).collect(),
        snapshots: vec![],
        memory: method
            .uses_memory()
            .then(|| RehearsalMemory::new(policy.memory_capacity, seed)),
    };
    let done = completed_tasks(&dir, num_tasks);
    if done > 0 {
        resume(&dir, hash, seed, done, separate, &mut guard, &mut st)?;
    }

    for t in done + 1..=num_tasks {
        guard.begin_task(t)?;
        hook(&guard, t)?;
        let run = train_task(model, &mut st.store, t, guard.train(t)?, &policy, st.memory.as_mut())?;
        log::info!(
            "seed {seed} task {t}: {method} trained in {:.1}s",
            run.wall_clock_secs
        );
        if separate {
            st.snapshots.push(st.store.shared.clone());
        }
        let mut rows = BTreeMap::new();
        for m in &mut st.matrices {
            let mut row = Vec::with_capacity(t);
            for j in 1..=t {
                let wer = if separate {
                    let dec = Decoder::new(model, &st.snapshots[j - 1], None).with_beam(cfg.beam);
                    evaluate(&dec, datasets, j, m.mode)?
                } else {
                    let dec = st.store.decoder(model).with_beam(cfg.beam);
                    evaluate(&dec, datasets, j, m.mode)?
                };
                row.push(wer);
            }
            rows.insert(m.mode, row.clone());
            m.push_row(row)?;
        }

        let tdir = dir.join(format!("task_{t}"));
        let stage = run.stages.last().map_or("none", |s| s.name.as_str()).to_string();
        checkpoint::save(
            &tdir.join("checkpoint.bin"),
            model,
            &st.store,
            Provenance {
                config_hash: hash.to_string(),
                task_index: t,
                stage,
            },
        )?;
        if let Some(mem) = &st.memory {
            write(&tdir.join("memory.json"), &serde_json::to_string(&mem.snapshot())?)?;
        }
        let log = RunLog {
            config_hash: hash.to_string(),
            overrides: policy.overrides(),
            run,
        };
        write(&tdir.join("run_log.json"), &serde_json::to_string_pretty(&log)?)?;
        let row = MatrixRow {
            config_hash: hash.to_string(),
            seed,
            task: t,
            rows,
        };
        write(&tdir.join("matrix_row.json"), &serde_json::to_string_pretty(&row)?)?;
    }
    Ok(st.matrices)
}

/// Reads the result matrices of a finished run directory.
pub fn load_run_dir(dir: &Path) -> Result<Vec<MethodRun>> {
    let cfg = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::load(&dir.join("config.json"))?
    };
    cfg.validate()?;
    let hash = cfg.hash()?;
    let storage = storage_for(&cfg)?;
    let mut runs = vec![];
    for &seed in &cfg.seeds {
        let sdir = cfg.seed_dir(seed);
        let mut matrices: Vec<ResultMatrix> = cfg.effective_modes().into_iter().map(ResultMatrix::new).collect();
        for t in 1..=cfg.tasks.len() {
            let path = sdir.join(format!("task_{t}")).join("matrix_row.json");
            let row: MatrixRow = read_json(&path)?;
            if row.config_hash != hash || row.seed != seed {
                return Err(Error::Integrity(format!("{}: row belongs to another run", path.display())));
            }
            for m in &mut matrices {
                let r = row
                    .rows
                    .get(&m.mode)
                    .cloned()
                    .ok_or_else(|| Error::Integrity(format!("{}: no {} row", path.display(), m.mode)))?;
                m.push_row(r)?;
            }
        }
        runs.push(MethodRun {
            method: cfg.policy.method,
            seed,
            config_hash: hash.clone(),
            matrices,
            storage: storage.clone(),
        });
    }
    Ok(runs)
}
