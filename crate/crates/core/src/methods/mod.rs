//! Sequential training procedures and the baselines they are compared with.

pub mod memory;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, BankRegistry};
use crate::error::{Error, Result};
use crate::inference::{corpus_wer, Decoder};
use crate::metrics::EvalMode;
use crate::model::{HybridModel, Trainable, Utterance};
use crate::params::{GroupSet, ParamGroup, SharedParams};
use crate::tensor::rng::stream;

pub use memory::{quotas, MemorySnapshot, RehearsalMemory};
pub use train::StageLog;
use train::{run_stage, touched_groups, Objective, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    FineTune,
    AFreeze,
    #[serde(rename = "ACFT")]
    ACft,
    #[serde(rename = "LWF")]
    Lwf,
    #[serde(rename = "ER")]
    Er,
    #[serde(rename = "KD")]
    Kd,
    SepModel,
    SepEnc,
    #[serde(rename = "SepEncFF")]
    SepEncFf,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::FineTune,
        Method::AFreeze,
        Method::ACft,
        Method::Lwf,
        Method::Er,
        Method::Kd,
        Method::SepModel,
        Method::SepEnc,
        Method::SepEncFf,
    ];

    pub fn uses_adapters(self) -> bool {
        matches!(self, Method::AFreeze | Method::ACft)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Method::Er | Method::Kd)
    }

    /// Separate-parameter bounds keep one checkpoint per task.
    pub fn separate_scope(self) -> Option<SepScope> {
        match self {
            Method::SepModel => Some(SepScope::Full),
            Method::SepEnc => Some(SepScope::Encoder),
            Method::SepEncFf => Some(SepScope::EncoderFf),
            _ => None,
        }
    }

    /// Whether evaluating in `mode` relies on knowing each utterance's task.
    pub fn needs_task_label(self, mode: EvalMode) -> bool {
        self.separate_scope().is_some() || (self.uses_adapters() && mode == EvalMode::TaskLabel)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::FineTune => "Fine-Tuning",
            Method::AFreeze => "A/Freeze",
            Method::ACft => "A/CFT",
            Method::Lwf => "LWF",
            Method::Er => "ER",
            Method::Kd => "KD",
            Method::SepModel => "Sep. Model",
            Method::SepEnc => "Sep. Enc",
            Method::SepEncFf => "Sep. Enc-FF",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SepScope {
    Full,
    Encoder,
    EncoderFf,
}

impl SepScope {
    /// Shared groups trained after the first task.
    pub fn trainable(self) -> GroupSet {
        match self {
            SepScope::Full => GroupSet::all(),
            SepScope::Encoder => GroupSet::all().without(ParamGroup::Decoder),
            SepScope::EncoderFf => GroupSet::none().with(ParamGroup::EncoderFeedForward),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPolicy {
    pub method: Method,
    pub lr_initial: f64,
    /// Defaults to `lr_initial / 10`.
    pub lr_ft: Option<f64>,
    /// Defaults to `lr_ft / 10`.
    pub cautious_lr: Option<f64>,
    /// Decay exponent: the coefficient is `10^omega`; `None` disables decay.
    pub weight_decay_exponent: Option<f64>,
    pub distill_weight: f64,
    pub memory_capacity: usize,
    pub epochs_initial: usize,
    pub epochs_adapt: usize,
    /// Second A/CFT stage.
    pub epochs_cautious: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        TrainPolicy {
            method: Method::FineTune,
            lr_initial: 1e-3,
            lr_ft: None,
            cautious_lr: None,
            weight_decay_exponent: Some(-5.0),
            distill_weight: 1.0,
            memory_capacity: 200,
            epochs_initial: 10,
            epochs_adapt: 5,
            epochs_cautious: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainPolicy {
    pub fn lr_ft(&self) -> f64 {
        self.lr_ft.unwrap_or(self.lr_initial / 10.0)
    }

    pub fn cautious_lr(&self) -> f64 {
        self.cautious_lr.unwrap_or(self.lr_ft() / 10.0)
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay_exponent.map_or(0.0, |w| 10f64.powf(w))
    }

    /// Messages for learning rates that break the tenfold ratios.
    pub fn overrides(&self) -> Vec<String> {
        let mut out = vec![];
        if let Some(lr) = self.lr_ft {
            if lr != self.lr_initial / 10.0 {
                out.push(format!(
                    "lr_ft overridden: {lr} instead of lr_initial/10 = {}",
                    self.lr_initial / 10.0
                ));
            }
        }
        if let Some(lr) = self.cautious_lr {
            if lr != self.lr_ft() / 10.0 {
                out.push(format!(
                    "cautious_lr overridden: {lr} instead of lr_ft/10 = {}",
                    self.lr_ft() / 10.0
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_initial, self.lr_ft(), self.cautious_lr()];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::Config(format!("learning rates must be finite and >= 0: {lrs:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.distill_weight.is_finite() && self.distill_weight >= 0.0) {
            return Err(Error::Config("distill_weight must be finite and >= 0".into()));
        }
        if self.method.uses_memory() && self.memory_capacity == 0 {
            return Err(Error::Config(format!("{} needs a positive memory_capacity", self.method)));
        }
        Ok(())
    }
}

/// Shared parameters plus the adapter banks learned so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub shared: SharedParams,
    pub banks: BankRegistry,
}

impl ParameterStore {
    pub fn init(model: &HybridModel, seed: u64) -> Self {
        ParameterStore {
            shared: model.init_shared(&mut stream(seed, "init", 0)),
            banks: BankRegistry::new(),
        }
    }

    /// Per-group and per-bank fingerprints, keyed `group.<name>` / `bank.<t>`.
    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .shared
            .fingerprints()
            .into_iter()
            .map(|(g, f)| (format!("group.{g}"), f))
            .collect();
        for b in self.banks.banks() {
            out.insert(format!("bank.{}", b.task_id), b.fingerprint());
        }
        out
    }

    pub fn decoder<'a>(&'a self, model: &'a HybridModel) -> Decoder<'a> {
        Decoder::new(model, &self.shared, Some(&self.banks))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub method: Method,
    pub task_id: usize,
    pub seed: u64,
    pub stages: Vec<StageLog>,
    pub fingerprints_before: BTreeMap<String, String>,
    pub fingerprints_after: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

/// Runs `stages` and checks that nothing outside them moved.
fn execute(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
    stages: &[Stage<'_>],
) -> Result<TrainRun> {
    let start = Instant::now();
    let before = store.fingerprints();
    let mut logs = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate() {
        logs.push(run_stage(model, store, data, st, policy.batch_size, policy.seed, task_id, i)?);
    }
    let after = store.fingerprints();
    let touched = touched_groups(stages);
    for g in ParamGroup::ALL.into_iter().filter(|g| !touched.contains(g)) {
        let key = format!("group.{g}");
        if before.get(&key) != after.get(&key) {
            return Err(Error::FreezeViolation(format!("task {task_id}: frozen group {g} changed")));
        }
    }
    let active: Vec<usize> = stages
        .iter()
        .filter(|s| s.trainable.bank && s.epochs > 0)
        .filter_map(|s| s.bank)
        .collect();
    for (key, fp) in &before {
        if let Some(t) = key.strip_prefix("bank.") {
            let t: usize = t.parse().expect("bank keys are numeric");
            if !active.contains(&t) && after.get(key) != Some(fp) {
                return Err(Error::FreezeViolation(format!(
                    "task {task_id}: bank of task {t} changed"
                )));
            }
        }
    }
    Ok(TrainRun {
        method: policy.method,
        task_id,
        seed: policy.seed,
        stages: logs,
        fingerprints_before: before,
        fingerprints_after: after,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn require_task(store: &ParameterStore, task_id: usize, uses_adapters: bool) -> Result<()> {
    if task_id < 2 {
        return Err(Error::Protocol(format!(
            "task {task_id} is not an adaptation task; use train_initial"
        )));
    }
    if uses_adapters && store.banks.len() != task_id - 1 {
        return Err(Error::AdapterChain(format!(
            "task {task_id} needs banks 1..{}, registry holds {}",
            task_id - 1,
            store.banks.len()
        )));
    }
    Ok(())
}

fn push_next_bank(store: &mut ParameterStore, task_id: usize) -> Result<()> {
    let prev = store
        .banks
        .last()
        .ok_or_else(|| Error::AdapterChain(format!("task {task_id} has no previous bank")))?;
    let bank = AdapterBank::new_bank(
        task_id,
        Some(prev),
        prev.layers(),
        prev.model_dim(),
        prev.bottleneck_dim(),
        &mut stream(0, "unused", 0),
    )?;
    store.banks.push(bank)
}

fn initial(
    model: &HybridModel,
    store: &mut ParameterStore,
    data: &[Utterance],
    policy: &TrainPolicy,
    with_bank: bool,
    decay: f64,
) -> Result<TrainRun> {
    if !store.banks.is_empty() {
        return Err(Error::AdapterChain("initial training needs an empty registry".into()));
    }
    if with_bank {
        let bank = model.new_first_bank(&mut stream(policy.seed, "bank", 1))?;
        store.banks.push(bank)?;
    }
    let stage = Stage {
        name: "initial",
        lr: policy.lr_initial,
        epochs: policy.epochs_initial,
        trainable: Trainable {
            shared: GroupSet::all(),
            bank: with_bank,
        },
        bank: with_bank.then_some(1),
        decay,
        objective: Objective::Hybrid,
    };
    let run = execute(model, store, 1, data, policy, &[stage])?;
    let fp = store.shared.fingerprint();
    store.banks.record_boundary(fp);
    Ok(run)
}

/// First task. Adapter methods train bank 1 jointly and decay the shared
/// parameters; other methods train a plain model.
pub fn train_initial(
    model: &HybridModel,
    store: &mut ParameterStore,
    data: &[Utterance],
    policy: &TrainPolicy,
) -> Result<TrainRun> {
    let adapters = policy.method.uses_adapters();
    let decay = if adapters { policy.weight_decay() } else { 0.0 };
    initial(model, store, data, policy, adapters, decay)
}

fn freeze_stage(task_id: usize, policy: &TrainPolicy) -> Stage<'static> {
    Stage {
        name: "adapt",
        lr: policy.lr_ft(),
        epochs: policy.epochs_adapt,
        trainable: Trainable {
            shared: GroupSet::none(),
            bank: true,
        },
        bank: Some(task_id),
        decay: 0.0,
        objective: Objective::Hybrid,
    }
}

/// Trains a new bank, copied from the previous one, with everything else frozen.
pub fn train_a_freeze(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
) -> Result<TrainRun> {
    require_task(store, task_id, true)?;
    push_next_bank(store, task_id)?;
    let run = execute(model, store, task_id, data, policy, &[freeze_stage(task_id, policy)])?;
    let fp = store.shared.fingerprint();
    store.banks.record_boundary(fp);
    Ok(run)
}

/// A/Freeze, then shared parameters and the new bank together at the
/// cautious rate. Earlier banks stay frozen.
pub fn train_a_cft(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
) -> Result<TrainRun> {
    require_task(store, task_id, true)?;
    push_next_bank(store, task_id)?;
    let stages = [
        freeze_stage(task_id, policy),
        Stage {
            name: "cautious",
            lr: policy.cautious_lr(),
            epochs: policy.epochs_cautious,
            trainable: Trainable {
                shared: GroupSet::all(),
                bank: true,
            },
            bank: Some(task_id),
            decay: 0.0,
            objective: Objective::Hybrid,
        },
    ];
    let run = execute(model, store, task_id, data, policy, &stages)?;
    let fp = store.shared.fingerprint();
    store.banks.record_boundary(fp);
    Ok(run)
}

fn plain_stage<'a>(name: &'static str, policy: &TrainPolicy, shared: GroupSet, objective: Objective<'a>) -> Stage<'a> {
    Stage {
        name,
        lr: policy.lr_ft(),
        epochs: policy.epochs_adapt,
        trainable: Trainable { shared, bank: false },
        bank: None,
        decay: 0.0,
        objective,
    }
}

pub fn train_fine_tune(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
) -> Result<TrainRun> {
    require_task(store, task_id, false)?;
    let stage = plain_stage("fine-tune", policy, GroupSet::all(), Objective::Hybrid);
    execute(model, store, task_id, data, policy, &[stage])
}

/// Fine-tuning plus distillation from `teacher`, the model as it was before
/// this task, on the new task's own utterances.
pub fn train_lwf(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
    teacher: &SharedParams,
) -> Result<TrainRun> {
    require_task(store, task_id, false)?;
    model.check_shared(teacher)?;
    let objective = Objective::Lwf {
        teacher,
        weight: policy.distill_weight,
    };
    let stage = plain_stage("lwf", policy, GroupSet::all(), objective);
    execute(model, store, task_id, data, policy, &[stage])
}

/// Joint training on new-task and memory batches; the memory then takes
/// in this task.
pub fn train_er(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    memory: &mut RehearsalMemory,
    policy: &TrainPolicy,
) -> Result<TrainRun> {
    require_task(store, task_id, false)?;
    let run = {
        let stage = plain_stage("er", policy, GroupSet::all(), Objective::Rehearse { memory });
        execute(model, store, task_id, data, policy, &[stage])?
    };
    memory.add_task(task_id, data)?;
    Ok(run)
}

/// Like LWF, but distills on memory batches.
pub fn train_kd(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    memory: &mut RehearsalMemory,
    policy: &TrainPolicy,
    teacher: &SharedParams,
) -> Result<TrainRun> {
    require_task(store, task_id, false)?;
    model.check_shared(teacher)?;
    if memory.is_empty() {
        return Err(Error::Protocol("KD needs a nonempty memory".into()));
    }
    let run = {
        let objective = Objective::Distill {
            teacher,
            memory,
            weight: policy.distill_weight,
        };
        let stage = plain_stage("kd", policy, GroupSet::all(), objective);
        execute(model, store, task_id, data, policy, &[stage])?
    };
    memory.add_task(task_id, data)?;
    Ok(run)
}

/// Continues from the previous task's model with the scope's groups
/// trainable. The caller keeps one snapshot per task.
pub fn train_separate(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
    scope: SepScope,
) -> Result<TrainRun> {
    require_task(store, task_id, false)?;
    let stage = plain_stage("separate", policy, scope.trainable(), Objective::Hybrid);
    execute(model, store, task_id, data, policy, &[stage])
}

/// Trains task `task_id` with the policy's method. Memory methods add the
/// task to `memory` afterwards.
pub fn train_task(
    model: &HybridModel,
    store: &mut ParameterStore,
    task_id: usize,
    data: &[Utterance],
    policy: &TrainPolicy,
    memory: Option<&mut RehearsalMemory>,
) -> Result<TrainRun> {
    let method = policy.method;
    let need_memory = || Error::Invalid(format!("{method} needs a rehearsal memory"));
    if task_id == 1 {
        let run = train_initial(model, store, data, policy)?;
        if method.uses_memory() {
            memory.ok_or_else(need_memory)?.add_task(1, data)?;
        }
        return Ok(run);
    }
    match method {
        Method::FineTune => train_fine_tune(model, store, task_id, data, policy),
        Method::AFreeze => train_a_freeze(model, store, task_id, data, policy),
        Method::ACft => train_a_cft(model, store, task_id, data, policy),
        Method::Lwf => {
            let teacher = store.shared.clone();
            train_lwf(model, store, task_id, data, policy, &teacher)
        }
        Method::Er => train_er(model, store, task_id, data, memory.ok_or_else(need_memory)?, policy),
        Method::Kd => {
            let teacher = store.shared.clone();
            train_kd(model, store, task_id, data, memory.ok_or_else(need_memory)?, policy, &teacher)
        }
        Method::SepModel | Method::SepEnc | Method::SepEncFf => {
            let scope = method.separate_scope().expect("separate method");
            train_separate(model, store, task_id, data, policy, scope)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdTrial {
    pub omega: f64,
    pub wer: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdSelection {
    pub reference_wer: f64,
    pub tolerance: f64,
    pub trials: Vec<WdTrial>,
    /// `None` means no candidate qualified: train without decay.
    pub selected: Option<f64>,
}

/// First-task WER (task-label decoding on `eval`) after adapter-based
/// initial training with decay coefficient `decay`.
pub fn first_task_wer(
    model: &HybridModel,
    train: &[Utterance],
    eval: &[Utterance],
    policy: &TrainPolicy,
    decay: f64,
) -> Result<f64> {
    let mut store = ParameterStore::init(model, policy.seed);
    initial(model, &mut store, train, policy, true, decay)?;
    corpus_wer(&store.decoder(model), eval, EvalMode::TaskLabel)
}

/// Largest exponent whose first-task WER stays within `tolerance` (relative,
/// 0.01 = 1%) of training without decay. Candidates are tried from the
/// largest down.
pub fn select_weight_decay(
    model: &HybridModel,
    train: &[Utterance],
    eval: &[Utterance],
    candidates: &[f64],
    tolerance: f64,
    policy: &TrainPolicy,
) -> Result<WdSelection> {
    if candidates.iter().any(|w| !(w.is_finite() && *w < 0.0)) {
        return Err(Error::Config("weight-decay exponents must be negative".into()));
    }
    if candidates.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config("weight-decay exponents must be sorted in descending order".into()));
    }
    let reference = first_task_wer(model, train, eval, policy, 0.0)?;
    let limit = reference * (1.0 + tolerance);
    let mut out = WdSelection {
        reference_wer: reference,
        tolerance,
        trials: vec![],
        selected: None,
    };
    for &omega in candidates {
        let wer = first_task_wer(model, train, eval, policy, 10f64.powf(omega))?;
        let accepted = wer <= limit;
        out.trials.push(WdTrial { omega, wer, accepted });
        if accepted {
            out.selected = Some(omega);
            return Ok(out);
        }
    }
    log::warn!("no weight-decay candidate within {:.1}% of the reference; training without decay", tolerance * 100.0);
    Ok(out)
}
