//! The shared mini-batch loop every method is built from.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::memory::RehearsalMemory;
use crate::methods::ParameterStore;
use crate::model::{HybridModel, Trainable, Utterance};
use crate::optim::Adam;
use crate::params::{ParamGroup, SharedParams};
use crate::tensor::rng::stream;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy)]
pub(crate) enum Objective<'a> {
    Hybrid,
    /// Distill from `teacher` on the new-task batch.
    Lwf { teacher: &'a SharedParams, weight: f64 },
    /// Hybrid loss on a memory batch as well.
    Rehearse { memory: &'a RehearsalMemory },
    /// Distill from `teacher` on a memory batch.
    Distill {
        teacher: &'a SharedParams,
        memory: &'a RehearsalMemory,
        weight: f64,
    },
}

pub(crate) struct Stage<'a> {
    pub name: &'static str,
    pub lr: f64,
    pub epochs: usize,
    pub trainable: Trainable,
    /// Task id of the bank in the forward pass.
    pub bank: Option<usize>,
    /// L2 coefficient on trainable shared tensors.
    pub decay: f64,
    pub objective: Objective<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    pub lr: f64,
    pub epochs: usize,
    pub trainable_groups: Vec<String>,
    pub bank_trainable: bool,
    pub weight_decay: f64,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
}

enum Slot {
    Shared(usize),
    Bank(usize),
}

/// Decoder log-probabilities of `teacher` on `utt`'s teacher-forced inputs.
fn teacher_targets(model: &HybridModel, teacher: &SharedParams, utt: &Utterance) -> Result<Tensor> {
    let enc = model.encode(teacher, None, &utt.frames)?;
    let (inputs, _) = HybridModel::teacher_forcing(&utt.tokens);
    model.decoder_log_probs(teacher, &enc, &inputs)
}

fn distill_on(
    model: &HybridModel,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    utt: &Utterance,
    target: &Tensor,
) -> Result<Var> {
    let enc = model.encode_on(tape, bound, &utt.frames)?;
    let (inputs, _) = HybridModel::teacher_forcing(&utt.tokens);
    let logits = model.decoder_logits_on(tape, bound, enc, &inputs)?;
    let lp = tape.log_softmax(logits);
    tape.kl_div(lp, target)
}

/// Adds `scale * grad` for every slot into `acc`.
fn accumulate(acc: &mut [Option<Tensor>], slots: &[Var], grads: &Gradients, scale: f64) {
    for (a, v) in acc.iter_mut().zip(slots) {
        if let Some(g) = grads.get(*v) {
            match a {
                Some(t) => t.add_assign_scaled(g, scale),
                None => *a = Some(g.map(|x| x * scale)),
            }
        }
    }
}

pub(crate) fn run_stage(
    model: &HybridModel,
    store: &mut ParameterStore,
    data: &[Utterance],
    stage: &Stage<'_>,
    batch_size: usize,
    seed: u64,
    task_id: usize,
    index: usize,
) -> Result<StageLog> {
    if data.is_empty() {
        return Err(Error::Invalid(format!("task {task_id}: no training data")));
    }
    let slots: Vec<Slot> = {
        let mut s: Vec<Slot> = store
            .shared
            .groups()
            .iter()
            .enumerate()
            .filter(|(_, g)| stage.trainable.shared.contains(**g))
            .map(|(i, _)| Slot::Shared(i))
            .collect();
        if stage.trainable.bank {
            let bank = stage
                .bank
                .and_then(|t| store.banks.get(t))
                .ok_or_else(|| Error::Invalid(format!("stage {} trains a missing bank", stage.name)))?;
            s.extend((0..bank.tensors().count()).map(Slot::Bank));
        }
        s
    };
    let sizes: Vec<usize> = {
        let bank: Vec<usize> = match stage.bank.and_then(|t| store.banks.get(t)) {
            Some(b) => b.tensors().map(Tensor::len).collect(),
            None => vec![],
        };
        slots
            .iter()
            .map(|s| match s {
                Slot::Shared(i) => store.shared.tensors()[*i].len(),
                Slot::Bank(i) => bank[*i],
            })
            .collect()
    };
    let mut opt = Adam::new(stage.lr, &sizes);
    let batch_size = batch_size.max(1);
    // Keyed by position, not name, so methods that differ only in their
    // objective see the same batches.
    let stream_name = format!("{task_id}/{index}");
    let mut log = StageLog {
        name: stage.name.to_string(),
        lr: stage.lr,
        epochs: stage.epochs,
        trainable_groups: stage.trainable.shared.iter().map(|g| g.to_string()).collect(),
        bank_trainable: stage.trainable.bank,
        weight_decay: stage.decay,
        steps: 0,
        epoch_losses: vec![],
    };

    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(seed, &format!("shuffle/{stream_name}"), epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; slots.len()];
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            let bank = stage.bank.and_then(|t| store.banks.get(t));
            for &i in batch {
                let utt = &data[i];
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &store.shared, bank, stage.trainable)?;
                let mut loss = model.hybrid_loss_on(&mut tape, &bound, utt)?;
                if let Objective::Lwf { teacher, weight } = stage.objective {
                    if weight != 0.0 {
                        let target = teacher_targets(model, teacher, utt)?;
                        let kl = distill_on(model, &mut tape, &bound, utt, &target)?;
                        let kl = tape.scale(kl, weight);
                        loss = tape.add(loss, kl)?;
                    }
                }
                batch_loss += tape.value(loss).item() * scale;
                let grads = tape.backward(loss)?;
                let vars = slot_vars(&slots, &bound);
                accumulate(&mut acc, &vars, &grads, scale);
            }
            let memory_part = match stage.objective {
                Objective::Rehearse { memory } => Some((memory, None, 1.0)),
                Objective::Distill {
                    teacher,
                    memory,
                    weight,
                } if weight != 0.0 => Some((memory, Some(teacher), weight)),
                _ => None,
            };
            if let Some((memory, teacher, weight)) = memory_part {
                let mut rng = stream(seed, &format!("memory-batch/{stream_name}"), log.steps);
                let mem = memory.sample_batch(batch.len(), &mut rng)?;
                let mscale = weight / mem.len() as f64;
                for utt in mem {
                    let mut tape = Tape::new();
                    let bound = model.bind(&mut tape, &store.shared, bank, stage.trainable)?;
                    let loss = match teacher {
                        None => model.hybrid_loss_on(&mut tape, &bound, utt)?,
                        Some(t) => {
                            let target = teacher_targets(model, t, utt)?;
                            distill_on(model, &mut tape, &bound, utt, &target)?
                        }
                    };
                    batch_loss += tape.value(loss).item() * mscale;
                    let grads = tape.backward(loss)?;
                    let vars = slot_vars(&slots, &bound);
                    accumulate(&mut acc, &vars, &grads, mscale);
                }
            }

            opt.begin_step();
            for (k, (slot, g)) in slots.iter().zip(&acc).enumerate() {
                match slot {
                    Slot::Shared(i) => {
                        let p = &mut store.shared.tensors_mut()[*i];
                        opt.update(k, p, g.as_ref(), stage.decay);
                    }
                    Slot::Bank(i) => {
                        let t = stage.bank.expect("bank slots imply a bank");
                        let bank = store.banks.get_mut(t).expect("checked above");
                        let p = bank.tensors_mut().nth(*i).expect("slot in range");
                        opt.update(k, p, g.as_ref(), 0.0);
                    }
                }
            }
            log.steps += 1;
            epoch_loss += batch_loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Invalid(format!(
                "task {task_id}, stage {}: loss diverged in epoch {epoch}",
                stage.name
            )));
        }
        log::debug!("task {task_id} {} epoch {epoch}: loss {mean:.4}", stage.name);
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

fn slot_vars(slots: &[Slot], bound: &crate::model::Bound) -> Vec<Var> {
    slots
        .iter()
        .map(|s| match s {
            Slot::Shared(i) => bound.shared[*i],
            Slot::Bank(i) => bound.bank.as_ref().expect("bank bound")[*i],
        })
        .collect()
}

/// Shared groups a set of stages may change.
pub(crate) fn touched_groups(stages: &[Stage<'_>]) -> Vec<ParamGroup> {
    ParamGroup::ALL
        .into_iter()
        .filter(|g| stages.iter().any(|s| s.epochs > 0 && s.trainable.shared.contains(*g)))
        .collect()
}
