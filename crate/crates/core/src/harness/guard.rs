use crate::error::{Error, Result};
use crate::methods::{MemorySnapshot, RehearsalMemory};
use crate::model::Utterance;

/// Hands out training data one task at a time. Once task `t` has begun,
/// training data of earlier tasks is unreachable except through the
/// rehearsal memory.
#[derive(Debug)]
pub struct DataGuard {
    train: Vec<Vec<Utterance>>,
    current: usize,
}

impl DataGuard {
    pub fn new(train: Vec<Vec<Utterance>>) -> Self {
        DataGuard { train, current: 0 }
    }

    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn begin_task(&mut self, task_id: usize) -> Result<()> {
        if task_id != self.current + 1 || task_id > self.train.len() {
            return Err(Error::Protocol(format!(
                "task {task_id} cannot begin after task {} of {}",
                self.current,
                self.train.len()
            )));
        }
        self.current = task_id;
        Ok(())
    }

    pub fn train(&self, task_id: usize) -> Result<&[Utterance]> {
        if task_id != self.current {
            return Err(Error::Protocol(format!(
                "training data of task {task_id} requested while task {} is active",
                self.current
            )));
        }
        Ok(&self.train[task_id - 1])
    }

    /// Skips to the end of `task_id` when resuming a run.
    pub(crate) fn resume_after(&mut self, task_id: usize) -> Result<()> {
        if self.current != 0 || task_id > self.train.len() {
            return Err(Error::Protocol("resume must happen before any task begins".into()));
        }
        self.current = task_id;
        Ok(())
    }

    /// Rebuilds a saved memory. Only the utterances listed in the snapshot,
    /// which were the memory, are read.
    pub(crate) fn restore_memory(&self, snapshot: &MemorySnapshot, seed: u64) -> Result<RehearsalMemory> {
        RehearsalMemory::restore(snapshot, seed, |t, id| {
            self.train
                .get(t.checked_sub(1)?)?
                .iter()
                .find(|u| u.id == id)
                .cloned()
        })
    }
}
