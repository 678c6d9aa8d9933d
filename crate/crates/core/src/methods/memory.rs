//! Fixed-capacity rehearsal memory with per-task quotas.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Utterance;
use crate::tensor::rng::{stream, Rng};

#[derive(Clone, Debug)]
pub struct RehearsalMemory {
    capacity: usize,
    seed: u64,
    task_ids: Vec<usize>,
    entries: Vec<(usize, Utterance)>,
}

/// Which utterances a memory holds, by task and id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub capacity: usize,
    pub tasks: Vec<usize>,
    pub entries: Vec<(usize, String)>,
}

/// Quota of each of `tasks` tasks (ascending ids): `capacity / tasks`, the
/// remainder going to the lowest ids.
pub fn quotas(capacity: usize, tasks: usize) -> Vec<usize> {
    if tasks == 0 {
        return vec![];
    }
    let (base, extra) = (capacity / tasks, capacity % tasks);
    (0..tasks).map(|i| base + usize::from(i < extra)).collect()
}

fn pick(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx = sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

impl RehearsalMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        RehearsalMemory {
            capacity,
            seed,
            task_ids: vec![],
            entries: vec![],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tasks added so far, even those that contributed nothing.
    pub fn tasks(&self) -> &[usize] {
        &self.task_ids
    }

    pub fn count_for(&self, task_id: usize) -> usize {
        self.entries.iter().filter(|e| e.0 == task_id).count()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.entries.iter().map(|e| &e.1)
    }

    /// Adds task `task_id` (above every stored task) and re-samples older
    /// tasks down to their new quotas.
    pub fn add_task(&mut self, task_id: usize, data: &[Utterance]) -> Result<()> {
        let mut tasks = self.task_ids.clone();
        if tasks.last().is_some_and(|&t| t >= task_id) {
            return Err(Error::Protocol(format!(
                "memory already holds task {} when adding task {task_id}",
                tasks.last().copied().unwrap_or_default()
            )));
        }
        tasks.push(task_id);
        let q = quotas(self.capacity, tasks.len());
        let mut kept = Vec::with_capacity(self.capacity);
        for (i, &t) in tasks.iter().enumerate() {
            let mut rng = stream(self.seed, &format!("memory/{task_id}"), t as u64);
            if t == task_id {
                for j in pick(data.len(), q[i], &mut rng) {
                    kept.push((t, data[j].clone()));
                }
            } else {
                let own: Vec<&(usize, Utterance)> = self.entries.iter().filter(|e| e.0 == t).collect();
                for j in pick(own.len(), q[i], &mut rng) {
                    kept.push(own[j].clone());
                }
            }
        }
        self.entries = kept;
        self.task_ids = tasks;
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }

    /// Up to `n` distinct stored utterances.
    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> Result<Vec<&Utterance>> {
        if self.entries.is_empty() {
            return Err(Error::Protocol("memory batch requested from an empty memory".into()));
        }
        Ok(pick(self.entries.len(), n, rng)
            .into_iter()
            .map(|i| &self.entries[i].1)
            .collect())
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            capacity: self.capacity,
            tasks: self.task_ids.clone(),
            entries: self.entries.iter().map(|(t, u)| (*t, u.id.clone())).collect(),
        }
    }

    /// Rebuilds a memory from a snapshot; `lookup(task, id)` resolves entries.
    pub fn restore(
        snapshot: &MemorySnapshot,
        seed: u64,
        mut lookup: impl FnMut(usize, &str) -> Option<Utterance>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(snapshot.entries.len());
        for (t, id) in &snapshot.entries {
            let u = lookup(*t, id)
                .ok_or_else(|| Error::Integrity(format!("memory entry {id} of task {t} not found")))?;
            entries.push((*t, u));
        }
        Ok(RehearsalMemory {
            capacity: snapshot.capacity,
            seed,
            task_ids: snapshot.tasks.clone(),
            entries,
        })
    }
}
