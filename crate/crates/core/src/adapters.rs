//! Task-specific bottleneck adapters.
//!
//! An adapter maps `x -> x + up(relu(down(layer_norm(x))))`. One adapter sits
//! in every encoder layer between the self-attention and feedforward
//! sublayers; the set of adapters for one task is an [`AdapterBank`]. Banks
//! for task `t > 1` start as a copy of bank `t - 1`. Bank 1 starts with a zero
//! up-projection, which makes it an exact identity map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::fingerprint;
use crate::tensor::rng::{normal_vec, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Tensors of an adapter in their fixed flattening order.
pub const ADAPTER_TENSORS: [&str; 6] = [
    "ln_gain",
    "ln_bias",
    "down_weight",
    "down_bias",
    "up_weight",
    "up_bias",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `h x d`
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    /// `d x h`
    pub up_weight: Tensor,
    pub up_bias: Tensor,
}

impl Adapter {
    /// Identity-initialized adapter: random down-projection with
    /// `sigma = 1/sqrt(h)`, zero up-projection.
    pub fn identity_init(h: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if h == 0 || d == 0 {
            return Err(Error::Invalid(format!("adapter dims must be positive, got h={h} d={d}")));
        }
        Ok(Adapter {
            ln_gain: Tensor::ones(&[h]),
            ln_bias: Tensor::zeros(&[h]),
            down_weight: Tensor::matrix(h, d, normal_vec(rng, h * d, 1.0 / (h as f64).sqrt()))?,
            down_bias: Tensor::zeros(&[d]),
            up_weight: Tensor::zeros(&[d, h]),
            up_bias: Tensor::zeros(&[h]),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.down_bias.len()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.ln_gain,
            &self.ln_bias,
            &self.down_weight,
            &self.down_bias,
            &self.up_weight,
            &self.up_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.down_weight,
            &mut self.down_bias,
            &mut self.up_weight,
            &mut self.up_bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Applies the adapter to an `h`-vector or, row-wise, to an `F x h` matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.model_dim();
        if x.cols() != h || x.ndim() > 2 {
            return Err(Error::shape(
                "apply_adapter",
                format!("input {:?} for adapter of dim {h}", x.shape()),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Invalid("adapter input is not finite".into()));
        }
        let shape = x.shape().to_vec();
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.tensors().iter().map(|t| tape.constant((*t).clone())).collect();
        let xv = tape.constant(x.clone().reshape(vec![x.rows(), h])?);
        let out = apply_on_tape(&mut tape, &vars, xv)?;
        tape.value(out).clone().reshape(shape)
    }
}

/// Records one adapter on `tape`. `p` holds the six adapter tensors in
/// [`ADAPTER_TENSORS`] order.
pub(crate) fn apply_on_tape(tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
    let n = tape.layer_norm(x, p[0], p[1])?;
    let down = tape.matmul(n, p[2])?;
    let down = tape.add(down, p[3])?;
    let act = tape.relu(down);
    let up = tape.matmul(act, p[4])?;
    let up = tape.add(up, p[5])?;
    tape.add(x, up)
}

/// One adapter per encoder layer, owned by a single task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBank {
    /// 1-based task id; 0 marks a synthetic (averaged) bank.
    pub task_id: usize,
    pub adapters: Vec<Adapter>,
}

impl AdapterBank {
    /// Creates the bank for task `task_id`. Task 1 gets a fresh identity
    /// bank; later tasks copy the previous task's bank.
    pub fn new_bank(
        task_id: usize,
        previous: Option<&AdapterBank>,
        layers: usize,
        h: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<AdapterBank> {
        match (task_id, previous) {
            (0, _) => Err(Error::AdapterChain("task ids start at 1".into())),
            (1, None) => {
                if layers == 0 {
                    return Err(Error::Invalid("adapter bank needs at least one layer".into()));
                }
                let adapters = (0..layers)
                    .map(|_| Adapter::identity_init(h, d, rng))
                    .collect::<Result<_>>()?;
                Ok(AdapterBank {
                    task_id: 1,
                    adapters,
                })
            }
            (1, Some(_)) => Err(Error::AdapterChain(
                "task 1 must not be initialized from a previous bank".into(),
            )),
            (t, None) => Err(Error::AdapterChain(format!(
                "task {t} needs the bank of task {}",
                t - 1
            ))),
            (t, Some(prev)) if prev.task_id + 1 != t => Err(Error::AdapterChain(format!(
                "task {t} cannot start from the bank of task {}",
                prev.task_id
            ))),
            (t, Some(prev)) => {
                let mut bank = prev.clone();
                bank.task_id = t;
                Ok(bank)
            }
        }
    }

    pub fn layers(&self) -> usize {
        self.adapters.len()
    }

    pub fn model_dim(&self) -> usize {
        self.adapters[0].model_dim()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.adapters[0].bottleneck_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(Adapter::parameter_count).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.adapters.iter().flat_map(|a| a.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.adapters.iter_mut().flat_map(|a| a.tensors_mut())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers())
            .flat_map(|l| ADAPTER_TENSORS.iter().map(move |n| format!("adapter.{l}.{n}")))
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        let names = self.tensor_names();
        fingerprint(names.iter().map(String::as_str).zip(self.tensors()))
    }

    fn check_homogeneous(&self, other: &AdapterBank) -> Result<()> {
        let same = self.layers() == other.layers()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::shape(
                "average_banks",
                format!(
                    "bank {} ({} layers, d={}) vs bank {} ({} layers, d={})",
                    self.task_id,
                    self.layers(),
                    self.bottleneck_dim(),
                    other.task_id,
                    other.layers(),
                    other.bottleneck_dim()
                ),
            ))
        }
    }
}

/// Elementwise mean of `banks`. Each element is summed in sorted order, so
/// the result does not depend on the order of the input list.
pub fn average_banks(banks: &[&AdapterBank]) -> Result<AdapterBank> {
    let first = *banks
        .first()
        .ok_or_else(|| Error::Invalid("average_banks needs at least one bank".into()))?;
    for b in &banks[1..] {
        first.check_homogeneous(b)?;
    }
    let mut out = first.clone();
    out.task_id = 0;
    let n = banks.len() as f64;
    let sources: Vec<Vec<&Tensor>> = banks.iter().map(|b| b.tensors().collect()).collect();
    let mut column = Vec::with_capacity(banks.len());
    for (ti, dst) in out.tensors_mut().enumerate() {
        for (ei, slot) in dst.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(sources.iter().map(|s| s[ti].data()[ei]));
            column.sort_by(f64::total_cmp);
            *slot = column.iter().sum::<f64>() / n;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub per_adapter: usize,
    pub per_bank: usize,
}

/// Closed-form adapter size: `2h + (h*d + d) + (d*h + h)` per adapter.
pub fn count_parameters(h: usize, d: usize, layers: usize) -> Result<ParameterCount> {
    if h == 0 || d == 0 || layers == 0 {
        return Err(Error::Invalid(format!(
            "parameter count needs positive dims, got h={h} d={d} layers={layers}"
        )));
    }
    let per_adapter = 2 * h + (h * d + d) + (d * h + h);
    Ok(ParameterCount {
        per_adapter,
        per_bank: layers * per_adapter,
    })
}

/// Ordered banks `1..=T` plus the shared-parameter fingerprint recorded at
/// the end of each task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankRegistry {
    banks: Vec<AdapterBank>,
    shared_fingerprints: Vec<String>,
    version: u64,
}

impl BankRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    /// Bumped on every mutation; used to invalidate cached averages.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn banks(&self) -> &[AdapterBank] {
        &self.banks
    }

    pub fn get(&self, task_id: usize) -> Option<&AdapterBank> {
        task_id.checked_sub(1).and_then(|i| self.banks.get(i))
    }

    pub fn get_mut(&mut self, task_id: usize) -> Option<&mut AdapterBank> {
        self.version += 1;
        task_id.checked_sub(1).and_then(|i| self.banks.get_mut(i))
    }

    pub fn last(&self) -> Option<&AdapterBank> {
        self.banks.last()
    }

    pub fn push(&mut self, bank: AdapterBank) -> Result<()> {
        let expected = self.banks.len() + 1;
        if bank.task_id != expected {
            return Err(Error::AdapterChain(format!(
                "registry expects task {expected}, got bank for task {}",
                bank.task_id
            )));
        }
        if let Some(first) = self.banks.first() {
            first.check_homogeneous(&bank)?;
        }
        self.banks.push(bank);
        self.version += 1;
        Ok(())
    }

    pub fn record_boundary(&mut self, shared_fingerprint: String) {
        self.shared_fingerprints.push(shared_fingerprint);
    }

    pub fn boundary_fingerprints(&self) -> &[String] {
        &self.shared_fingerprints
    }

    pub(crate) fn from_parts(banks: Vec<AdapterBank>, shared_fingerprints: Vec<String>) -> Result<Self> {
        let mut reg = BankRegistry::new();
        for b in banks {
            reg.push(b)?;
        }
        reg.shared_fingerprints = shared_fingerprints;
        Ok(reg)
    }
}
