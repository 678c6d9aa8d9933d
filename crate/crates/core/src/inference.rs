//! Beam-search decoding with hybrid rescoring, with a known task label or
//! label-free (conf-infer, avg-apt).

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::adapters::{average_banks, AdapterBank, BankRegistry};
use crate::error::{Error, Result};
use crate::metrics::EvalMode;
use crate::model::{Bound, HybridModel, Trainable, BLANK, FIRST_TOKEN, SOS_EOS};
use crate::params::SharedParams;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_BEAM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub decoder_log_prob: f64,
    /// `-inf` when the frames cannot carry the tokens under CTC.
    pub ctc_log_prob: f64,
    pub score: f64,
    /// Bank used: a task id, 0 for the averaged bank, `None` without adapters.
    pub bank: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeCounters {
    /// Beam searches run.
    pub decodes: u64,
    /// Bank averages computed.
    pub averagings: u64,
}

/// Decodes against one read-only snapshot of shared parameters and banks.
pub struct Decoder<'a> {
    model: &'a HybridModel,
    shared: &'a SharedParams,
    registry: Option<&'a BankRegistry>,
    beam: usize,
    decodes: Cell<u64>,
    averagings: Cell<u64>,
    averaged: RefCell<Option<(u64, AdapterBank)>>,
}

fn joint(c: f64, ctc: f64, dec: f64) -> f64 {
    if c == 0.0 {
        dec
    } else if c == 1.0 {
        ctc
    } else {
        c * ctc + (1.0 - c) * dec
    }
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a HybridModel, shared: &'a SharedParams, registry: Option<&'a BankRegistry>) -> Self {
        Decoder {
            model,
            shared,
            registry: registry.filter(|r| !r.is_empty()),
            beam: DEFAULT_BEAM,
            decodes: Cell::new(0),
            averagings: Cell::new(0),
            averaged: RefCell::new(None),
        }
    }

    pub fn with_beam(mut self, beam: usize) -> Self {
        self.beam = beam.max(1);
        self
    }

    pub fn counters(&self) -> DecodeCounters {
        DecodeCounters {
            decodes: self.decodes.get(),
            averagings: self.averagings.get(),
        }
    }

    pub fn has_banks(&self) -> bool {
        self.registry.is_some()
    }

    /// Beam search over the decoder, then hybrid rescoring of every
    /// finished hypothesis. Output length is capped at the frame count.
    ///
    /// Width `B` pools the finished hypotheses of widths 1, 2, 4, ... below
    /// `B` and of `B` itself, so a wider beam never scores worse.
    pub fn decode(&self, frames: &Tensor, bank: Option<&AdapterBank>) -> Result<Hypothesis> {
        self.decodes.set(self.decodes.get() + 1);
        let m = self.model;
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, self.shared, bank, Trainable::nothing())?;
        let enc = m.encode_on(&mut tape, &bound, frames)?;

        let mut widths = vec![];
        let mut w = 1;
        while w < self.beam {
            widths.push(w);
            w *= 2;
        }
        widths.push(self.beam);
        let mut steps = HashMap::new();
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for w in widths {
            for hyp in self.search(&mut tape, &bound, enc, frames.rows(), w, &mut steps)? {
                if !finished.contains(&hyp) {
                    finished.push(hyp);
                }
            }
        }

        let c = m.config().ctc_weight;
        let ctc_lp = m.ctc_log_probs_on(&mut tape, &bound, enc)?;
        let mut best: Option<Hypothesis> = None;
        for (tokens, dec) in finished {
            let ctc = match tape.ctc_loss(ctc_lp, &tokens, BLANK) {
                Ok(l) => -tape.value(l).item(),
                Err(Error::CtcLength { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            let score = joint(c, ctc, dec);
            let better = match &best {
                None => true,
                Some(b) => score.total_cmp(&b.score) == Ordering::Greater,
            };
            if better {
                best = Some(Hypothesis {
                    tokens,
                    decoder_log_prob: dec,
                    ctc_log_prob: ctc,
                    score,
                    bank: bank.map(|b| b.task_id),
                });
            }
        }
        best.ok_or_else(|| Error::Invalid("beam search finished no hypothesis".into()))
    }

    fn search(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: Var,
        max_len: usize,
        width: usize,
        steps: &mut HashMap<Vec<usize>, Vec<f64>>,
    ) -> Result<Vec<(Vec<usize>, f64)>> {
        let m = self.model;
        let v = m.config().vocab_size;
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![SOS_EOS], 0.0)];
        let mut finished = Vec::new();
        for step in 0..=max_len {
            let mut cands: Vec<(Vec<usize>, f64, bool)> = Vec::new();
            for (prefix, score) in &beams {
                if !steps.contains_key(prefix) {
                    let logits = m.decoder_logits_on(tape, bound, enc, prefix)?;
                    let lp = tape.log_softmax(logits);
                    steps.insert(prefix.clone(), tape.value(lp).row(prefix.len() - 1).to_vec());
                }
                let last = &steps[prefix];
                if step < max_len {
                    for (k, &l) in last.iter().enumerate().take(v).skip(FIRST_TOKEN) {
                        let mut p = prefix.clone();
                        p.push(k);
                        cands.push((p, score + l, false));
                    }
                }
                cands.push((prefix.clone(), score + last[SOS_EOS], true));
            }
            cands.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| b.2.cmp(&a.2))
                    .then_with(|| a.0.cmp(&b.0))
            });
            cands.truncate(width);
            beams.clear();
            for (p, s, ended) in cands {
                if ended {
                    finished.push((p[1..].to_vec(), s));
                } else {
                    beams.push((p, s));
                }
            }
            if beams.is_empty() {
                break;
            }
        }
        Ok(finished)
    }

    fn registry(&self) -> Result<&'a BankRegistry> {
        self.registry
            .ok_or_else(|| Error::Invalid("label-free decoding needs at least one adapter bank".into()))
    }

    /// Decodes with the bank of `task_id`, or without adapters if the model
    /// has none.
    pub fn decode_task(&self, frames: &Tensor, task_id: usize) -> Result<Hypothesis> {
        match self.registry {
            None => self.decode(frames, None),
            Some(r) => {
                let bank = r
                    .get(task_id)
                    .ok_or_else(|| Error::Invalid(format!("no adapter bank for task {task_id}")))?;
                self.decode(frames, Some(bank))
            }
        }
    }

    /// One decode per bank; the highest joint score wins, ties going to the
    /// lowest task id.
    pub fn conf_infer(&self, frames: &Tensor) -> Result<(Hypothesis, usize)> {
        let reg = self.registry()?;
        let mut best: Option<(Hypothesis, usize)> = None;
        for (i, bank) in reg.banks().iter().enumerate() {
            let h = self.decode(frames, Some(bank))?;
            let better = match &best {
                None => true,
                Some((b, _)) => h.score.total_cmp(&b.score) == Ordering::Greater,
            };
            if better {
                best = Some((h, i + 1));
            }
        }
        Ok(best.expect("registry is nonempty"))
    }

    /// Decodes once through the elementwise mean of all banks.
    pub fn avg_apt(&self, frames: &Tensor) -> Result<Hypothesis> {
        let reg = self.registry()?;
        let version = reg.version();
        let stale = !matches!(&*self.averaged.borrow(), Some((v, _)) if *v == version);
        if stale {
            let banks: Vec<&AdapterBank> = reg.banks().iter().collect();
            let avg = average_banks(&banks)?;
            self.averagings.set(self.averagings.get() + 1);
            *self.averaged.borrow_mut() = Some((version, avg));
        }
        let cache = self.averaged.borrow();
        let (_, avg) = cache.as_ref().expect("filled above");
        self.decode(frames, Some(avg))
    }

    /// Decodes under `mode`; returns the hypothesis and the task id it was
    /// attributed to, if any.
    pub fn decode_mode(
        &self,
        frames: &Tensor,
        mode: EvalMode,
        task_label: Option<usize>,
    ) -> Result<(Hypothesis, Option<usize>)> {
        match mode {
            EvalMode::TaskLabel => {
                let t = task_label
                    .ok_or_else(|| Error::Invalid("task_label mode needs a task id per utterance".into()))?;
                Ok((self.decode_task(frames, t)?, Some(t)))
            }
            EvalMode::ConfInfer => {
                let (h, t) = self.conf_infer(frames)?;
                Ok((h, Some(t)))
            }
            EvalMode::AvgApt => Ok((self.avg_apt(frames)?, None)),
        }
    }
}

/// Corpus-level WER (%): total edits over total reference tokens. Each
/// utterance's own task id serves as its label in `task_label` mode.
pub fn corpus_wer(decoder: &Decoder<'_>, utts: &[crate::model::Utterance], mode: EvalMode) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for u in utts {
        let (h, _) = decoder.decode_mode(&u.frames, mode, u.task_id)?;
        edits += crate::metrics::levenshtein(&u.tokens, &h.tokens);
        words += u.tokens.len();
    }
    if words == 0 {
        return Err(Error::Invalid("corpus_wer needs reference tokens".into()));
    }
    Ok(100.0 * edits as f64 / words as f64)
}
