//! Hybrid CTC/attention encoder-decoder.
//!
//! Pre-norm Transformer encoder with one adapter slot per layer (between
//! self-attention and feedforward), a CTC head on the encoder output, and a
//! Transformer decoder trained with teacher-forced cross-entropy. The loss
//! is `c * ctc + (1 - c) * ce`.
//!
//! A Conformer encoder would place the slot between the convolution module
//! and the last feedforward module; only the Transformer variant exists here.

use serde::{Deserialize, Serialize};

use crate::adapters::{apply_on_tape, AdapterBank};
use crate::error::{Error, Result};
use crate::params::{GroupSet, ParamGroup, SharedParams};
use crate::tensor::rng::{normal_vec, Rng};
use crate::tensor::{Tape, Tensor, Var};

pub const BLANK: usize = 0;
/// Shared begin/end-of-sequence sentinel.
pub const SOS_EOS: usize = 1;
/// First id available to real tokens.
pub const FIRST_TOKEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub attention_dim: usize,
    pub feedforward_dim: usize,
    pub num_heads: usize,
    /// Output classes including blank and the sentinel.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub ctc_weight: f64,
    /// Adapter bottleneck `d`.
    pub adapter_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_encoder_layers: 4,
            num_decoder_layers: 2,
            attention_dim: 64,
            feedforward_dim: 256,
            num_heads: 4,
            vocab_size: 34,
            feature_dim: 16,
            ctc_weight: 0.3,
            adapter_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.num_encoder_layers == 0
            || c.attention_dim == 0
            || c.feedforward_dim == 0
            || c.num_heads == 0
            || c.feature_dim == 0
            || c.adapter_dim == 0
        {
            return Err(Error::Config(format!("model dimensions must be positive: {c:?}")));
        }
        if c.attention_dim % c.num_heads != 0 {
            return Err(Error::Config(format!(
                "attention_dim {} not divisible by num_heads {}",
                c.attention_dim, c.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&c.ctc_weight) {
            return Err(Error::Config(format!("ctc_weight {} outside [0, 1]", c.ctc_weight)));
        }
        if c.vocab_size < FIRST_TOKEN + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for tokens after blank and sentinel",
                c.vocab_size
            )));
        }
        Ok(())
    }
}

/// One labeled example: `F x f` frames and their token transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Tensor,
    pub tokens: Vec<usize>,
    pub task_id: Option<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Normal with `sigma = 1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug)]
struct AttnIdx {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct FfIdx {
    ln_g: usize,
    ln_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct DecLayerIdx {
    self_attn: AttnIdx,
    cross_attn: AttnIdx,
    ff: FfIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    input_w: usize,
    input_b: usize,
    enc: Vec<(AttnIdx, FfIdx)>,
    enc_ln_g: usize,
    enc_ln_b: usize,
    ctc_w: usize,
    ctc_b: usize,
    embed: usize,
    dec: Vec<DecLayerIdx>,
    dec_ln_g: usize,
    dec_ln_b: usize,
    out_w: usize,
    out_b: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.groups.push(group);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, i: usize, o: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), group, &[i, o], Init::FanIn(i));
        let b = self.add(format!("{prefix}.b"), group, &[o], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, group: ParamGroup, h: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.g"), group, &[h], Init::Ones);
        let b = self.add(format!("{prefix}.b"), group, &[h], Init::Zeros);
        (g, b)
    }

    fn attention(&mut self, prefix: &str, group: ParamGroup, h: usize) -> AttnIdx {
        let (ln_g, ln_b) = self.norm(&format!("{prefix}.ln"), group, h);
        let (wq, bq) = self.linear(&format!("{prefix}.q"), group, h, h);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), group, h, h);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), group, h, h);
        let (wo, bo) = self.linear(&format!("{prefix}.o"), group, h, h);
        AttnIdx {
            ln_g,
            ln_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn feedforward(&mut self, prefix: &str, group: ParamGroup, h: usize, ff: usize) -> FfIdx {
        let (ln_g, ln_b) = self.norm(&format!("{prefix}.ln"), group, h);
        let (w1, b1) = self.linear(&format!("{prefix}.1"), group, h, ff);
        let (w2, b2) = self.linear(&format!("{prefix}.2"), group, ff, h);
        FfIdx {
            ln_g,
            ln_b,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Parameter-free description of the network: config, tensor layout and
/// positional table. Parameters live in [`SharedParams`] and [`AdapterBank`].
#[derive(Clone, Debug)]
pub struct HybridModel {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

/// Tape handles for one forward pass.
pub struct Bound {
    pub shared: Vec<Var>,
    pub bank: Option<Vec<Var>>,
}

/// What receives gradients in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub shared: GroupSet,
    pub bank: bool,
}

impl Trainable {
    pub fn nothing() -> Self {
        Trainable {
            shared: GroupSet::none(),
            bank: false,
        }
    }

    pub fn everything() -> Self {
        Trainable {
            shared: GroupSet::all(),
            bank: true,
        }
    }
}

pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("positive dims")
}

impl HybridModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.attention_dim;
        let ff = config.feedforward_dim;
        let v = config.vocab_size;
        let mut b = LayoutBuilder {
            names: vec![],
            groups: vec![],
            shapes: vec![],
            inits: vec![],
        };
        let (input_w, input_b) =
            b.linear("enc.input", ParamGroup::EncoderInput, config.feature_dim, h);
        let enc = (0..config.num_encoder_layers)
            .map(|l| {
                let a = b.attention(&format!("enc.{l}.attn"), ParamGroup::EncoderAttention, h);
                let f = b.feedforward(&format!("enc.{l}.ff"), ParamGroup::EncoderFeedForward, h, ff);
                (a, f)
            })
            .collect();
        let (enc_ln_g, enc_ln_b) = b.norm("enc.final_ln", ParamGroup::EncoderFeedForward, h);
        let (ctc_w, ctc_b) = b.linear("ctc", ParamGroup::CtcHead, h, v);
        let embed = b.add("dec.embed".into(), ParamGroup::Decoder, &[v, h], Init::Normal(1.0));
        let dec = (0..config.num_decoder_layers)
            .map(|l| DecLayerIdx {
                self_attn: b.attention(&format!("dec.{l}.self"), ParamGroup::Decoder, h),
                cross_attn: b.attention(&format!("dec.{l}.src"), ParamGroup::Decoder, h),
                ff: b.feedforward(&format!("dec.{l}.ff"), ParamGroup::Decoder, h, ff),
            })
            .collect();
        let (dec_ln_g, dec_ln_b) = b.norm("dec.final_ln", ParamGroup::Decoder, h);
        let (out_w, out_b) = b.linear("dec.out", ParamGroup::Decoder, h, v);
        let layout = Layout {
            input_w,
            input_b,
            enc,
            enc_ln_g,
            enc_ln_b,
            ctc_w,
            ctc_b,
            embed,
            dec,
            dec_ln_g,
            dec_ln_b,
            out_w,
            out_b,
        };
        Ok(HybridModel {
            config,
            layout,
            names: b.names,
            groups: b.groups,
            shapes: b.shapes,
            inits: b.inits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_shared(&self, rng: &mut Rng) -> SharedParams {
        let tensors = self
            .shapes
            .iter()
            .zip(&self.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data = match *init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::FanIn(fan_in) => normal_vec(rng, n, 1.0 / (fan_in as f64).sqrt()),
                    Init::Normal(s) => normal_vec(rng, n, s),
                };
                Tensor::new(shape.clone(), data).expect("layout shapes are valid")
            })
            .collect();
        SharedParams::from_parts(self.names.clone(), self.groups.clone(), tensors)
    }

    pub fn new_first_bank(&self, rng: &mut Rng) -> Result<AdapterBank> {
        AdapterBank::new_bank(
            1,
            None,
            self.config.num_encoder_layers,
            self.config.attention_dim,
            self.config.adapter_dim,
            rng,
        )
    }

    /// Checks that `shared` has this model's layout.
    pub fn check_shared(&self, shared: &SharedParams) -> Result<()> {
        if shared.names() != self.names.as_slice()
            || shared
                .tensors()
                .iter()
                .zip(&self.shapes)
                .any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(Error::shape(
                "model",
                "shared parameters do not match the model layout",
            ));
        }
        Ok(())
    }

    pub fn check_bank(&self, bank: &AdapterBank) -> Result<()> {
        let h = self.config.attention_dim;
        if bank.layers() != self.config.num_encoder_layers || bank.model_dim() != h {
            return Err(Error::shape(
                "encode",
                format!(
                    "adapter bank has {} layers of dim {}, model has {} layers of dim {h}",
                    bank.layers(),
                    bank.model_dim(),
                    self.config.num_encoder_layers
                ),
            ));
        }
        Ok(())
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        shared: &SharedParams,
        bank: Option<&AdapterBank>,
        trainable: Trainable,
    ) -> Result<Bound> {
        let shared_vars = shared
            .tensors()
            .iter()
            .zip(shared.groups())
            .map(|(t, g)| tape.leaf(t.clone().with_grad(trainable.shared.contains(*g))))
            .collect();
        let bank_vars = match bank {
            Some(b) => {
                self.check_bank(b)?;
                Some(
                    b.tensors()
                        .map(|t| tape.leaf(t.clone().with_grad(trainable.bank)))
                        .collect(),
                )
            }
            None => None,
        };
        Ok(Bound {
            shared: shared_vars,
            bank: bank_vars,
        })
    }

    fn linear(&self, tape: &mut Tape, p: &[Var], x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, p[w])?;
        tape.add(y, p[b])
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &[Var],
        idx: &AttnIdx,
        query: Var,
        memory: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(tape, p, query, idx.wq, idx.bq)?;
        let k = self.linear(tape, p, memory, idx.wk, idx.bk)?;
        let v = self.linear(tape, p, memory, idx.wv, idx.bv)?;
        let heads = self.config.num_heads;
        let ctx = if heads == 1 {
            tape.scaled_dot_attention(q, k, v, causal)?
        } else {
            let dk = self.config.attention_dim / heads;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice(q, 1, hd * dk, dk)?;
                let kh = tape.slice(k, 1, hd * dk, dk)?;
                let vh = tape.slice(v, 1, hd * dk, dk)?;
                outs.push(tape.scaled_dot_attention(qh, kh, vh, causal)?);
            }
            tape.concat(&outs, 1)?
        };
        self.linear(tape, p, ctx, idx.wo, idx.bo)
    }

    fn feedforward(&self, tape: &mut Tape, p: &[Var], idx: &FfIdx, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, p[idx.ln_g], p[idx.ln_b])?;
        let hdn = self.linear(tape, p, n, idx.w1, idx.b1)?;
        let hdn = tape.relu(hdn);
        let out = self.linear(tape, p, hdn, idx.w2, idx.b2)?;
        tape.add(x, out)
    }

    /// Encoder states (`F x h`) on the tape.
    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, frames: &Tensor) -> Result<Var> {
        let f = self.config.feature_dim;
        if frames.ndim() != 2 || frames.cols() != f {
            return Err(Error::shape(
                "encode",
                format!("frames {:?}, model expects F x {f}", frames.shape()),
            ));
        }
        if !frames.is_finite() {
            return Err(Error::Invalid("frames contain non-finite values".into()));
        }
        let p = &bound.shared;
        let l = &self.layout;
        let x = tape.constant(frames.clone());
        let mut x = self.linear(tape, p, x, l.input_w, l.input_b)?;
        let pe = tape.constant(sinusoidal_positions(frames.rows(), self.config.attention_dim));
        x = tape.add(x, pe)?;
        for (layer, (attn, ff)) in l.enc.iter().enumerate() {
            let n = tape.layer_norm(x, p[attn.ln_g], p[attn.ln_b])?;
            let a = self.attention(tape, p, attn, n, n, false)?;
            x = tape.add(x, a)?;
            if let Some(bank) = &bound.bank {
                x = apply_on_tape(tape, &bank[layer * 6..(layer + 1) * 6], x)?;
            }
            x = self.feedforward(tape, p, ff, x)?;
        }
        tape.layer_norm(x, p[l.enc_ln_g], p[l.enc_ln_b])
    }

    /// Per-frame CTC log-probabilities (`F x v`).
    pub fn ctc_log_probs_on(&self, tape: &mut Tape, bound: &Bound, enc: Var) -> Result<Var> {
        let logits = self.linear(tape, &bound.shared, enc, self.layout.ctc_w, self.layout.ctc_b)?;
        Ok(tape.log_softmax(logits))
    }

    /// Decoder logits for each position of `inputs` (`len x v`).
    pub fn decoder_logits_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: Var,
        inputs: &[usize],
    ) -> Result<Var> {
        let p = &bound.shared;
        let l = &self.layout;
        let mut x = tape.embedding(p[l.embed], inputs)?;
        let pe = tape.constant(sinusoidal_positions(inputs.len(), self.config.attention_dim));
        x = tape.add(x, pe)?;
        for layer in &l.dec {
            let n = tape.layer_norm(x, p[layer.self_attn.ln_g], p[layer.self_attn.ln_b])?;
            let a = self.attention(tape, p, &layer.self_attn, n, n, true)?;
            x = tape.add(x, a)?;
            let n = tape.layer_norm(x, p[layer.cross_attn.ln_g], p[layer.cross_attn.ln_b])?;
            let a = self.attention(tape, p, &layer.cross_attn, n, enc, false)?;
            x = tape.add(x, a)?;
            x = self.feedforward(tape, p, &layer.ff, x)?;
        }
        let x = tape.layer_norm(x, p[l.dec_ln_g], p[l.dec_ln_b])?;
        self.linear(tape, p, x, l.out_w, l.out_b)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t < FIRST_TOKEN || t >= v) {
            return Err(Error::Invalid(format!(
                "token id {bad} is reserved or outside [{FIRST_TOKEN}, {v})"
            )));
        }
        Ok(())
    }

    pub fn ctc_loss_on(&self, tape: &mut Tape, bound: &Bound, enc: Var, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let logp = self.ctc_log_probs_on(tape, bound, enc)?;
        tape.ctc_loss(logp, tokens, BLANK)
    }

    /// Teacher-forced decoder inputs and targets: `[sos, y..]` and `[y.., eos]`.
    pub fn teacher_forcing(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(SOS_EOS);
        inputs.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        targets.push(SOS_EOS);
        (inputs, targets)
    }

    pub fn ce_loss_on(&self, tape: &mut Tape, bound: &Bound, enc: Var, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let (inputs, targets) = Self::teacher_forcing(tokens);
        let logits = self.decoder_logits_on(tape, bound, enc, &inputs)?;
        tape.cross_entropy(logits, &targets)
    }

    /// `c * ctc + (1 - c) * ce`; a head with zero weight is not evaluated.
    pub fn hybrid_loss_on(&self, tape: &mut Tape, bound: &Bound, utt: &Utterance) -> Result<Var> {
        let c = self.config.ctc_weight;
        let enc = self.encode_on(tape, bound, &utt.frames)?;
        if c == 1.0 {
            return self.ctc_loss_on(tape, bound, enc, &utt.tokens);
        }
        let ce = self.ce_loss_on(tape, bound, enc, &utt.tokens)?;
        if c == 0.0 {
            return Ok(ce);
        }
        let ctc = self.ctc_loss_on(tape, bound, enc, &utt.tokens)?;
        let a = tape.scale(ctc, c);
        let b = tape.scale(ce, 1.0 - c);
        tape.add(a, b)
    }

    pub fn encode(
        &self,
        shared: &SharedParams,
        bank: Option<&AdapterBank>,
        frames: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, shared, bank, Trainable::nothing())?;
        let enc = self.encode_on(&mut tape, &bound, frames)?;
        Ok(tape.value(enc).clone())
    }

    /// Binds only what a pass over precomputed encoder states needs.
    fn bind_heads(&self, tape: &mut Tape, shared: &SharedParams) -> Bound {
        let shared = shared.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        Bound { shared, bank: None }
    }

    pub fn ctc_log_probs(&self, shared: &SharedParams, enc_states: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_heads(&mut tape, shared);
        let enc = tape.constant(enc_states.clone());
        let lp = self.ctc_log_probs_on(&mut tape, &bound, enc)?;
        Ok(tape.value(lp).clone())
    }

    pub fn ctc_loss(&self, shared: &SharedParams, enc_states: &Tensor, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind_heads(&mut tape, shared);
        let enc = tape.constant(enc_states.clone());
        let loss = self.ctc_loss_on(&mut tape, &bound, enc, tokens)?;
        Ok(tape.value(loss).item())
    }

    pub fn ce_loss(&self, shared: &SharedParams, enc_states: &Tensor, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind_heads(&mut tape, shared);
        let enc = tape.constant(enc_states.clone());
        let loss = self.ce_loss_on(&mut tape, &bound, enc, tokens)?;
        Ok(tape.value(loss).item())
    }

    /// Decoder log-probabilities (`len x v`) for the given input prefix.
    pub fn decoder_log_probs(
        &self,
        shared: &SharedParams,
        enc_states: &Tensor,
        inputs: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_heads(&mut tape, shared);
        let enc = tape.constant(enc_states.clone());
        let logits = self.decoder_logits_on(&mut tape, &bound, enc, inputs)?;
        let lp = tape.log_softmax(logits);
        Ok(tape.value(lp).clone())
    }

    pub fn hybrid_loss(
        &self,
        shared: &SharedParams,
        bank: Option<&AdapterBank>,
        utt: &Utterance,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, shared, bank, Trainable::nothing())?;
        let loss = self.hybrid_loss_on(&mut tape, &bound, utt)?;
        Ok(tape.value(loss).item())
    }
}
