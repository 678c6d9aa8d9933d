mod support;

use adaptcl::adapters::AdapterBank;
use adaptcl::model::{HybridModel, ModelConfig, Trainable, Utterance, BLANK, SOS_EOS};
use adaptcl::params::SharedParams;
use adaptcl::tensor::rng::{normal_vec, stream};
use adaptcl::tensor::{Tape, Tensor};
use support::{ctc_brute_force, ctc_label_distribution, gradcheck, log_softmax_rows, randn};

fn tiny_config(enc: usize, dec: usize) -> ModelConfig {
    ModelConfig {
        num_encoder_layers: enc,
        num_decoder_layers: dec,
        attention_dim: 8,
        feedforward_dim: 12,
        num_heads: 2,
        vocab_size: 6,
        feature_dim: 3,
        ctc_weight: 0.3,
        adapter_dim: 4,
    }
}

fn tiny(seed: u64) -> (HybridModel, SharedParams) {
    let m = HybridModel::new(tiny_config(2, 1)).unwrap();
    let p = m.init_shared(&mut stream(seed, "init", 0));
    (m, p)
}

fn utterance(seed: u64, frames: usize, tokens: Vec<usize>) -> Utterance {
    Utterance {
        id: format!("u{seed}"),
        frames: randn(seed, "frames", &[frames, 3], 1.0),
        tokens,
        task_id: None,
    }
}

fn randomized_bank(m: &HybridModel, seed: u64) -> AdapterBank {
    let mut b = m.new_first_bank(&mut stream(seed, "bank", 0)).unwrap();
    let mut rng = stream(seed, "bank-perturb", 0);
    for t in b.tensors_mut() {
        let n = t.len();
        for (x, d) in t.data_mut().iter_mut().zip(normal_vec(&mut rng, n, 0.3)) {
            *x += d;
        }
    }
    b
}

#[test]
fn ctc_matches_path_enumeration_f2() {
    let logits = randn(3, "l", &[2, 3], 1.0);
    let lp = log_softmax_rows(&logits);
    let mut tape = Tape::new();
    let x = tape.constant(lp.clone());
    let l = tape.ctc_loss(x, &[1], 0).unwrap();
    let (a1, a2, b1, b2) = (lp.get(0, 1).exp(), lp.get(1, 1).exp(), lp.get(0, 0).exp(), lp.get(1, 0).exp());
    let expected = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
    assert!((tape.value(l).item() - expected).abs() < 1e-12);
    assert!((ctc_brute_force(&lp, &[1], 0) - expected).abs() < 1e-12);
}

#[test]
fn ctc_oracle_small_grid() {
    for seed in 0..20u64 {
        for frames in 1..=4usize {
            for vocab in 2..=4usize {
                let lp = log_softmax_rows(&randn(seed, "lp", &[frames, vocab], 2.0));
                let dist = ctc_label_distribution(&lp, 0);
                let total: f64 = dist.values().sum();
                assert!((total - 1.0).abs() < 1e-9);
                for (labels, &p) in &dist {
                    if labels.len() > 2 {
                        continue;
                    }
                    let mut tape = Tape::new();
                    let x = tape.constant(lp.clone());
                    let l = tape.ctc_loss(x, labels, 0).unwrap();
                    assert!((tape.value(l).item() + p.ln()).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn model_ctc_loss_matches_enumeration() {
    let (m, p) = tiny(1);
    let u = utterance(1, 3, vec![2, 4]);
    let enc = m.encode(&p, None, &u.frames).unwrap();
    let lp = m.ctc_log_probs(&p, &enc).unwrap();
    let loss = m.ctc_loss(&p, &enc, &u.tokens).unwrap();
    assert!((loss - ctc_brute_force(&lp, &u.tokens, BLANK)).abs() < 1e-8);
    // Empty transcript: the all-blank path.
    let blank: f64 = (0..3).map(|t| lp.get(t, BLANK)).sum();
    assert!((m.ctc_loss(&p, &enc, &[]).unwrap() + blank).abs() < 1e-12);
    // Too long for the available frames.
    assert!(matches!(
        m.ctc_loss(&p, &enc, &[2, 2, 3]),
        Err(adaptcl::Error::CtcLength { .. })
    ));
}

#[test]
fn ce_loss_matches_incremental_decoding() {
    for seed in 0..10 {
        let (m, p) = tiny(seed);
        let u = utterance(seed, 5, vec![3, 2, 5]);
        let enc = m.encode(&p, None, &u.frames).unwrap();
        let (inputs, targets) = HybridModel::teacher_forcing(&u.tokens);
        // Oracle: one decoder call per prefix, reading only the last row.
        let mut nll = 0.0;
        for i in 0..inputs.len() {
            let lp = m.decoder_log_probs(&p, &enc, &inputs[..=i]).unwrap();
            nll -= lp.get(i, targets[i]);
        }
        nll /= targets.len() as f64;
        let ce = m.ce_loss(&p, &enc, &u.tokens).unwrap();
        assert!((ce - nll).abs() < 1e-10, "seed {seed}: {ce} vs {nll}");
    }
}

#[test]
fn ce_loss_degenerate_outputs() {
    let (m, mut p) = tiny(4);
    let u = utterance(4, 4, vec![2, 3]);
    let enc = m.encode(&p, None, &u.frames).unwrap();
    p.get_mut("dec.out.w").unwrap().data_mut().fill(0.0);
    p.get_mut("dec.out.b").unwrap().data_mut().fill(0.0);
    let uniform = m.ce_loss(&p, &enc, &u.tokens).unwrap();
    assert!((uniform - 6f64.ln()).abs() < 1e-12);
    // An empty transcript is a single end-of-sequence prediction.
    p.get_mut("dec.out.b").unwrap().data_mut()[SOS_EOS] = 1e3;
    assert_eq!(m.ce_loss(&p, &enc, &[]).unwrap(), 0.0);
}

#[test]
fn hybrid_loss_combination() {
    let u = utterance(7, 5, vec![2, 5]);
    for c in [0.0, 0.3, 1.0] {
        let mut cfg = tiny_config(2, 1);
        cfg.ctc_weight = c;
        let m = HybridModel::new(cfg).unwrap();
        let p = m.init_shared(&mut stream(7, "init", 0));
        let enc = m.encode(&p, None, &u.frames).unwrap();
        let ctc = m.ctc_loss(&p, &enc, &u.tokens).unwrap();
        let ce = m.ce_loss(&p, &enc, &u.tokens).unwrap();
        let h = m.hybrid_loss(&p, None, &u).unwrap();
        if c == 0.0 {
            assert_eq!(h, ce);
        } else if c == 1.0 {
            assert_eq!(h, ctc);
        } else {
            assert!((h - (c * ctc + (1.0 - c) * ce)).abs() < 1e-12);
        }
    }
}

#[test]
fn hybrid_loss_ignores_task_id() {
    let (m, p) = tiny(2);
    let mut u = utterance(2, 4, vec![4, 3]);
    let a = m.hybrid_loss(&p, None, &u).unwrap();
    u.task_id = Some(5);
    assert_eq!(a, m.hybrid_loss(&p, None, &u).unwrap());
}

#[test]
fn identity_adapters_leave_encoder_unchanged() {
    for seed in 0..20 {
        let (m, p) = tiny(seed);
        let bank = m.new_first_bank(&mut stream(seed, "bank", 0)).unwrap();
        let frames = randn(seed, "f", &[6, 3], 3.0);
        let plain = m.encode(&p, None, &frames).unwrap();
        let with = m.encode(&p, Some(&bank), &frames).unwrap();
        assert_eq!(plain, with);
    }
}

#[test]
fn encode_is_deterministic_and_validates_inputs() {
    let (m, p) = tiny(9);
    let frames = randn(9, "f", &[4, 3], 1.0);
    let a = m.encode(&p, None, &frames).unwrap();
    let (m2, p2) = tiny(9);
    let b = m2.encode(&p2, None, &frames).unwrap();
    assert_eq!(a.le_bytes(), b.le_bytes());

    assert!(m.encode(&p, None, &randn(9, "f", &[4, 2], 1.0)).is_err());
    let other = HybridModel::new(ModelConfig {
        attention_dim: 4,
        adapter_dim: 2,
        ..tiny_config(2, 1)
    })
    .unwrap();
    let wrong_bank = other.new_first_bank(&mut stream(0, "b", 0)).unwrap();
    assert!(matches!(
        m.encode(&p, Some(&wrong_bank), &frames),
        Err(adaptcl::Error::Shape { .. })
    ));
    // Zero frames cannot even be represented.
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    let mut nan = frames.clone();
    nan.data_mut()[0] = f64::NAN;
    assert!(m.encode(&p, None, &nan).is_err());
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad_heads = ModelConfig {
        num_heads: 3,
        ..ModelConfig::default()
    };
    assert!(bad_heads.validate().is_err());
    let bad_c = ModelConfig {
        ctc_weight: 1.5,
        ..ModelConfig::default()
    };
    assert!(bad_c.validate().is_err());
    let tiny_vocab = ModelConfig {
        vocab_size: 2,
        ..ModelConfig::default()
    };
    assert!(tiny_vocab.validate().is_err());
}

#[test]
fn hybrid_loss_gradients_match_finite_differences() {
    let (m, p) = tiny(11);
    let bank = randomized_bank(&m, 11);
    let u = utterance(11, 5, vec![2, 4, 4]);
    let n_shared = p.len();
    let mut inputs: Vec<Tensor> = p.tensors().to_vec();
    inputs.extend(bank.tensors().cloned());
    let checked = gradcheck(&inputs, |tape, vars| {
        let bound = adaptcl::model::Bound {
            shared: vars[..n_shared].to_vec(),
            bank: Some(vars[n_shared..].to_vec()),
        };
        m.hybrid_loss_on(tape, &bound, &u).unwrap()
    })
    .unwrap_or_else(|e| panic!("{e:?}"));
    assert_eq!(checked, p.scalar_count() + bank.parameter_count());
}

#[test]
fn bind_respects_trainable_groups() {
    let (m, p) = tiny(3);
    let bank = m.new_first_bank(&mut stream(3, "bank", 0)).unwrap();
    let u = utterance(3, 4, vec![2, 3]);
    let mut tape = Tape::new();
    let only_bank = Trainable {
        shared: adaptcl::params::GroupSet::none(),
        bank: true,
    };
    let bound = m.bind(&mut tape, &p, Some(&bank), only_bank).unwrap();
    let loss = m.hybrid_loss_on(&mut tape, &bound, &u).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(bound.shared.iter().all(|v| g.get(*v).is_none()));
    assert!(bound.bank.unwrap().iter().all(|v| g.get(*v).is_some()));
}
