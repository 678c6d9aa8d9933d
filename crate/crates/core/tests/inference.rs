mod support;

use adaptcl::adapters::{AdapterBank, BankRegistry};
use adaptcl::inference::{corpus_wer, Decoder, Hypothesis};
use adaptcl::metrics::EvalMode;
use adaptcl::model::{HybridModel, ModelConfig, FIRST_TOKEN, SOS_EOS};
use adaptcl::params::SharedParams;
use adaptcl::tensor::rng::{normal_vec, stream};
use adaptcl::tensor::Tensor;
use support::{randn, tiny};

fn seeded(seed: u64) -> (HybridModel, SharedParams) {
    let m = HybridModel::new(tiny::model()).unwrap();
    let p = m.init_shared(&mut stream(seed, "init", 0));
    (m, p)
}

fn perturbed_bank(m: &HybridModel, task_id: usize, seed: u64) -> AdapterBank {
    let mut b = m.new_first_bank(&mut stream(seed, "bank", 0)).unwrap();
    b.task_id = task_id;
    let mut rng = stream(seed, "perturb", task_id as u64);
    for t in b.tensors_mut() {
        let n = t.len();
        for (x, d) in t.data_mut().iter_mut().zip(normal_vec(&mut rng, n, 0.5)) {
            *x += d;
        }
    }
    b
}

fn registry(banks: Vec<AdapterBank>) -> BankRegistry {
    let mut r = BankRegistry::new();
    for b in banks {
        r.push(b).unwrap();
    }
    r
}

fn frames(seed: u64, n: usize) -> Tensor {
    randn(seed, "frames", &[n, 8], 1.0)
}

/// Step-by-step argmax over the decoder, ties to the lowest id, ending on
/// the sentinel or at the frame limit.
fn greedy(m: &HybridModel, p: &SharedParams, bank: Option<&AdapterBank>, x: &Tensor) -> (Vec<usize>, f64) {
    let enc = m.encode(p, bank, x).unwrap();
    let v = m.config().vocab_size;
    let mut prefix = vec![SOS_EOS];
    let mut total = 0.0;
    loop {
        let lp = m.decoder_log_probs(p, &enc, &prefix).unwrap();
        let row = lp.row(prefix.len() - 1);
        let mut best = (SOS_EOS, row[SOS_EOS]);
        if prefix.len() - 1 < x.rows() {
            for (k, &l) in row.iter().enumerate().take(v).skip(FIRST_TOKEN) {
                if l > best.1 {
                    best = (k, l);
                }
            }
        }
        total += best.1;
        if best.0 == SOS_EOS {
            return (prefix[1..].to_vec(), total);
        }
        prefix.push(best.0);
    }
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..6 {
        let (m, p) = seeded(seed);
        let bank = perturbed_bank(&m, 1, seed);
        for (i, b) in [None, Some(&bank)].into_iter().enumerate() {
            let x = frames(seed * 10 + i as u64, 6);
            let reg;
            let dec = if b.is_some() {
                reg = registry(vec![bank.clone()]);
                Decoder::new(&m, &p, Some(&reg)).with_beam(1)
            } else {
                Decoder::new(&m, &p, None).with_beam(1)
            };
            let h = dec.decode(&x, b).unwrap();
            let (tokens, lp) = greedy(&m, &p, b, &x);
            assert_eq!(h.tokens, tokens, "seed {seed}");
            assert!((h.decoder_log_prob - lp).abs() < 1e-9, "seed {seed}: {} vs {lp}", h.decoder_log_prob);
        }
    }
}

/// Decoder whose every layer is switched off, so each position's output
/// depends only on its input token: `succ[a]` follows `a`.
fn one_hot_model(target: &[usize]) -> (HybridModel, SharedParams) {
    let cfg = ModelConfig {
        attention_dim: 16,
        ..tiny::model()
    };
    let (h, v) = (cfg.attention_dim, cfg.vocab_size);
    let m = HybridModel::new(cfg).unwrap();
    let mut p = m.init_shared(&mut stream(3, "init", 0));
    let names: Vec<String> = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let keep = !name.starts_with("dec.") || name.starts_with("dec.final_ln");
        if !keep {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let mut succ = vec![None; v];
    let mut prev = SOS_EOS;
    for &tok in target {
        succ[prev] = Some(tok);
        prev = tok;
    }
    succ[prev] = Some(SOS_EOS);
    let embed = p.get_mut("dec.embed").unwrap();
    for a in 0..v {
        embed.data_mut()[a * h + a] = 10.0;
    }
    let out = p.get_mut("dec.out.w").unwrap();
    for (a, s) in succ.iter().enumerate() {
        if let Some(s) = s {
            out.data_mut()[a * v + s] = 20.0;
        }
    }
    (m, p)
}

#[test]
fn one_hot_decoder_reproduces_its_sequence() {
    let target = [5, 2, 7, 3];
    let (m, p) = one_hot_model(&target);
    let dec = Decoder::new(&m, &p, None);
    let h = dec.decode(&frames(1, 8), None).unwrap();
    assert_eq!(h.tokens, target);
    assert!(h.decoder_log_prob.abs() < 1e-9, "{}", h.decoder_log_prob);
    assert!(h.score <= 0.0);
}

#[test]
fn output_length_is_capped_by_frames() {
    let (m, p) = one_hot_model(&[5, 2, 7, 3]);
    let h = Decoder::new(&m, &p, None).decode(&frames(1, 2), None).unwrap();
    assert!(h.tokens.len() <= 2);
    // a sequence longer than the frames cannot be aligned
    assert!(h.ctc_log_prob > f64::NEG_INFINITY);
}

#[test]
fn hypotheses_respect_invariants() {
    for seed in 0..4 {
        let (m, p) = seeded(seed);
        let h = Decoder::new(&m, &p, None).decode(&frames(seed, 5), None).unwrap();
        assert!(h.score <= 0.0);
        assert!(h.tokens.iter().all(|&t| t >= FIRST_TOKEN));
        let c = m.config().ctc_weight;
        assert_eq!(h.score, c * h.ctc_log_prob + (1.0 - c) * h.decoder_log_prob);
        assert_eq!(h.bank, None);
    }
}

#[test]
fn wider_beams_never_lose_joint_score() {
    let mut checked = 0;
    for seed in 0..10 {
        let (m, p) = seeded(seed);
        for u in 0..3 {
            let x = frames(seed * 100 + u, 4 + u as usize);
            let scores: Vec<f64> = [1, 2, 4, 8]
                .iter()
                .map(|&b| Decoder::new(&m, &p, None).with_beam(b).decode(&x, None).unwrap().score)
                .collect();
            for w in scores.windows(2) {
                assert!(w[1] >= w[0], "seed {seed} utt {u}: {scores:?}");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 30);
}

#[test]
fn single_bank_label_free_modes_match_task_decoding() {
    let (m, p) = seeded(1);
    let reg = registry(vec![perturbed_bank(&m, 1, 1)]);
    let dec = Decoder::new(&m, &p, Some(&reg));
    let x = frames(7, 6);
    let direct = dec.decode_task(&x, 1).unwrap();
    let (conf, t) = dec.conf_infer(&x).unwrap();
    assert_eq!(t, 1);
    assert_eq!(conf, direct);
    let avg = dec.avg_apt(&x).unwrap();
    assert_eq!(avg.tokens, direct.tokens);
    assert_eq!(avg.score, direct.score);
}

#[test]
fn identical_banks_break_ties_to_the_first_task() {
    let (m, p) = seeded(2);
    let b1 = perturbed_bank(&m, 1, 2);
    let b2 = AdapterBank::new_bank(2, Some(&b1), 1, 8, 4, &mut stream(0, "unused", 0)).unwrap();
    let b3 = AdapterBank::new_bank(3, Some(&b2), 1, 8, 4, &mut stream(0, "unused", 0)).unwrap();
    let reg = registry(vec![b1.clone(), b2, b3]);
    let dec = Decoder::new(&m, &p, Some(&reg));
    let x = frames(3, 6);
    let (h, t) = dec.conf_infer(&x).unwrap();
    assert_eq!(t, 1);
    let single = Decoder::new(&m, &p, None).decode(&x, Some(&b1)).unwrap();
    assert_eq!(h.tokens, single.tokens);
    assert_eq!(h.score, single.score);
    let avg = dec.avg_apt(&x).unwrap();
    assert_eq!(avg.tokens, single.tokens);
    assert_eq!(avg.score, single.score);
}

#[test]
fn identity_banks_change_nothing() {
    let (m, p) = seeded(4);
    let b1 = m.new_first_bank(&mut stream(4, "bank", 1)).unwrap();
    let b2 = AdapterBank::new_bank(2, Some(&b1), 1, 8, 4, &mut stream(0, "unused", 0)).unwrap();
    let reg = registry(vec![b1, b2]);
    let with = Decoder::new(&m, &p, Some(&reg));
    let without = Decoder::new(&m, &p, None);
    for s in 0..3 {
        let x = frames(40 + s, 5);
        let plain = without.decode(&x, None).unwrap();
        let strip = |h: Hypothesis| (h.tokens, h.score.to_bits());
        let expect = strip(plain);
        assert_eq!(strip(with.decode_task(&x, 2).unwrap()), expect);
        assert_eq!(strip(with.conf_infer(&x).unwrap().0), expect);
        assert_eq!(strip(with.avg_apt(&x).unwrap()), expect);
    }
}

#[test]
fn conf_infer_returns_the_best_bank_exactly() {
    let (m, p) = seeded(5);
    let banks: Vec<AdapterBank> = (1..=3).map(|t| perturbed_bank(&m, t, 50 + t as u64)).collect();
    let reg = registry(banks.clone());
    let dec = Decoder::new(&m, &p, Some(&reg));
    for s in 0..4 {
        let x = frames(60 + s, 6);
        let per_bank: Vec<f64> = banks.iter().map(|b| dec.decode(&x, Some(b)).unwrap().score).collect();
        let (h, t) = dec.conf_infer(&x).unwrap();
        let max = per_bank.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(h.score, max);
        assert_eq!(per_bank[t - 1], max);
        assert!(per_bank[..t - 1].iter().all(|&s| s < max));
    }
}

#[test]
fn decode_counters_scale_with_banks_only_for_conf_infer() {
    let (m, p) = seeded(6);
    for t in 1..=4usize {
        let banks = (1..=t).map(|i| perturbed_bank(&m, i, 70 + i as u64)).collect();
        let reg = registry(banks);
        let dec = Decoder::new(&m, &p, Some(&reg));
        let x = frames(80, 5);
        dec.conf_infer(&x).unwrap();
        assert_eq!(dec.counters().decodes, t as u64);
        let before = dec.counters().decodes;
        for _ in 0..3 {
            dec.avg_apt(&x).unwrap();
        }
        assert_eq!(dec.counters().decodes - before, 3);
        assert_eq!(dec.counters().averagings, 1);
    }
}

#[test]
fn averaged_bank_is_refreshed_after_registry_changes() {
    let (m, p) = seeded(7);
    let mut reg = registry(vec![perturbed_bank(&m, 1, 1)]);
    let x = frames(90, 5);
    let first = Decoder::new(&m, &p, Some(&reg)).avg_apt(&x).unwrap();
    reg.push(perturbed_bank(&m, 2, 2)).unwrap();
    let dec = Decoder::new(&m, &p, Some(&reg));
    let second = dec.avg_apt(&x).unwrap();
    assert_ne!(first.score, second.score);
    assert_eq!(dec.counters().averagings, 1);
}

#[test]
fn label_free_modes_need_banks() {
    let (m, p) = seeded(8);
    let empty = BankRegistry::new();
    let dec = Decoder::new(&m, &p, Some(&empty));
    assert!(!dec.has_banks());
    assert!(dec.conf_infer(&frames(1, 4)).is_err());
    assert!(dec.avg_apt(&frames(1, 4)).is_err());
}

#[test]
fn corpus_wer_pools_edits() {
    let target = [5, 2, 7, 3];
    let (m, p) = one_hot_model(&target);
    let dec = Decoder::new(&m, &p, None);
    let utt = |tokens: Vec<usize>| adaptcl::model::Utterance {
        id: "u".into(),
        frames: frames(1, 8),
        tokens,
        task_id: Some(1),
    };
    // one exact, one missing four of its eight tokens
    let utts = vec![utt(target.to_vec()), utt(vec![5, 2, 7, 3, 4, 4, 4, 4])];
    let w = corpus_wer(&dec, &utts, EvalMode::TaskLabel).unwrap();
    assert!((w - 100.0 * 4.0 / 12.0).abs() < 1e-12);
}
