use kdlab_compute::kernels::log_softmax;
use kdlab_compute::Graph;

use super::*;
use crate::model::{forward, init, Activation, Batch, Bound};

fn tiny(vocab: usize, seed: u64) -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 2,
        d_model: 16,
        d_ff: 16,
        heads: 2,
        dropout: 0.0,
        src_vocab: vocab,
        tgt_vocab: vocab,
        max_len: 16,
        tied_embeddings: true,
        activation: Activation::Relu,
    };
    let mut params = init(&cfg, seed).unwrap();
    // Sharpen the output distribution so decoding choices are not near-uniform.
    for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
        if name == "embed.shared" {
            t.data_mut().iter_mut().for_each(|v| *v *= 6.0);
        }
    }
    (cfg, params)
}

/// Teacher-forced log-probability of `tokens` (BOS first) given `src`.
fn rescore(cfg: &ModelConfig, params: &ModelParams, src: &[u32], tokens: &[u32]) -> f64 {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false);
    let batch = Batch::new(&[src], &[&tokens[..tokens.len() - 1]], None).unwrap();
    let logits = forward(cfg, &p, &mut g, &batch).unwrap();
    let l = g.value(logits);
    (1..tokens.len())
        .map(|i| log_softmax(l.row(i - 1))[tokens[i] as usize] as f64)
        .sum()
}

fn source(seed: u64, vocab: u32) -> Vec<u32> {
    let len = 2 + (seed % 4) as usize;
    let mut v: Vec<u32> = (0..len).map(|i| 4 + ((seed as u32 + 3 * i as u32) % (vocab - 4))).collect();
    v.push(EOS);
    v
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..15 {
        let (cfg, p) = tiny(12, seed);
        let src = source(seed, 12);
        let mut dc = DecodeConfig::greedy();
        dc.max_len = 8;
        let g = decode(&cfg, &p, &src, &dc, 0).unwrap();
        dc.mode = DecodeMode::Beam { width: 1 };
        let b = decode(&cfg, &p, &src, &dc, 0).unwrap();
        assert_eq!(g[0].tokens, b[0].tokens, "seed {seed}");
    }
}

#[test]
fn top_one_sampling_is_greedy() {
    let (cfg, p) = tiny(12, 3);
    let src = source(3, 12);
    let g = decode(&cfg, &p, &src, &DecodeConfig::greedy(), 0).unwrap();
    for seed in 0..5 {
        let t = decode(&cfg, &p, &src, &DecodeConfig::top_k(1, 1.0), seed).unwrap();
        assert_eq!(g[0].tokens, t[0].tokens);
    }
}

fn exhaustive_best(cfg: &ModelConfig, p: &ModelParams, src: &[u32], vocab: u32, max_len: usize) -> (Vec<u32>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack: Vec<Vec<u32>> = vec![vec![BOS]];
    while let Some(prefix) = stack.pop() {
        for tok in 0..vocab {
            let mut seq = prefix.clone();
            seq.push(tok);
            let complete = tok == EOS || seq.len() - 1 == max_len;
            if complete {
                let lp = rescore(cfg, p, src, &seq);
                if lp > best.1 {
                    best = (seq, lp);
                }
            } else {
                stack.push(seq);
            }
        }
    }
    best
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..4 {
        let vocab = 6;
        let (cfg, p) = tiny(vocab, 100 + seed);
        let src = source(seed, vocab as u32);
        let max_len = 3;
        let (want, want_lp) = exhaustive_best(&cfg, &p, &src, vocab as u32, max_len);
        let dc = DecodeConfig {
            mode: DecodeMode::Beam { width: vocab.pow(max_len as u32) },
            max_len,
            length_penalty: 0.0,
            batch_sentences: 1,
        };
        let got = decode(&cfg, &p, &src, &dc, 0).unwrap();
        assert_eq!(got[0].tokens, want, "seed {seed}");
        assert!((got[0].logprob - want_lp).abs() < 1e-4);
    }
}

#[test]
fn hypotheses_are_consistent() {
    let (cfg, p) = tiny(14, 9);
    let src = source(9, 14);
    for dc in [DecodeConfig::greedy(), DecodeConfig::beam(4), DecodeConfig::top_k(5, 1.0)] {
        let dc = DecodeConfig { max_len: 10, ..dc };
        let hyps = decode(&cfg, &p, &src, &dc, 17).unwrap();
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for h in &hyps {
            assert_eq!(h.tokens[0], BOS);
            assert_eq!(h.entropies.len(), h.generated());
            assert!(h.entropies.iter().all(|&e| (0.0..=(14f64).ln() + 1e-6).contains(&e)));
            assert!((rescore(&cfg, &p, &src, &h.tokens) - h.logprob).abs() < 1e-4);
            assert_eq!(h.terminated, h.tokens.last() == Some(&EOS));
        }
    }
}

#[test]
fn max_len_flags_unterminated() {
    let (cfg, p) = tiny(12, 1);
    let src = source(1, 12);
    for mode in [DecodeMode::Greedy, DecodeMode::Beam { width: 3 }] {
        let dc = DecodeConfig {
            mode,
            max_len: 1,
            length_penalty: 1.0,
            batch_sentences: 4,
        };
        for h in decode(&cfg, &p, &src, &dc, 0).unwrap() {
            assert_eq!(h.generated(), 1);
            assert_eq!(h.terminated, h.tokens[1] == EOS);
        }
    }
}

#[test]
fn batched_decoding_matches_single() {
    let (cfg, p) = tiny(12, 4);
    let sources: Vec<Vec<u32>> = (0..5).map(|s| source(s, 12)).collect();
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    for dc in [DecodeConfig::greedy(), DecodeConfig::beam(3), DecodeConfig::top_k(4, 1.0)] {
        let dc = DecodeConfig { max_len: 8, ..dc };
        let all = decode_batch(&cfg, &p, &refs, &dc, 5).unwrap();
        let one_by_one = decode_batch(&cfg, &p, &refs, &DecodeConfig { batch_sentences: 1, ..dc.clone() }, 5).unwrap();
        for (a, b) in all.iter().zip(&one_by_one) {
            assert_eq!(a[0].tokens, b[0].tokens);
        }
    }
}

#[test]
fn seeded_sampling_is_reproducible_and_follows_the_model() {
    let (cfg, p) = tiny(10, 21);
    let src = source(2, 10);
    let dc = DecodeConfig {
        max_len: 1,
        ..DecodeConfig::top_k(3, 1.0)
    };
    let n = 3000;
    let sources: Vec<&[u32]> = vec![src.as_slice(); n];
    let a = decode_batch(&cfg, &p, &sources, &dc, 8).unwrap();
    assert_eq!(a, decode_batch(&cfg, &p, &sources, &dc, 8).unwrap());

    let enc = Encoded::new(&cfg, &p, &[&src]).unwrap();
    let logits = enc.next_logits(&cfg, &p, &[&[BOS]]).unwrap();
    let lp = log_softmax(logits.row(0));
    let top = top_indices(&lp, 3);
    let z: f64 = top.iter().map(|&i| (lp[i] as f64).exp()).sum();
    let mut chi2 = 0.0;
    for &t in &top {
        let expected = n as f64 * (lp[t] as f64).exp() / z;
        let observed = a.iter().filter(|h| h[0].tokens[1] as usize == t).count() as f64;
        chi2 += (observed - expected).powi(2) / expected;
    }
    assert!(a.iter().all(|h| top.contains(&(h[0].tokens[1] as usize))));
    // 99.9% quantile of chi-square with 2 degrees of freedom.
    assert!(chi2 < 13.8, "chi2 {chi2}");
}

#[test]
fn corpus_translation_keeps_order() {
    let vocab = crate::tokenizer::train_bpe(["a b c"], 4 + 256, &[]).unwrap();
    let tok = Tokenizers {
        src: vocab.clone(),
        tgt: vocab,
        shared: true,
    };
    let (cfg, p) = tiny(tok.src.len(), 2);
    let dc = DecodeConfig {
        max_len: 4,
        ..DecodeConfig::beam(2)
    };
    assert!(translate_corpus(&cfg, &p, &tok, &[], &dc, 0).unwrap().is_empty());
    let out = translate_corpus(&cfg, &p, &tok, &["a b", "c", "a b"], &dc, 0).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(out[0], out[2]);
}

#[test]
fn translations_and_sidecar_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hypothesis {
        tokens: vec![BOS, 5, EOS],
        logprob: -1.5,
        score: -0.75,
        entropies: vec![0.5, 0.25],
        terminated: true,
    };
    let path = dir.path().join("out.tgt");
    write_translations(&path, &["x y".into()], &[h]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "x y\n");
    let side = std::fs::read_to_string(dir.path().join("out.tgt.hyps.jsonl")).unwrap();
    assert!(side.contains("\"logprob\":-1.5"));
}

#[test]
fn invalid_configs_are_rejected() {
    let (cfg, p) = tiny(8, 0);
    for dc in [DecodeConfig::beam(0), DecodeConfig::top_k(0, 1.0), DecodeConfig::top_k(2, 0.0)] {
        assert!(matches!(decode(&cfg, &p, &[5, EOS], &dc, 0), Err(KdError::Validation(_))));
    }
}
