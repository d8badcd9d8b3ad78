use super::*;
use crate::data::{LanguageId, SentencePair};
use crate::model::{init, Activation};
use crate::tokenizer::train_bpe;
use crate::train::{EvalRecord, StepRecord, TrainLog};

#[test]
fn tokenization_splits_punctuation_and_normalizes() {
    assert_eq!(bleu_tokens("Hello, world!"), ["Hello", ",", "world", "!"]);
    // Decomposed "é" composes under NFC.
    assert_eq!(bleu_tokens("cafe\u{301}"), bleu_tokens("caf\u{e9}"));
    assert!(bleu_tokens("  \t ").is_empty());
}

#[test]
fn hand_counted_cases() {
    // hyp "the cat sat on the": 5/5, 4/4, 3/3, 2/2, BP exp(1 - 6/5).
    let b = bleu(&["the cat sat on the"], &["the cat sat on the mat"], false).unwrap();
    assert!((b - 100.0 * (-0.2f64).exp()).abs() < 1e-9, "{b}");
    // hyp "the cat sat on mat": 5/5, 3/4, 2/3, 1/2, BP exp(1 - 6/5).
    let b = bleu(&["the cat sat on mat"], &["the cat sat on the mat"], false).unwrap();
    let want = 100.0 * ((1.0f64 * 0.75 * (2.0 / 3.0) * 0.5).ln() / 4.0 - 0.2).exp();
    assert!((b - want).abs() < 1e-9, "{b} vs {want}");
}

#[test]
fn identity_and_disjoint() {
    let x = ["a b c d e", "f g h i"];
    assert_eq!(bleu(&x, &x, false).unwrap(), 100.0);
    assert_eq!(bleu(&["p q r s"], &["a b c d"], false).unwrap(), 0.0);
    assert_eq!(bleu(&[""], &["a b c d"], false).unwrap(), 0.0);
    assert!(matches!(bleu(&["a"], &["a", "b"], false), Err(KdError::Usage(_))));
}

#[test]
fn smoothing_rescues_short_matches() {
    // No 4-gram matches: zero without smoothing, positive with it.
    let (h, r) = (["a b c x"], ["a b c d"]);
    assert_eq!(bleu(&h, &r, false).unwrap(), 0.0);
    let s = bleu(&h, &r, true).unwrap();
    // 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1)
    let want = 100.0 * ((0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).ln() / 4.0).exp();
    assert!((s - want).abs() < 1e-9, "{s} {want}");
}

#[test]
fn brevity_penalty_decreases_under_truncation() {
    let r = "a b c d e f g h i j";
    let mut last = f64::INFINITY;
    for len in (4..10).rev() {
        let h: Vec<&str> = r.split(' ').take(len).collect();
        let b = bleu(&[h.join(" ")], &[r], false).unwrap();
        assert!(b < last);
        last = b;
    }
}

fn tok_and_corpus() -> (Tokenizers, ParallelCorpus) {
    let text = ["a b", "b c a", "c"];
    let v = train_bpe(text, 262, &[]).unwrap();
    let tok = Tokenizers {
        src: v.clone(),
        tgt: v,
        shared: true,
    };
    let lang = |c: &str| LanguageId::new(c).unwrap();
    let pairs = text.iter().map(|t| SentencePair::real(*t, *t, "toy")).collect();
    (tok, ParallelCorpus::new(lang("x"), lang("y"), pairs).unwrap())
}

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 8,
        d_ff: 8,
        heads: 2,
        dropout: 0.0,
        src_vocab: vocab,
        tgt_vocab: vocab,
        max_len: 16,
        tied_embeddings: false,
        activation: Activation::Relu,
    }
}

#[test]
fn entropy_of_uniform_and_peaked_models() {
    let (tok, corpus) = tok_and_corpus();
    let cfg = config(tok.src.len());
    let mut p = init(&cfg, 0).unwrap();
    p.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
    let tf = teacher_forced(&cfg, &p, &tok, &corpus).unwrap();
    let ln_v = (cfg.tgt_vocab as f64).ln();
    assert!((tf.entropy - ln_v).abs() < 1e-5);
    assert!((tf.nll - ln_v).abs() < 1e-5);

    // Constant decoder output and one dominant output row: near one-hot.
    let i = p.position("dec.ln.b").unwrap();
    p.tensors_mut()[i].data_mut().fill(1.0);
    let i = p.position("embed.out").unwrap();
    p.tensors_mut()[i].data_mut()[5 * 8..6 * 8].fill(100.0);
    let e = predictive_entropy(&cfg, &p, &tok, &corpus).unwrap();
    assert!(e.abs() < 1e-6, "{e}");

    let empty = ParallelCorpus::empty(corpus.src_lang().clone(), corpus.tgt_lang().clone());
    assert!(matches!(predictive_entropy(&cfg, &p, &tok, &empty), Err(KdError::Usage(_))));
}

#[test]
fn entropy_within_bounds_for_random_models() {
    let (tok, corpus) = tok_and_corpus();
    let cfg = config(tok.src.len());
    for seed in 0..3 {
        let p = init(&cfg, seed).unwrap();
        let e = predictive_entropy(&cfg, &p, &tok, &corpus).unwrap();
        assert!(e >= 0.0 && e <= (cfg.tgt_vocab as f64).ln() + 1e-9);
    }
}

#[test]
fn sweep_at_one_is_greedy() {
    let (tok, corpus) = tok_and_corpus();
    let cfg = config(tok.src.len());
    let p = init(&cfg, 3).unwrap();
    let base = DecodeConfig {
        max_len: 6,
        ..DecodeConfig::greedy()
    };
    let sweep = topk_sweep(&cfg, &p, &tok, &corpus, &[1, 3], &[0, 1, 2], &base).unwrap();
    let sources: Vec<&str> = corpus.sources().collect();
    let refs: Vec<&str> = corpus.targets().collect();
    let greedy = bleu(&translate_corpus(&cfg, &p, &tok, &sources, &base, 0).unwrap(), &refs, false).unwrap();
    let one = sweep.point(1).unwrap();
    assert!(one.bleu.iter().all(|&b| b == greedy));
    assert_eq!(one.spread, 0.0);
    assert_eq!(sweep.degradation(1), Some(0.0));
    for bad in [&[2usize, 3][..], &[1, 1], &[]] {
        assert!(matches!(
            topk_sweep(&cfg, &p, &tok, &corpus, bad, &[0], &base),
            Err(KdError::Usage(_))
        ));
    }
}

fn run(model: &str, data: usize, kind: TargetKind, bleu: f64) -> RunSummary {
    RunSummary {
        model: model.into(),
        data_size: data,
        kind: Some(kind),
        log: TrainLog {
            steps: vec![StepRecord {
                step: 0,
                corpus: "c".into(),
                loss: 2.0,
                lr: 1e-3,
                tokens: 10,
                grad_norm: 1.0,
            }],
            evals: vec![EvalRecord {
                step: 1,
                val_loss: 1.0,
                bleu,
            }],
        },
        values: vec![("toy".into(), "bleu".into(), bleu, "beam4".into())],
        topk: None,
    }
}

#[test]
fn report_deltas_and_layout() {
    let runs = [
        run("2x2", 500, TargetKind::Real, 17.6),
        run("2x2", 500, TargetKind::Synthetic, 20.9),
        run("4x4", 500, TargetKind::Real, 19.0),
    ];
    let r = build_report(&runs).unwrap();
    assert_eq!(r.deltas.len(), 1);
    assert!((r.delta("bleu", "2x2", 500, "toy").unwrap().delta - 3.3).abs() < 1e-9);
    let table = r.render_table();
    assert!(table.contains("+3.30"), "{table}");
    assert_eq!(r.series.len(), 6);

    let mut swapped = runs.clone();
    swapped.reverse();
    assert_eq!(build_report(&swapped).unwrap().render_table(), table);
    assert_eq!(build_report(&swapped).unwrap().to_jsonl(), r.to_jsonl());
}

#[test]
fn single_run_has_empty_delta() {
    let r = build_report(&[run("2x2", 500, TargetKind::Real, 10.0)]).unwrap();
    assert!(r.deltas.is_empty());
    let table = r.render_table();
    let row = table.lines().nth(2).unwrap();
    assert!(row.ends_with("10.00"), "{row:?}");
}

#[test]
fn duplicates_are_rejected() {
    let a = run("2x2", 500, TargetKind::Real, 10.0);
    assert!(matches!(build_report(&[a.clone(), a]), Err(KdError::Report(_))));
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let r = build_report(&[run("2x2", 500, TargetKind::Real, 10.0)]).unwrap();
    let files = r.write(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let curve = std::fs::read_to_string(dir.path().join("plots/val_bleu.2x2_500_real.tsv")).unwrap();
    assert_eq!(curve, "1\t10\n");
}
