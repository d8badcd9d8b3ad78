use super::*;
use crate::data::read_generation_metadata;
use crate::decode::translate_corpus;
use crate::model::{init, save_checkpoint, Activation, Checkpoint};
use crate::tokenizer::{train_bpe, BOS, EOS};

fn setup() -> (Tokenizers, ModelConfig, ModelParams, ParallelCorpus) {
    let lines = ["a b c", "b", "c c a b a c b", "a", "b c"];
    let v = train_bpe(lines, 264, &[]).unwrap();
    let tok = Tokenizers {
        src: v.clone(),
        tgt: v,
        shared: true,
    };
    let cfg = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 16,
        d_ff: 16,
        heads: 2,
        dropout: 0.0,
        src_vocab: tok.src.len(),
        tgt_vocab: tok.tgt.len(),
        max_len: 16,
        tied_embeddings: true,
        activation: Activation::Relu,
    };
    let mut params = init(&cfg, 5).unwrap();
    params.tensors_mut()[0].data_mut().iter_mut().for_each(|x| *x *= 8.0);
    let lang = |c: &str| LanguageId::new(c).unwrap();
    let pairs = lines.iter().map(|l| SentencePair::real(*l, "x", "toy")).collect();
    (tok, cfg, params, ParallelCorpus::new(lang("s"), lang("t"), pairs).unwrap())
}

fn dc() -> DecodeConfig {
    DecodeConfig {
        max_len: 6,
        ..DecodeConfig::beam(4)
    }
}

#[test]
fn output_is_aligned_with_sources() {
    let (tok, cfg, p, corpus) = setup();
    let out = distill_corpus(&cfg, &p, &tok, &corpus, &dc(), "T").unwrap();
    assert_eq!(out.corpus.len(), corpus.len());
    assert!(out.corpus.sources().eq(corpus.sources()));
    assert!(out
        .corpus
        .pairs()
        .iter()
        .all(|q| q.provenance == Provenance::Synthetic("T".into()) && q.domain == "toy"));
    // Each line, translated on its own, gives the same target. The long
    // middle sentence is reordered by length batching internally.
    for (i, pair) in out.corpus.pairs().iter().enumerate() {
        let alone = distill_corpus(&cfg, &p, &tok, &corpus.head(i + 1), &dc(), "T").unwrap();
        assert_eq!(alone.corpus.pairs()[i].target, pair.target);
        let direct = translate_corpus(&cfg, &p, &tok, &[&pair.source], &dc(), 0).unwrap();
        if !out.flagged.contains(&i) {
            assert_eq!(direct[0], pair.target);
        }
    }
    assert_eq!(out, distill_corpus(&cfg, &p, &tok, &corpus, &dc(), "T").unwrap());
}

#[test]
fn empty_corpus_gives_empty_output() {
    let (tok, cfg, p, corpus) = setup();
    let empty = ParallelCorpus::empty(corpus.src_lang().clone(), corpus.tgt_lang().clone());
    let out = distill_corpus(&cfg, &p, &tok, &empty, &dc(), "T").unwrap();
    assert!(out.corpus.is_empty() && out.flagged.is_empty());
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (tok, mut cfg, _, corpus) = setup();
    cfg.src_vocab += 1;
    cfg.tgt_vocab += 1;
    let p = init(&cfg, 0).unwrap();
    assert!(matches!(distill_corpus(&cfg, &p, &tok, &corpus, &dc(), "T"), Err(KdError::Config(_))));
}

#[test]
fn empty_top_hypothesis_falls_back() {
    let (tok, ..) = setup();
    let h = |tokens: Vec<u32>, terminated| Hypothesis {
        tokens,
        logprob: 0.0,
        score: 0.0,
        entropies: vec![],
        terminated,
    };
    let a = tok.tgt.encode("a");
    let ranked = [h(vec![BOS, EOS], true), h([vec![BOS], a.clone(), vec![EOS]].concat(), true)];
    assert_eq!(
        choose_target(&tok, &ranked).unwrap(),
        SyntheticTarget {
            text: "a".into(),
            flagged: true
        }
    );
    let t = choose_target(&tok, &[h([vec![BOS], a].concat(), false)]).unwrap();
    assert!(t.flagged);
    let t = choose_target(&tok, &[h(vec![BOS, EOS], true)]).unwrap();
    assert_eq!(t.text, "<unk>");
}

#[test]
fn file_job_resumes_from_journal() {
    let (tok, cfg, params, corpus) = setup();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tok.save(&d.join("vocab.json")).unwrap();
    let ck = Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        step: 0,
        meta: serde_json::json!({ "vocab_sha256": tok.fingerprint() }),
    };
    save_checkpoint(&ck, &d.join("teacher.ckpt")).unwrap();
    save_corpus(&corpus, &d.join("train"), serde_json::Value::Null).unwrap();
    let job = DistillJob {
        teacher: d.join("teacher.ckpt"),
        tokenizer: d.join("vocab.json"),
        source: d.join("train"),
        src_lang: corpus.src_lang().clone(),
        tgt_lang: corpus.tgt_lang().clone(),
        decode: dc(),
        output: d.join("synthetic"),
        teacher_id: "T".into(),
        chunk_size: 2,
    };
    let fresh = distill(&job).unwrap();
    assert_eq!(fresh.corpus, distill_corpus(&cfg, &params, &tok, &corpus, &dc(), "T").unwrap().corpus);
    assert!(!suffixed(&job.output, ".journal.json").exists());
    let meta = read_generation_metadata(&job.output).unwrap();
    assert_eq!(meta["teacher_checkpoint_sha256"], sha256_file(&job.teacher).unwrap());
    let loaded = load_corpus(&job.output, job.src_lang.clone(), job.tgt_lang.clone()).unwrap();
    assert_eq!(loaded, fresh.corpus);

    // An interrupted run: two journaled lines plus a third that was written
    // after the last journal update.
    let marker = |s: &str| serde_json::to_string(&SyntheticTarget { text: s.into(), flagged: false }).unwrap();
    let journal = Journal {
        teacher_sha256: sha256_file(&job.teacher).unwrap(),
        source_sha256: sha256_file(&d.join("train.src")).unwrap(),
        decode: dc(),
        completed: 2,
    };
    fs::write(suffixed(&job.output, ".journal.json"), serde_json::to_string(&journal).unwrap()).unwrap();
    fs::write(
        suffixed(&job.output, ".partial.jsonl"),
        format!("{}\n{}\n{}\n", marker("done0"), marker("done1"), marker("stale")),
    )
    .unwrap();
    let resumed = distill(&job).unwrap();
    let targets: Vec<&str> = resumed.corpus.targets().collect();
    assert_eq!(&targets[..2], ["done0", "done1"]);
    assert!(resumed.corpus.targets().skip(2).eq(fresh.corpus.targets().skip(2)));

    // A journal from another teacher is ignored.
    let other = Journal {
        teacher_sha256: "0".repeat(64),
        ..journal
    };
    fs::write(suffixed(&job.output, ".journal.json"), serde_json::to_string(&other).unwrap()).unwrap();
    fs::write(suffixed(&job.output, ".partial.jsonl"), format!("{}\n{}\n", marker("x"), marker("y"))).unwrap();
    assert_eq!(distill(&job).unwrap().corpus, fresh.corpus);
}

#[test]
fn foreign_vocabulary_hash_is_rejected() {
    let (tok, cfg, params, corpus) = setup();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tok.save(&d.join("vocab.json")).unwrap();
    let ck = Checkpoint {
        config: cfg,
        params,
        step: 0,
        meta: serde_json::json!({ "vocab_sha256": "ab" }),
    };
    save_checkpoint(&ck, &d.join("t.ckpt")).unwrap();
    save_corpus(&corpus, &d.join("train"), serde_json::Value::Null).unwrap();
    let job = DistillJob {
        teacher: d.join("t.ckpt"),
        tokenizer: d.join("vocab.json"),
        source: d.join("train"),
        src_lang: corpus.src_lang().clone(),
        tgt_lang: corpus.tgt_lang().clone(),
        decode: dc(),
        output: d.join("out"),
        teacher_id: "T".into(),
        chunk_size: 4,
    };
    assert!(matches!(distill(&job), Err(KdError::Config(_))));
}
