//! `kdlab`: tokenizer training, model training, distillation, evaluation and
//! experiment recipes from one executable.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kdlab_core::data::{load_corpus, LanguageId, ParallelCorpus};
use kdlab_core::decode::{translate_corpus, translate_hypotheses, write_translations, DecodeConfig, DecodeMode};
use kdlab_core::distill::{distill, DistillJob};
use kdlab_core::eval::{bleu, teacher_forced, topk_sweep};
use kdlab_core::experiment::{parse_size, run_experiment, ExperimentSpec, Manifest, WORKERS_ENV};
use kdlab_core::model::{load_checkpoint, save_checkpoint, Activation, Checkpoint, ModelConfig};
use kdlab_core::tokenizer::Tokenizers;
use kdlab_core::train::{checkpoint_meta, run, RunOptions, Start, TrainPlan};
use kdlab_core::KdError;
use log::info;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "kdlab", version, about = "Sequence-level knowledge distillation lab for translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a byte-level BPE vocabulary from text files.
    BpeTrain(BpeTrainArgs),
    /// Train a model from scratch or continue from a checkpoint.
    Train(TrainArgs),
    /// Translate a file line by line.
    Translate(TranslateArgs),
    /// Build a synthetic corpus from teacher translations.
    Distill(DistillArgs),
    /// Score a model (or a file of translations) on a test corpus.
    Evaluate(EvaluateArgs),
    /// Teacher-forced predictive entropy on a corpus.
    Entropy(ModelCorpusArgs),
    /// BLEU under top-k sampling for several k and seeds.
    TopkSweep(TopkArgs),
    /// Run an experiment recipe end to end (resumable).
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Corpus prefix; reads `<prefix>.src` and `<prefix>.tgt`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "src")]
    src_lang: String,
    #[arg(long, default_value = "tgt")]
    tgt_lang: String,
}

impl CorpusArgs {
    fn load(&self) -> Result<ParallelCorpus> {
        load_prefix(&self.corpus, &self.src_lang, &self.tgt_lang)
    }
}

fn load_prefix(prefix: &Path, src: &str, tgt: &str) -> Result<ParallelCorpus> {
    Ok(load_corpus(prefix, LanguageId::new(src)?, LanguageId::new(tgt)?)?)
}

#[derive(Args, Debug, Clone)]
struct DecodeArgs {
    /// Beam width (the default mode).
    #[arg(long, default_value_t = 4, conflicts_with_all = ["greedy", "top_k"])]
    beam: usize,
    #[arg(long)]
    greedy: bool,
    /// Sample from the k most likely tokens.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0, requires = "top_k")]
    temperature: f64,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    /// Length-normalization exponent for final ranking.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    decode_seed: u64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        let mode = match (self.greedy, self.top_k) {
            (true, _) => DecodeMode::Greedy,
            (false, Some(k)) => DecodeMode::TopK {
                k,
                temperature: self.temperature,
            },
            (false, None) => DecodeMode::Beam { width: self.beam },
        };
        DecodeConfig {
            mode,
            max_len: self.max_len,
            length_penalty: self.alpha,
            ..DecodeConfig::greedy()
        }
    }
}

#[derive(Args, Debug)]
struct BpeTrainArgs {
    /// Source-side text files (one sentence per line).
    #[arg(long, required = true, num_args = 1..)]
    src: Vec<PathBuf>,
    /// Target-side text files.
    #[arg(long, required = true, num_args = 1..)]
    tgt: Vec<PathBuf>,
    /// Target vocabulary size including bytes and specials.
    #[arg(long)]
    size: usize,
    /// Learn separate source and target vocabularies.
    #[arg(long)]
    separate: bool,
    /// Language tags reserved as source-side specials, e.g. `<2de>`.
    #[arg(long)]
    lang_tag: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_phase(s: &str) -> std::result::Result<(PathBuf, u64), String> {
    let (p, n) = s.rsplit_once('=').ok_or("expected PREFIX=STEPS")?;
    let n = n.parse().map_err(|_| format!("bad step count in {s:?}"))?;
    Ok((PathBuf::from(p), n))
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Training phase `PREFIX=STEPS`; repeat to switch corpora mid-run.
    #[arg(long = "phase", required = true, value_parser = parse_phase)]
    phases: Vec<(PathBuf, u64)>,
    /// Validation corpus prefix.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value = "src")]
    src_lang: String,
    #[arg(long, default_value = "tgt")]
    tgt_lang: String,
    /// Continue from this checkpoint (its architecture is kept).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Depth as `<encoder>x<decoder>`.
    #[arg(long, default_value = "2x2")]
    size: String,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    untied: bool,
    #[arg(long)]
    gelu: bool,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    #[arg(long, default_value_t = 0.5)]
    decay_rate: f64,
    #[arg(long, default_value_t = 500)]
    decay_interval: u64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(Checkpoint, Tokenizers)> {
        let tok = Tokenizers::load(&self.vocab)?;
        let ck = load_checkpoint(&self.model, None)?;
        if ck.config.src_vocab != tok.src.len() || ck.config.tgt_vocab != tok.tgt.len() {
            return Err(KdError::Config(format!(
                "{} was trained with vocabularies {}/{}, {} has {}/{}",
                self.model.display(),
                ck.config.src_vocab,
                ck.config.tgt_vocab,
                self.vocab.display(),
                tok.src.len(),
                tok.tgt.len()
            ))
            .into());
        }
        Ok((ck, tok))
    }
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "teacher")]
    teacher_id: String,
    /// Sentences translated between journal updates.
    #[arg(long, default_value_t = 256)]
    chunk_size: usize,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Model to translate with; omit when scoring `--hyps`.
    #[arg(long, requires = "vocab", conflicts_with = "hyps")]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Existing translations, line-aligned with the corpus.
    #[arg(long)]
    hyps: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Use add-one smoothing for higher-order n-grams.
    #[arg(long)]
    smooth: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelCorpusArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TopkArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// TOML experiment file.
    #[arg(required_unless_present = "recipe", conflicts_with = "recipe")]
    config: Option<PathBuf>,
    /// Built-in recipe (`paper-mini`).
    #[arg(long)]
    recipe: Option<String>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_recipe: bool,
    /// Validate the config and exit.
    #[arg(long)]
    check: bool,
}

fn finish(out: &Path, name: &str, invocation: serde_json::Value, seeds: &[u64], outputs: &[PathBuf]) -> Result<()> {
    Manifest::record_command(out, name, &invocation, seeds, outputs)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn bpe_train(a: &BpeTrainArgs) -> Result<()> {
    let read = |paths: &[PathBuf]| -> Result<String> {
        let mut all = String::new();
        for p in paths {
            all.push_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?);
            all.push('\n');
        }
        Ok(all)
    };
    let (src, tgt) = (read(&a.src)?, read(&a.tgt)?);
    let tok = Tokenizers::train(src.lines(), tgt.lines(), a.size, !a.separate, &a.lang_tag)?;
    let path = a.out.join("vocab.json");
    tok.save(&path)?;
    println!("vocabulary: {} source / {} target tokens", tok.src.len(), tok.tgt.len());
    let invocation = json!({ "src": a.src, "tgt": a.tgt, "size": a.size, "shared": !a.separate, "lang_tags": a.lang_tag });
    finish(&a.out, "bpe-train", invocation, &[], &[path])
}

fn train(a: &TrainArgs) -> Result<()> {
    let tok = Tokenizers::load(&a.vocab)?;
    let mut corpora_owned = Vec::new();
    let mut names = Vec::new();
    for (i, (prefix, _)) in a.phases.iter().enumerate() {
        corpora_owned.push(load_prefix(prefix, &a.src_lang, &a.tgt_lang)?);
        names.push(format!("{i}:{}", prefix.display()));
    }
    let corpora: HashMap<String, &ParallelCorpus> = names.iter().cloned().zip(corpora_owned.iter()).collect();
    let phases: Vec<(&str, u64)> = names.iter().map(String::as_str).zip(a.phases.iter().map(|p| p.1)).collect();
    let plan = TrainPlan {
        peak_lr: a.lr,
        warmup_steps: a.warmup,
        decay_rate: a.decay_rate,
        decay_interval: a.decay_interval,
        label_smoothing: a.label_smoothing,
        batch_tokens: a.batch_tokens,
        eval_every: a.eval_every,
        checkpoint_every: a.checkpoint_every,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        ..TrainPlan::switching(&phases, a.seed)
    };
    let (cfg, start) = match &a.init {
        Some(p) => {
            let ck = load_checkpoint(p, None)?;
            (ck.config.clone(), Start::Checkpoint(Box::new(ck)))
        }
        None => {
            let (encoder_layers, decoder_layers) = parse_size(&a.size)?;
            let cfg = ModelConfig {
                encoder_layers,
                decoder_layers,
                d_model: a.d_model,
                d_ff: a.d_ff,
                heads: a.heads,
                dropout: a.dropout,
                src_vocab: tok.src.len(),
                tgt_vocab: tok.tgt.len(),
                max_len: a.max_len,
                tied_embeddings: !a.untied,
                activation: if a.gelu { Activation::Gelu } else { Activation::Relu },
            };
            cfg.validate()?;
            (cfg, Start::Fresh { seed: a.seed })
        }
    };
    let valid = a.valid.as_deref().map(|p| load_prefix(p, &a.src_lang, &a.tgt_lang)).transpose()?;
    let ck_dir = a.out.join("checkpoints");
    let mut opts = RunOptions {
        validation: valid.as_ref(),
        checkpoint_dir: (a.checkpoint_every > 0).then_some(ck_dir.as_path()),
        ..RunOptions::default()
    };
    opts.checkpoint_meta.insert("vocab_sha256".into(), tok.fingerprint().into());
    info!("training {} ({} parameters) for {} steps", cfg.size_label(), cfg.param_count(), plan.total_steps);
    let outcome = run(&plan, &cfg, &tok, &corpora, start, &opts)?;
    let ck = Checkpoint {
        config: cfg,
        params: outcome.params,
        step: outcome.global_step,
        meta: checkpoint_meta(&opts, outcome.log.last_eval()),
    };
    let (ck_path, log_path) = (a.out.join("model.ckpt"), a.out.join("log.jsonl"));
    save_checkpoint(&ck, &ck_path)?;
    outcome.log.save(&log_path)?;
    if let Some(last) = outcome.log.steps.last() {
        println!("step {}: loss {:.4}", ck.step, last.loss);
    }
    if let Some(e) = outcome.log.last_eval() {
        println!("validation: loss {:.4}, greedy BLEU {:.2}", e.val_loss, e.bleu);
    }
    let mut outputs = vec![ck_path, log_path];
    if ck_dir.is_dir() {
        for entry in fs::read_dir(&ck_dir)? {
            outputs.push(entry?.path());
        }
    }
    let invocation = json!({
        "vocab": a.vocab, "phases": a.phases, "valid": a.valid, "init": a.init,
        "model": ck.config, "plan": plan,
    });
    finish(&a.out, "train", invocation, &[a.seed], &outputs)
}

fn translate(a: &TranslateArgs) -> Result<()> {
    let (ck, tok) = a.model.load()?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let sources: Vec<&str> = text.lines().collect();
    let dc = a.decode.config();
    let hyps = translate_hypotheses(&ck.config, &ck.params, &tok, &sources, &dc, a.decode.decode_seed)?;
    let texts = hyps.iter().map(|h| tok.tgt.decode(h.content())).collect::<kdlab_core::Result<Vec<_>>>()?;
    let path = a.out.join("translations.txt");
    write_translations(&path, &texts, &hyps)?;
    println!("translated {} lines", texts.len());
    let sidecar = a.out.join("translations.txt.hyps.jsonl");
    let invocation = json!({ "model": a.model.model, "vocab": a.model.vocab, "input": a.input, "decode": dc });
    finish(&a.out, "translate", invocation, &[a.decode.decode_seed], &[path, sidecar])
}

fn distill_cmd(a: &DistillArgs) -> Result<()> {
    let job = DistillJob {
        teacher: a.teacher.clone(),
        tokenizer: a.vocab.clone(),
        source: a.corpus.corpus.clone(),
        src_lang: LanguageId::new(&a.corpus.src_lang)?,
        tgt_lang: LanguageId::new(&a.corpus.tgt_lang)?,
        decode: a.decode.config(),
        output: a.out.join("synthetic"),
        teacher_id: a.teacher_id.clone(),
        chunk_size: a.chunk_size,
    };
    let out = distill(&job)?;
    println!("{} synthetic pairs, {} flagged", out.corpus.len(), out.flagged.len());
    let outputs: Vec<PathBuf> = ["synthetic.src", "synthetic.tgt", "synthetic.meta.json"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    finish(&a.out, "distill", serde_json::to_value(&job)?, &[], &outputs)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let corpus = a.corpus.load()?;
    let refs: Vec<&str> = corpus.targets().collect();
    let mut metrics = serde_json::Map::new();
    let mut outputs = Vec::new();
    let hyps: Vec<String> = match (&a.model, &a.hyps) {
        (Some(model), None) => {
            let m = ModelArgs {
                model: model.clone(),
                vocab: a.vocab.clone().expect("clap requires vocab with model"),
            };
            let (ck, tok) = m.load()?;
            let dc = a.decode.config();
            let sources: Vec<&str> = corpus.sources().collect();
            let hyps = translate_corpus(&ck.config, &ck.params, &tok, &sources, &dc, a.decode.decode_seed)?;
            let tf = teacher_forced(&ck.config, &ck.params, &tok, &corpus)?;
            metrics.insert("nll".into(), tf.nll.into());
            metrics.insert("entropy".into(), tf.entropy.into());
            metrics.insert("decode".into(), serde_json::to_value(&dc)?);
            let p = a.out.join("hypotheses.txt");
            fs::create_dir_all(&a.out)?;
            fs::write(&p, hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
            outputs.push(p);
            hyps
        }
        (None, Some(path)) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        _ => bail!(KdError::Usage("give either --model with --vocab, or --hyps".into())),
    };
    let score = bleu(&hyps, &refs, a.smooth)?;
    metrics.insert("bleu".into(), score.into());
    metrics.insert("sentences".into(), refs.len().into());
    println!("BLEU {score:.2}");
    let p = a.out.join("metrics.json");
    fs::create_dir_all(&a.out)?;
    fs::write(&p, serde_json::to_string_pretty(&metrics)?)?;
    outputs.push(p);
    let invocation = json!({
        "model": a.model, "vocab": a.vocab, "hyps": a.hyps, "corpus": a.corpus.corpus,
        "decode": a.decode.config(), "smooth": a.smooth,
    });
    finish(&a.out, "evaluate", invocation, &[a.decode.decode_seed], &outputs)
}

fn entropy(a: &ModelCorpusArgs) -> Result<()> {
    let (ck, tok) = a.model.load()?;
    let corpus = a.corpus.load()?;
    let tf = teacher_forced(&ck.config, &ck.params, &tok, &corpus)?;
    println!("entropy {:.4} nats over {} tokens (nll {:.4})", tf.entropy, tf.tokens, tf.nll);
    let p = a.out.join("entropy.json");
    fs::create_dir_all(&a.out)?;
    let body = json!({ "mode": "teacher-forced", "entropy": tf.entropy, "nll": tf.nll, "tokens": tf.tokens });
    fs::write(&p, serde_json::to_string_pretty(&body)?)?;
    let invocation = json!({ "model": a.model.model, "vocab": a.model.vocab, "corpus": a.corpus.corpus });
    finish(&a.out, "entropy", invocation, &[], &[p])
}

fn topk(a: &TopkArgs) -> Result<()> {
    let (ck, tok) = a.model.load()?;
    let corpus = a.corpus.load()?;
    let base = DecodeConfig {
        max_len: a.max_len,
        ..DecodeConfig::greedy()
    };
    let sweep = topk_sweep(&ck.config, &ck.params, &tok, &corpus, &a.ks, &a.seeds, &base)?;
    let mut tsv = String::from("k\tmean\tspread\tdegradation\n");
    for p in &sweep.points {
        let d = sweep.degradation(p.k).unwrap_or(0.0);
        println!("k={:<3} BLEU {:6.2} ± {:.2}  (-{:.2})", p.k, p.mean, p.spread, d);
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", p.k, p.mean, p.spread, d));
    }
    fs::create_dir_all(&a.out)?;
    let (jp, tp) = (a.out.join("topk.json"), a.out.join("topk.tsv"));
    fs::write(&jp, serde_json::to_string_pretty(&sweep)?)?;
    fs::write(&tp, tsv)?;
    let invocation = json!({
        "model": a.model.model, "vocab": a.model.vocab, "corpus": a.corpus.corpus,
        "ks": a.ks, "seeds": a.seeds, "max_len": a.max_len,
    });
    finish(&a.out, "topk-sweep", invocation, &a.seeds, &[jp, tp])
}

fn experiment(a: &ExperimentArgs) -> Result<()> {
    let mut spec = match (&a.config, &a.recipe) {
        (Some(p), _) => ExperimentSpec::load(p)?,
        (None, Some(name)) => ExperimentSpec::recipe(name)
            .ok_or_else(|| KdError::Usage(format!("unknown recipe {name:?}; available: paper-mini")))?,
        (None, None) => unreachable!("clap requires a config or recipe"),
    };
    if let Some(dir) = &a.output_dir {
        spec.output_dir = dir.clone();
    }
    if a.print_recipe {
        print!("{}", spec.to_toml());
        return Ok(());
    }
    spec.validate()?;
    if a.check {
        println!("{} is valid", spec.name);
        return Ok(());
    }
    info!(
        "running {} into {} ({}={})",
        spec.name,
        spec.run_dir().display(),
        WORKERS_ENV,
        std::env::var(WORKERS_ENV).unwrap_or_else(|_| "all cores".into())
    );
    let out = run_experiment(&spec)?;
    print!("{}", out.report.render_table());
    println!(
        "{} stages run, {} reused; report in {}",
        out.trained.len(),
        out.reused.len(),
        out.dir.join("reports").display()
    );
    Ok(())
}

/// Exit code for a failure: 2 for invalid input, 3 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<KdError>()) {
        Some(KdError::Validation(_) | KdError::Config(_) | KdError::Usage(_) | KdError::Size(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BpeTrain(a) => bpe_train(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Entropy(a) => entropy(a),
        Command::TopkSweep(a) => topk(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
