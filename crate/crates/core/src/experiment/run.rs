use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::{decode_label, ExperimentSpec, TaskSpec, WORKERS_ENV};
use crate::data::toy::{generate_toy_task, toy_mapping, ToyTaskSpec};
use crate::data::{load_corpus, save_corpus, subsample, ParallelCorpus};
use crate::decode::{translate_corpus, DecodeConfig};
use crate::distill::distill_corpus;
use crate::error::{format_err, IoContext, KdError, Result};
use crate::eval::{bleu, build_report, predictive_entropy, topk_sweep, EvalReport, RunSummary, Series, TargetKind, TopKSweep};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelParams};
use crate::tokenizer::Tokenizers;
use crate::train::{checkpoint_meta, run, RunOptions, EvalRecord, Start, TrainLog, TrainPlan};
use crate::util::{median, sha256_hex, suffixed, write_atomic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentMetrics {
    /// BLEU on the clean test set with the suite's final decoding.
    pub bleu: f64,
    pub greedy_bleu: f64,
    pub entropy: Option<f64>,
    /// Mean training loss over the last tenth of the steps.
    pub train_loss: f64,
    pub topk: Option<TopKSweep>,
    pub ood_bleu: Option<f64>,
    pub finetuned_bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub size: String,
    pub data_size: usize,
    pub kind: TargetKind,
    pub seed: u64,
    pub metrics: StudentMetrics,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchResult {
    /// `synthetic-to-real` or `real-to-synthetic`.
    pub direction: String,
    pub size: String,
    pub data_size: usize,
    pub seed: u64,
    pub switch_step: u64,
    pub window_end: u64,
    /// Largest loss of BLEU (synthetic-to-real) or gain (real-to-synthetic)
    /// against the unswitched run, over evaluations in `(switch, window_end]`.
    pub max_effect: f64,
    /// Same window, in validation loss: rise for synthetic-to-real, fall for
    /// real-to-synthetic.
    pub max_loss_effect: f64,
    /// `(step, switched BLEU, unswitched BLEU)` for every shared evaluation.
    pub curve: Vec<(u64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub teacher_bleu: f64,
    pub teacher_log: TrainLog,
    pub cells: Vec<CellResult>,
    pub switches: Vec<SwitchResult>,
    /// Fractions of targets equal to the clean mapping, `(real, synthetic)`,
    /// over all distilled subsets (toy tasks only).
    pub exact_targets: Option<(f64, f64)>,
    /// Stage keys executed in this invocation.
    pub trained: Vec<String>,
    /// Stage keys restored from the manifest.
    pub reused: Vec<String>,
}

struct Data {
    train: ParallelCorpus,
    valid: ParallelCorpus,
    test: ParallelCorpus,
    test_domain: String,
    shift_test: Option<ParallelCorpus>,
    shift_domain: Option<String>,
    finetune: Option<ParallelCorpus>,
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    root: PathBuf,
    manifest: Manifest,
    trained: Vec<String>,
    reused: Vec<String>,
}

impl Ctx<'_> {
    fn cached(&mut self, key: &str) -> bool {
        let hit = self.manifest.stage_complete(&self.root, key);
        if hit {
            info!("reusing stage {key}");
            self.reused.push(key.to_string());
        }
        hit
    }

    fn record(&mut self, key: &str, files: &[PathBuf]) -> Result<()> {
        self.manifest.record_stage(&self.root, key, files)?;
        self.manifest.save(&self.root)?;
        self.trained.push(key.to_string());
        Ok(())
    }
}

fn corpus_files(prefix: &Path) -> Vec<PathBuf> {
    [".src", ".tgt", ".meta.json"].iter().map(|e| suffixed(prefix, e)).collect()
}

fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item with up to `workers` threads; results keep item order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item processed"))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

fn data_stage(ctx: &mut Ctx<'_>) -> Result<Data> {
    let spec = ctx.spec;
    let dir = ctx.root.join("data");
    let names: Vec<&str> = {
        let mut v = vec!["train", "valid", "test"];
        if spec.eval.out_of_domain.is_some() {
            v.push("test-shift");
        }
        if spec.eval.fine_tune.is_some() {
            v.push("finetune");
        }
        v
    };
    let (test_domain, shift_domain) = match &spec.task {
        TaskSpec::Toy(t) => (
            t.domain(),
            spec.eval.out_of_domain.as_ref().and_then(|d| d.perturbation).map(|f| {
                ToyTaskSpec {
                    domain_perturbation: Some(f),
                    ..t.clone()
                }
                .domain()
            }),
        ),
        TaskSpec::Files { .. } => ("test".to_string(), spec.eval.out_of_domain.as_ref().map(|_| "shift".to_string())),
    };
    let (src_lang, tgt_lang) = match &spec.task {
        TaskSpec::Toy(_) => (crate::data::LanguageId::new("src")?, crate::data::LanguageId::new("tgt")?),
        TaskSpec::Files { src_lang, tgt_lang, .. } => (src_lang.clone(), tgt_lang.clone()),
    };
    if !ctx.cached("data") {
        let mut corpora: Vec<(&str, ParallelCorpus)> = Vec::new();
        match &spec.task {
            TaskSpec::Toy(t) => {
                let (train, test) = generate_toy_task(t, spec.data_seed)?;
                let small = |extra: ToyTaskSpec| ToyTaskSpec { size: 1, ..extra };
                let valid_spec = ToyTaskSpec {
                    test_size: spec.eval.validation_size,
                    ..small(t.clone())
                };
                let (_, valid) = generate_toy_task(&valid_spec, spec.data_seed.wrapping_add(1))?;
                corpora.extend([("train", train), ("valid", valid), ("test", test)]);
                if let Some(f) = spec.eval.out_of_domain.as_ref().and_then(|d| d.perturbation) {
                    let shifted = ToyTaskSpec {
                        domain_perturbation: Some(f),
                        ..t.clone()
                    };
                    let (_, shift_test) = generate_toy_task(&small(shifted.clone()), spec.data_seed)?;
                    corpora.push(("test-shift", shift_test));
                    if let Some(n) = spec.eval.fine_tune.as_ref().and_then(|ft| ft.size) {
                        let ft_spec = ToyTaskSpec {
                            size: n,
                            test_size: 1,
                            ..shifted
                        };
                        let (ft, _) = generate_toy_task(&ft_spec, spec.data_seed.wrapping_add(2))?;
                        corpora.push(("finetune", ft));
                    }
                }
            }
            TaskSpec::Files { train, valid, test, .. } => {
                let load = |p: &Path| load_corpus(p, src_lang.clone(), tgt_lang.clone());
                corpora.extend([("train", load(train)?), ("valid", load(valid)?), ("test", load(test)?)]);
                if let Some(p) = spec.eval.out_of_domain.as_ref().and_then(|d| d.test.as_ref()) {
                    corpora.push(("test-shift", load(p)?));
                }
                if let Some(p) = spec.eval.fine_tune.as_ref().and_then(|f| f.train.as_ref()) {
                    corpora.push(("finetune", load(p)?));
                }
            }
        }
        let mut files = Vec::new();
        for (name, c) in &corpora {
            let prefix = dir.join(name);
            save_corpus(c, &prefix, serde_json::json!({ "experiment": spec.name, "data_seed": spec.data_seed }))?;
            files.extend(corpus_files(&prefix));
        }
        ctx.record("data", &files)?;
    }
    let load = |name: &str| load_corpus(&dir.join(name), src_lang.clone(), tgt_lang.clone());
    Ok(Data {
        train: load(names[0])?,
        valid: load(names[1])?,
        test: load(names[2])?,
        test_domain,
        shift_test: names.contains(&"test-shift").then(|| load("test-shift")).transpose()?,
        shift_domain,
        finetune: names.contains(&"finetune").then(|| load("finetune")).transpose()?,
    })
}

fn vocab_stage(ctx: &mut Ctx<'_>, data: &Data) -> Result<Tokenizers> {
    let path = ctx.root.join("vocab.json");
    if !ctx.cached("vocab") {
        let t = &ctx.spec.tokenizer;
        let tok = Tokenizers::train(data.train.sources(), data.train.targets(), t.target_size, t.shared, &[])?;
        tok.save(&path)?;
        ctx.record("vocab", &[path.clone()])?;
    }
    Tokenizers::load(&path)
}

fn final_bleu(cfg: &ModelConfig, params: &ModelParams, tok: &Tokenizers, corpus: &ParallelCorpus, dc: &DecodeConfig) -> Result<f64> {
    let sources: Vec<&str> = corpus.sources().collect();
    let refs: Vec<&str> = corpus.targets().collect();
    bleu(&translate_corpus(cfg, params, tok, &sources, dc, 0)?, &refs, false)
}

#[derive(Serialize, Deserialize)]
struct TeacherMetrics {
    bleu: f64,
}

fn teacher_stage(ctx: &mut Ctx<'_>, tok: &Tokenizers, data: &Data, vocab_sha: &str) -> Result<(Checkpoint, TrainLog, f64)> {
    let spec = ctx.spec;
    let dir = ctx.root.join("teacher");
    let (ck_path, log_path, metrics_path) = (dir.join("model.ckpt"), dir.join("log.jsonl"), dir.join("metrics.json"));
    let cfg = spec.teacher.arch.config(&spec.teacher.size, tok.src.len(), tok.tgt.len())?;
    if !ctx.cached("teacher") {
        let sched = &spec.teacher.schedule;
        let plan = sched.plan(&[("train", sched.steps)], spec.teacher.seed);
        let corpora = HashMap::from([("train".to_string(), &data.train)]);
        let mut opts = RunOptions {
            validation: Some(&data.valid),
            checkpoint_dir: Some(&dir),
            ..RunOptions::default()
        };
        opts.checkpoint_meta.insert("vocab_sha256".into(), vocab_sha.into());
        opts.checkpoint_meta.insert("role".into(), "teacher".into());
        info!("training teacher {} for {} steps", cfg.size_label(), sched.steps);
        let out = run(&plan, &cfg, tok, &corpora, Start::Fresh { seed: spec.teacher.seed }, &opts)?;
        let b = final_bleu(&cfg, &out.params, tok, &data.test, &spec.eval.decode)?;
        info!("teacher test BLEU {b:.2}");
        let ck = Checkpoint {
            config: cfg.clone(),
            params: out.params,
            step: out.global_step,
            meta: checkpoint_meta(&opts, out.log.last_eval()),
        };
        save_checkpoint(&ck, &ck_path)?;
        out.log.save(&log_path)?;
        write_json(&metrics_path, &TeacherMetrics { bleu: b })?;
        ctx.record("teacher", &[ck_path.clone(), log_path.clone(), metrics_path.clone()])?;
    }
    let ck = load_checkpoint(&ck_path, Some(&cfg))?;
    let m: TeacherMetrics = read_json(&metrics_path)?;
    Ok((ck, TrainLog::load(&log_path)?, m.bleu))
}

struct Subsets {
    real: ParallelCorpus,
    synthetic: ParallelCorpus,
}

fn distill_stage(ctx: &mut Ctx<'_>, tok: &Tokenizers, data: &Data, teacher: &Checkpoint) -> Result<BTreeMap<(usize, u64), Subsets>> {
    let spec = ctx.spec;
    let dir = ctx.root.join("data");
    let mut out = BTreeMap::new();
    let teacher_id = format!("teacher-{}", teacher.config.size_label());
    for &n in &spec.students.data_sizes {
        for &seed in &spec.seeds {
            let key = format!("distill/{n}/seed{seed}");
            let real_prefix = dir.join(format!("real-{n}-seed{seed}"));
            let syn_prefix = dir.join(format!("synthetic-{n}-seed{seed}"));
            if !ctx.cached(&key) {
                let real = subsample(&data.train, n, seed)?;
                info!("distilling {n} sentences (seed {seed})");
                let syn = distill_corpus(&teacher.config, &teacher.params, tok, &real, &spec.distill_decode, &teacher_id)?;
                save_corpus(&real, &real_prefix, serde_json::json!({ "subsample": n, "seed": seed }))?;
                let generation = serde_json::json!({
                    "teacher_id": teacher_id,
                    "teacher_checkpoint_sha256": ctx.manifest.stages["teacher"]["teacher/model.ckpt"],
                    "decode": spec.distill_decode,
                    "flagged": syn.flagged,
                });
                save_corpus(&syn.corpus, &syn_prefix, generation)?;
                let files: Vec<PathBuf> = corpus_files(&real_prefix).into_iter().chain(corpus_files(&syn_prefix)).collect();
                ctx.record(&key, &files)?;
            }
            let (s, t) = (data.train.src_lang().clone(), data.train.tgt_lang().clone());
            out.insert(
                (n, seed),
                Subsets {
                    real: load_corpus(&real_prefix, s.clone(), t.clone())?,
                    synthetic: load_corpus(&syn_prefix, s, t)?,
                },
            );
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct StudentJob {
    key: String,
    dir: PathBuf,
    size: String,
    data_size: usize,
    kind: TargetKind,
    seed: u64,
    /// Phases as `(kind, steps)`; one entry for grid cells, two for switch runs.
    phases: Vec<(TargetKind, u64)>,
    grid_cell: bool,
}

struct Shared<'a> {
    spec: &'a ExperimentSpec,
    tok: &'a Tokenizers,
    data: &'a Data,
    subsets: &'a BTreeMap<(usize, u64), Subsets>,
    vocab_sha: &'a str,
}

fn mean_tail_loss(log: &TrainLog) -> f64 {
    let n = (log.steps.len() / 10).max(1).min(log.steps.len());
    let tail = &log.steps[log.steps.len() - n..];
    tail.iter().map(|s| s.loss).sum::<f64>() / n as f64
}

/// Trains one student and writes its artifacts; returns the written files.
fn train_student(sh: &Shared<'_>, job: &StudentJob) -> Result<Vec<PathBuf>> {
    let spec = sh.spec;
    let grid = &spec.students;
    let cfg = grid.arch.config(&job.size, sh.tok.src.len(), sh.tok.tgt.len())?;
    let subsets = &sh.subsets[&(job.data_size, job.seed)];
    let corpora = HashMap::from([
        (TargetKind::Real.as_str().to_string(), &subsets.real),
        (TargetKind::Synthetic.as_str().to_string(), &subsets.synthetic),
    ]);
    let phases: Vec<(&str, u64)> = job.phases.iter().map(|(k, n)| (k.as_str(), *n)).collect();
    let plan: TrainPlan = grid.schedule.plan(&phases, job.seed);
    let mut opts = RunOptions {
        validation: Some(&sh.data.valid),
        ..RunOptions::default()
    };
    opts.checkpoint_meta.insert("vocab_sha256".into(), sh.vocab_sha.into());
    info!("training {} ({} steps)", job.key, plan.total_steps);
    let out = run(&plan, &cfg, sh.tok, &corpora, Start::Fresh { seed: job.seed }, &opts)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        params: out.params,
        step: out.global_step,
        meta: checkpoint_meta(&opts, out.log.last_eval()),
    };
    let (ck_path, log_path) = (job.dir.join("model.ckpt"), job.dir.join("log.jsonl"));
    save_checkpoint(&ck, &ck_path)?;
    out.log.save(&log_path)?;
    let mut files = vec![ck_path, log_path];
    if !job.grid_cell {
        return Ok(files);
    }

    let ev = &spec.eval;
    let greedy = DecodeConfig {
        mode: crate::decode::DecodeMode::Greedy,
        ..ev.decode.clone()
    };
    let entropy = ev
        .entropy
        .then(|| predictive_entropy(&cfg, &ck.params, sh.tok, &sh.data.test))
        .transpose()?;
    let topk = ev
        .topk
        .as_ref()
        .map(|t| topk_sweep(&cfg, &ck.params, sh.tok, &sh.data.test, &t.ks, &t.seeds, &greedy))
        .transpose()?;
    let ood_bleu = sh
        .data
        .shift_test
        .as_ref()
        .map(|c| final_bleu(&cfg, &ck.params, sh.tok, c, &ev.decode))
        .transpose()?;
    let finetuned_bleu = match (&ev.fine_tune, &sh.data.finetune, &sh.data.shift_test) {
        (Some(ft), Some(ft_corpus), Some(shift_test)) => {
            let plan = ft.schedule.plan(&[("finetune", ft.schedule.steps)], job.seed);
            let corpora = HashMap::from([("finetune".to_string(), ft_corpus)]);
            let tuned = run(&plan, &cfg, sh.tok, &corpora, Start::Checkpoint(Box::new(ck.clone())), &RunOptions::default())?;
            let ft_ck = Checkpoint {
                config: cfg.clone(),
                params: tuned.params,
                step: tuned.global_step,
                meta: ck.meta.clone(),
            };
            let p = job.dir.join("finetuned.ckpt");
            save_checkpoint(&ft_ck, &p)?;
            files.push(p);
            Some(final_bleu(&cfg, &ft_ck.params, sh.tok, shift_test, &ev.decode)?)
        }
        _ => None,
    };
    let metrics = StudentMetrics {
        bleu: final_bleu(&cfg, &ck.params, sh.tok, &sh.data.test, &ev.decode)?,
        greedy_bleu: final_bleu(&cfg, &ck.params, sh.tok, &sh.data.test, &greedy)?,
        entropy,
        train_loss: mean_tail_loss(&out.log),
        topk,
        ood_bleu,
        finetuned_bleu,
    };
    info!("{}: BLEU {:.2}", job.key, metrics.bleu);
    let m_path = job.dir.join("metrics.json");
    write_json(&m_path, &metrics)?;
    files.push(m_path);
    Ok(files)
}

fn switch_result(direction: &str, job: &StudentJob, run_log: &TrainLog, base: &TrainLog, switch_step: u64, window_end: u64) -> SwitchResult {
    let base_at: HashMap<u64, &EvalRecord> = base.evals.iter().map(|e| (e.step, e)).collect();
    let pairs: Vec<(&EvalRecord, &EvalRecord)> =
        run_log.evals.iter().filter_map(|e| base_at.get(&e.step).map(|&b| (e, b))).collect();
    let curve: Vec<(u64, f64, f64)> = pairs.iter().map(|(r, b)| (r.step, r.bleu, b.bleu)).collect();
    let sign = if direction == "synthetic-to-real" { -1.0 } else { 1.0 };
    let in_window = || pairs.iter().filter(|(r, _)| r.step > switch_step && r.step <= window_end);
    let max_effect = in_window().map(|(r, b)| sign * (r.bleu - b.bleu)).fold(f64::NEG_INFINITY, f64::max);
    let max_loss_effect =
        in_window().map(|(r, b)| -sign * (r.val_loss - b.val_loss)).fold(f64::NEG_INFINITY, f64::max);
    SwitchResult {
        direction: direction.to_string(),
        size: job.size.clone(),
        data_size: job.data_size,
        seed: job.seed,
        switch_step,
        window_end,
        max_effect,
        max_loss_effect,
        curve,
    }
}

fn exact_fraction(mapping: &crate::data::toy::LexicalMapping, c: &ParallelCorpus) -> (usize, usize) {
    let hits = c
        .pairs()
        .iter()
        .filter(|p| mapping.translate(&p.source).as_deref() == Some(p.target.as_str()))
        .count();
    (hits, c.len())
}

/// Executes (or resumes) an experiment and regenerates its report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let root = spec.run_dir();
    fs::create_dir_all(&root).at(&root)?;
    let config_text = spec.to_toml();
    let config_sha = sha256_hex(config_text.as_bytes());
    let manifest = match Manifest::load(&root)? {
        Some(m) if m.config_sha256 != config_sha => {
            return Err(KdError::Config(format!(
                "{} holds a different experiment; choose another name or output_dir",
                root.display()
            )))
        }
        Some(m) => m,
        None => Manifest {
            config_sha256: config_sha,
            seeds: spec.seeds.clone(),
            ..Manifest::default()
        },
    };
    write_atomic(&root.join("config.toml"), config_text.as_bytes())?;
    let mut ctx = Ctx {
        spec,
        root: root.clone(),
        manifest,
        trained: Vec::new(),
        reused: Vec::new(),
    };
    let data = data_stage(&mut ctx)?;
    let tok = vocab_stage(&mut ctx, &data)?;
    let vocab_sha = tok.fingerprint();
    let (teacher, teacher_log, teacher_bleu) = teacher_stage(&mut ctx, &tok, &data, &vocab_sha)?;
    let subsets = distill_stage(&mut ctx, &tok, &data, &teacher)?;

    let grid = &spec.students;
    let steps = grid.schedule.steps;
    let mut jobs = Vec::new();
    for size in &grid.sizes {
        for &n in &grid.data_sizes {
            for &kind in &grid.kinds {
                for &seed in &spec.seeds {
                    let cell = format!("{size}_{n}_{kind}");
                    jobs.push(StudentJob {
                        key: format!("students/{cell}/seed{seed}"),
                        dir: root.join("students").join(&cell).join(format!("seed{seed}")),
                        size: size.clone(),
                        data_size: n,
                        kind,
                        seed,
                        phases: vec![(kind, steps)],
                        grid_cell: true,
                    });
                }
            }
        }
    }
    let switch_at = spec.eval.switch.as_ref().map(|s| {
        let at = (s.fraction * steps as f64).round() as u64;
        (s, at, at + (s.window * steps as f64).round() as u64)
    });
    if let Some((s, at, _)) = switch_at {
        let seed = spec.seeds[0];
        for (name, from, to) in [
            ("synthetic-to-real", TargetKind::Synthetic, TargetKind::Real),
            ("real-to-synthetic", TargetKind::Real, TargetKind::Synthetic),
        ] {
            let cell = format!("{}_{}_{name}", s.size, s.data_size);
            jobs.push(StudentJob {
                key: format!("switch/{cell}/seed{seed}"),
                dir: root.join("switch").join(&cell).join(format!("seed{seed}")),
                size: s.size.clone(),
                data_size: s.data_size,
                kind: to,
                seed,
                phases: vec![(from, at), (to, steps - at)],
                grid_cell: false,
            });
        }
    }
    let pending: Vec<StudentJob> = jobs.iter().filter(|j| !ctx.cached(&j.key)).cloned().collect();
    let shared = Shared {
        spec,
        tok: &tok,
        data: &data,
        subsets: &subsets,
        vocab_sha: &vocab_sha,
    };
    let n_workers = workers();
    info!("{} student runs pending, {n_workers} workers", pending.len());
    // Record each finished job right away so an interrupted run keeps its progress.
    let ctx_lock = Mutex::new(&mut ctx);
    parallel_map(&pending, n_workers, |job| {
        let files = train_student(&shared, job)?;
        ctx_lock.lock().expect("manifest lock").record(&job.key, &files)
    })?;

    let mut cells = Vec::new();
    let mut logs: HashMap<String, TrainLog> = HashMap::new();
    for job in &jobs {
        let log = TrainLog::load(&job.dir.join("log.jsonl"))?;
        if job.grid_cell {
            cells.push(CellResult {
                size: job.size.clone(),
                data_size: job.data_size,
                kind: job.kind,
                seed: job.seed,
                metrics: read_json(&job.dir.join("metrics.json"))?,
                log: log.clone(),
            });
        }
        logs.insert(job.key.clone(), log);
    }
    let mut switches = Vec::new();
    if let Some((s, at, end)) = switch_at {
        let seed = spec.seeds[0];
        for (name, base_kind) in [("synthetic-to-real", TargetKind::Synthetic), ("real-to-synthetic", TargetKind::Real)] {
            let job = jobs
                .iter()
                .find(|j| j.key == format!("switch/{}_{}_{name}/seed{seed}", s.size, s.data_size))
                .expect("switch job exists");
            let base = &logs[&format!("students/{}_{}_{base_kind}/seed{seed}", s.size, s.data_size)];
            switches.push(switch_result(name, job, &logs[&job.key], base, at, end));
        }
    }

    let exact_targets = match &spec.task {
        TaskSpec::Toy(t) => {
            let m = toy_mapping(t)?;
            let (mut r, mut s, mut total) = (0, 0, 0);
            for sub in subsets.values() {
                let (hr, n) = exact_fraction(&m, &sub.real);
                r += hr;
                s += exact_fraction(&m, &sub.synthetic).0;
                total += n;
            }
            Some((r as f64 / total as f64, s as f64 / total as f64))
        }
        TaskSpec::Files { .. } => None,
    };

    let report = assemble_report(spec, &data, &cells, &switches, teacher_bleu, exact_targets)?;
    let reports = root.join("reports");
    report.write(&reports)?;
    let mut seeds_body = String::new();
    for c in &cells {
        let line = serde_json::json!({
            "size": c.size, "data_size": c.data_size, "kind": c.kind, "seed": c.seed, "metrics": c.metrics,
        });
        seeds_body.push_str(&line.to_string());
        seeds_body.push('\n');
    }
    write_atomic(&reports.join("seeds.jsonl"), seeds_body.as_bytes())?;
    write_json(&reports.join("switch.json"), &switches)?;
    ctx.manifest.refresh_artifacts(&root)?;
    ctx.manifest.save(&root)?;
    Ok(ExperimentOutcome {
        dir: root,
        report,
        teacher_bleu,
        teacher_log,
        cells,
        switches,
        exact_targets,
        trained: ctx.trained,
        reused: ctx.reused,
    })
}

fn assemble_report(
    spec: &ExperimentSpec,
    data: &Data,
    cells: &[CellResult],
    switches: &[SwitchResult],
    teacher_bleu: f64,
    exact_targets: Option<(f64, f64)>,
) -> Result<EvalReport> {
    let ev = &spec.eval;
    let final_label = decode_label(&ev.decode);
    let mut groups: BTreeMap<(String, usize, TargetKind), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.size.clone(), c.data_size, c.kind)).or_default().push(c);
    }
    let mut runs = Vec::new();
    for ((size, n, kind), group) in &groups {
        let med = |f: &dyn Fn(&StudentMetrics) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = group.iter().filter_map(|c| f(&c.metrics)).collect();
            (!v.is_empty()).then(|| median(&v))
        };
        let dom = &data.test_domain;
        let mut values = vec![
            (dom.clone(), "bleu".to_string(), med(&|m| Some(m.bleu)).expect("non-empty"), final_label.clone()),
            (dom.clone(), "bleu_greedy".into(), med(&|m| Some(m.greedy_bleu)).expect("non-empty"), "greedy".into()),
            (dom.clone(), "train_loss".into(), med(&|m| Some(m.train_loss)).expect("non-empty"), "none".into()),
        ];
        if let Some(e) = med(&|m| m.entropy) {
            values.push((dom.clone(), "entropy".into(), e, "teacher-forced".into()));
        }
        if let Some(t) = &ev.topk {
            for &k in t.ks.iter().skip(1) {
                if let Some(d) = med(&|m| m.topk.as_ref().and_then(|s| s.degradation(k))) {
                    values.push((dom.clone(), format!("topk_degradation@{k:02}"), d, format!("top{k}")));
                }
            }
        }
        if let Some(sd) = &data.shift_domain {
            if let Some(b) = med(&|m| m.ood_bleu) {
                values.push((sd.clone(), "bleu".into(), b, final_label.clone()));
            }
            if let Some(b) = med(&|m| m.finetuned_bleu) {
                values.push((sd.clone(), "bleu_finetuned".into(), b, final_label.clone()));
            }
        }
        let first = group.iter().min_by_key(|c| c.seed).expect("non-empty group");
        runs.push(RunSummary {
            model: size.clone(),
            data_size: *n,
            kind: Some(*kind),
            log: first.log.clone(),
            values,
            topk: first.metrics.topk.clone(),
        });
    }
    let mut report = build_report(&runs)?;
    for s in switches {
        report.series.push(Series {
            name: "switch_bleu".into(),
            label: format!("{}_{}_{}", s.size, s.data_size, s.direction),
            points: s.curve.iter().map(|&(step, b, _)| (step as f64, b)).collect(),
        });
        report.metadata.insert(
            format!("switch.{}", s.direction),
            format!(
                "max effect {:.2} BLEU ({:.3} validation loss) in steps ({}, {}] vs the unswitched run (seed {})",
                s.max_effect, s.max_loss_effect, s.switch_step, s.window_end, s.seed
            ),
        );
    }
    report.series.sort_by(|a, b| (&a.name, &a.label).cmp(&(&b.name, &b.label)));
    let md = &mut report.metadata;
    md.insert("aggregation".into(), format!("median over student seeds {:?}", spec.seeds));
    md.insert(
        "bleu".into(),
        "corpus BLEU-4; NFC, ASCII punctuation split, whitespace tokens; no smoothing".into(),
    );
    md.insert(
        "entropy".into(),
        "teacher-forced mean next-token entropy (nats) on clean test references".into(),
    );
    if let Some(t) = &ev.topk {
        md.insert(
            "topk".into(),
            format!("BLEU(1) - BLEU(k), mean over sampling seeds {:?}, temperature 1", t.seeds),
        );
    }
    md.insert("teacher".into(), format!("{} test BLEU {teacher_bleu:.2} ({final_label})", spec.teacher.size));
    if let Some((r, s)) = exact_targets {
        md.insert(
            "exact_targets".into(),
            format!("targets equal to the clean mapping: real {:.4}, synthetic {:.4}", r, s),
        );
    }
    Ok(report)
}
