//! Experiment recipes: one TOML file describes the task, tokenizer, teacher,
//! student grid and evaluation suite; [`run_experiment`] executes it into a
//! run directory.
//!
//! ```text
//! runs/<name>/
//!   config.toml          normalized copy of the config
//!   vocab.json
//!   manifest.json        stage outputs and every artifact with its SHA-256
//!   data/                train/valid/test corpora, per-seed real and synthetic subsets
//!   teacher/             model.ckpt, log.jsonl, metrics.json
//!   students/<size>_<data>_<kind>/seed<k>/   model.ckpt, log.jsonl, metrics.json
//!   switch/<size>_<data>_<direction>/seed<k>/
//!   reports/             report.txt, records.jsonl, seeds.jsonl, switch.json, plots/
//! ```

mod manifest;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::toy::ToyTaskSpec;
use crate::data::LanguageId;
use crate::decode::{DecodeConfig, DecodeMode};
use crate::error::{KdError, Result};
use crate::eval::{TargetKind, DEFAULT_SWEEP_KS, DEFAULT_SWEEP_SEEDS};
use crate::model::{Activation, ModelConfig};
use crate::train::{AdamConfig, TrainPlan};

pub use manifest::Manifest;
pub use run::{run_experiment, CellResult, ExperimentOutcome, StudentMetrics, SwitchResult};

/// Environment variable bounding how many grid cells train at once.
pub const WORKERS_ENV: &str = "KDLAB_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    Toy(ToyTaskSpec),
    Files {
        /// Corpus prefixes (`<prefix>.src` / `<prefix>.tgt`).
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
        src_lang: LanguageId,
        tgt_lang: LanguageId,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    pub target_size: usize,
    #[serde(default = "yes")]
    pub shared: bool,
}

fn d_heads() -> usize {
    4
}
fn d_dropout() -> f64 {
    0.1
}
fn d_max_len() -> usize {
    64
}

/// Architecture without depth or vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "yes")]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    pub fn config(&self, size: &str, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
        let (encoder_layers, decoder_layers) = parse_size(size)?;
        Ok(ModelConfig {
            encoder_layers,
            decoder_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            dropout: self.dropout,
            src_vocab,
            tgt_vocab,
            max_len: self.max_len,
            tied_embeddings: self.tied_embeddings,
            activation: self.activation,
        })
    }
}

/// Parses an `ExD` depth label such as `2x2`.
pub fn parse_size(size: &str) -> Result<(usize, usize)> {
    let bad = || KdError::Config(format!("model size {size:?} is not of the form <enc>x<dec>"));
    let (e, d) = size.split_once('x').ok_or_else(bad)?;
    let e: usize = e.parse().map_err(|_| bad())?;
    let d: usize = d.parse().map_err(|_| bad())?;
    if e == 0 || d == 0 {
        return Err(bad());
    }
    Ok((e, d))
}

fn d_peak() -> f64 {
    1e-3
}
fn d_gamma() -> f64 {
    0.5
}
fn d_interval() -> u64 {
    500
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_clip() -> Option<f64> {
    Some(1.0)
}

/// Optimizer schedule and batching for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: u64,
    #[serde(default = "d_peak")]
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "d_gamma")]
    pub decay_rate: f64,
    #[serde(default = "d_interval")]
    pub decay_interval: u64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    pub batch_tokens: usize,
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl ScheduleSpec {
    /// Plan with consecutive phases whose lengths sum to `steps`.
    pub fn plan(&self, phases: &[(&str, u64)], seed: u64) -> TrainPlan {
        let base = TrainPlan::switching(phases, seed);
        TrainPlan {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            decay_rate: self.decay_rate,
            decay_interval: self.decay_interval,
            label_smoothing: self.label_smoothing,
            batch_tokens: self.batch_tokens,
            clip_norm: self.clip_norm,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            adam: AdamConfig::default(),
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub size: String,
    pub seed: u64,
    pub arch: ArchSpec,
    pub schedule: ScheduleSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentGrid {
    pub sizes: Vec<String>,
    pub data_sizes: Vec<usize>,
    pub kinds: Vec<TargetKind>,
    pub arch: ArchSpec,
    pub schedule: ScheduleSpec,
}

fn d_ks() -> Vec<usize> {
    DEFAULT_SWEEP_KS.to_vec()
}
fn d_sweep_seeds() -> Vec<u64> {
    DEFAULT_SWEEP_SEEDS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKSpec {
    #[serde(default = "d_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "d_sweep_seeds")]
    pub seeds: Vec<u64>,
}

fn d_fraction() -> f64 {
    0.5
}
fn d_window() -> f64 {
    0.1
}

/// Synthetic→real and real→synthetic runs for one grid cell, compared with
/// the cell's unswitched runs of the first seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSpec {
    pub size: String,
    pub data_size: usize,
    /// Switch point as a fraction of the student steps.
    #[serde(default = "d_fraction")]
    pub fraction: f64,
    /// Length of the comparison window after the switch, as a fraction of steps.
    #[serde(default = "d_window")]
    pub window: f64,
}

/// Shifted-domain evaluation data: a perturbed toy mapping, or a test corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftSpec {
    #[serde(default)]
    pub perturbation: Option<f64>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

/// Fine-tuning every student on real in-domain data of the shifted domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSpec {
    /// Number of generated pairs (toy tasks).
    #[serde(default)]
    pub size: Option<usize>,
    /// Corpus prefix (file tasks).
    #[serde(default)]
    pub train: Option<PathBuf>,
    pub schedule: ScheduleSpec,
}

fn d_final_decode() -> DecodeConfig {
    DecodeConfig::beam(4)
}
fn d_valid_size() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSuite {
    /// Decoding for reported BLEU.
    #[serde(default = "d_final_decode")]
    pub decode: DecodeConfig,
    /// Clean pairs generated for validation during training (toy tasks).
    #[serde(default = "d_valid_size")]
    pub validation_size: usize,
    #[serde(default = "yes")]
    pub entropy: bool,
    #[serde(default)]
    pub topk: Option<TopKSpec>,
    #[serde(default)]
    pub switch: Option<SwitchSpec>,
    #[serde(default)]
    pub out_of_domain: Option<DomainShiftSpec>,
    #[serde(default)]
    pub fine_tune: Option<FineTuneSpec>,
}

fn d_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data_seed: u64,
    /// Largest parameter count any model in the recipe may have.
    #[serde(default)]
    pub param_budget: Option<usize>,
    pub task: TaskSpec,
    pub tokenizer: TokenizerSpec,
    pub teacher: TeacherSpec,
    #[serde(default = "d_final_decode")]
    pub distill_decode: DecodeConfig,
    pub students: StudentGrid,
    pub eval: EvalSuite,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| KdError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| KdError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut spec = Self::from_toml(&text)?;
        spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    /// Makes relative corpus paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TaskSpec::Files { train, valid, test, .. } = &mut self.task {
            fix(train);
            fix(valid);
            fix(test);
        }
        if let Some(t) = self.eval.out_of_domain.as_mut().and_then(|d| d.test.as_mut()) {
            fix(t);
        }
        if let Some(t) = self.eval.fine_tune.as_mut().and_then(|f| f.train.as_mut()) {
            fix(t);
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    /// Checks the whole spec and reports every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    KdError::Validation(v) => errs.extend(v),
                    other => errs.push(other.to_string()),
                }
            }
        };
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            check(Err(KdError::Config(format!("invalid experiment name {:?}", self.name))));
        }
        if self.seeds.is_empty() {
            check(Err(KdError::Config("seeds must not be empty".into())));
        }
        let is_toy = matches!(self.task, TaskSpec::Toy(_));
        match &self.task {
            TaskSpec::Toy(t) => check(t.validate()),
            TaskSpec::Files { train, valid, test, .. } => {
                for p in [train, valid, test] {
                    check(corpus_exists(p));
                }
            }
        }
        let vocab = self.tokenizer.target_size;
        if self.teacher.arch.tied_embeddings && !self.tokenizer.shared
            || self.students.arch.tied_embeddings && !self.tokenizer.shared
        {
            check(Err(KdError::Config("tied embeddings need a shared tokenizer".into())));
        }
        let budget = |what: &str, cfg: &ModelConfig| -> Result<()> {
            cfg.validate()?;
            match self.param_budget {
                Some(b) if cfg.param_count() > b => Err(KdError::Config(format!(
                    "{what} has up to {} parameters, over the budget of {b}",
                    cfg.param_count()
                ))),
                _ => Ok(()),
            }
        };
        match self.teacher.arch.config(&self.teacher.size, vocab, vocab) {
            Ok(cfg) => check(budget(&format!("teacher {}", self.teacher.size), &cfg)),
            Err(e) => check(Err(e)),
        }
        check(self.teacher.schedule.plan(&[("t", self.teacher.schedule.steps)], 0).validate());
        let g = &self.students;
        if g.sizes.is_empty() || g.data_sizes.is_empty() || g.kinds.is_empty() {
            check(Err(KdError::Config("student grid must not be empty".into())));
        }
        for size in &g.sizes {
            match g.arch.config(size, vocab, vocab) {
                Ok(cfg) => check(budget(&format!("student {size}"), &cfg)),
                Err(e) => check(Err(e)),
            }
        }
        if let TaskSpec::Toy(t) = &self.task {
            for &n in &g.data_sizes {
                if n == 0 || n > t.size {
                    check(Err(KdError::Config(format!("data size {n} outside 1..={}", t.size))));
                }
            }
        }
        let mut kinds = g.kinds.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != g.kinds.len() {
            check(Err(KdError::Config("student kinds contain duplicates".into())));
        }
        check(g.schedule.plan(&[("s", g.schedule.steps)], 0).validate());
        check(self.distill_decode.validate());
        check(self.eval.decode.validate());
        if let Some(t) = &self.eval.topk {
            if t.ks.first() != Some(&1) || t.ks.windows(2).any(|w| w[0] >= w[1]) {
                check(Err(KdError::Config("topk.ks must be strictly ascending and start at 1".into())));
            }
            if t.seeds.is_empty() {
                check(Err(KdError::Config("topk.seeds must not be empty".into())));
            }
        }
        if let Some(s) = &self.eval.switch {
            if !g.sizes.contains(&s.size) || !g.data_sizes.contains(&s.data_size) {
                check(Err(KdError::Config("switch cell must be part of the student grid".into())));
            }
            if !(kinds.contains(&TargetKind::Real) && kinds.contains(&TargetKind::Synthetic)) {
                check(Err(KdError::Config("switch study needs both target kinds".into())));
            }
            if g.schedule.eval_every == 0 {
                check(Err(KdError::Config("switch study needs students.schedule.eval_every > 0".into())));
            }
            let at = (s.fraction * g.schedule.steps as f64).round() as u64;
            if !(0.0 < s.fraction && s.fraction < 1.0) || at == 0 || at >= g.schedule.steps {
                check(Err(KdError::Config(format!("switch fraction {} must fall inside the run", s.fraction))));
            }
            if !(s.window > 0.0) {
                check(Err(KdError::Config("switch window must be positive".into())));
            }
        }
        if let Some(d) = &self.eval.out_of_domain {
            match (is_toy, d.perturbation, &d.test) {
                (true, Some(f), None) if (0.0..=1.0).contains(&f) => {}
                (false, None, Some(p)) => check(corpus_exists(p)),
                _ => check(Err(KdError::Config(
                    "out_of_domain needs `perturbation` in [0, 1] for toy tasks or `test` for file tasks".into(),
                ))),
            }
        }
        if let Some(f) = &self.eval.fine_tune {
            if self.eval.out_of_domain.is_none() {
                check(Err(KdError::Config("fine_tune needs out_of_domain to define its domain".into())));
            }
            match (is_toy, f.size, &f.train) {
                (true, Some(n), None) if n > 0 => {}
                (false, None, Some(p)) => check(corpus_exists(p)),
                _ => check(Err(KdError::Config(
                    "fine_tune needs `size` for toy tasks or `train` for file tasks".into(),
                ))),
            }
            check(f.schedule.plan(&[("f", f.schedule.steps)], 0).validate());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(KdError::Validation(errs))
        }
    }

    /// Desk-scale recipe covering the grid, entropy, top-k, switch,
    /// out-of-domain and fine-tuning studies on the toy task.
    pub fn paper_mini() -> Self {
        let student_schedule = ScheduleSpec {
            steps: 1000,
            peak_lr: 2e-3,
            warmup_steps: 100,
            decay_rate: 0.5,
            decay_interval: 500,
            label_smoothing: 0.1,
            batch_tokens: 512,
            clip_norm: Some(1.0),
            eval_every: 25,
            checkpoint_every: 0,
        };
        Self {
            name: "paper-mini".into(),
            output_dir: d_output(),
            seeds: vec![0, 1, 2],
            data_seed: 0,
            param_budget: Some(3_000_000),
            task: TaskSpec::Toy(ToyTaskSpec {
                vocab_size_src: 200,
                vocab_size_tgt: 200,
                length_range: [3, 7],
                mapping_seed: 1,
                noise_rate: 0.3,
                domain_perturbation: None,
                size: 50_000,
                test_size: 300,
                zipf_exponent: 1.0,
            }),
            tokenizer: TokenizerSpec {
                target_size: 1200,
                shared: true,
            },
            teacher: TeacherSpec {
                size: "4x4".into(),
                seed: 0,
                arch: ArchSpec {
                    d_model: 128,
                    d_ff: 256,
                    heads: 4,
                    dropout: 0.1,
                    max_len: 32,
                    tied_embeddings: true,
                    activation: Activation::Relu,
                },
                schedule: ScheduleSpec {
                    steps: 800,
                    peak_lr: 3e-3,
                    batch_tokens: 1024,
                    eval_every: 0,
                    ..student_schedule.clone()
                },
            },
            distill_decode: DecodeConfig {
                max_len: 20,
                ..DecodeConfig::beam(4)
            },
            students: StudentGrid {
                sizes: vec!["2x2".into()],
                data_sizes: vec![2000],
                kinds: vec![TargetKind::Real, TargetKind::Synthetic],
                arch: ArchSpec {
                    d_model: 64,
                    d_ff: 256,
                    heads: 4,
                    dropout: 0.1,
                    max_len: 32,
                    tied_embeddings: true,
                    activation: Activation::Relu,
                },
                schedule: student_schedule,
            },
            eval: EvalSuite {
                decode: DecodeConfig {
                    max_len: 20,
                    ..DecodeConfig::beam(4)
                },
                validation_size: 200,
                entropy: true,
                topk: Some(TopKSpec {
                    ks: d_ks(),
                    seeds: d_sweep_seeds(),
                }),
                switch: Some(SwitchSpec {
                    size: "2x2".into(),
                    data_size: 2000,
                    fraction: 0.5,
                    window: 0.1,
                }),
                out_of_domain: Some(DomainShiftSpec {
                    perturbation: Some(0.2),
                    test: None,
                }),
                fine_tune: Some(FineTuneSpec {
                    size: Some(1000),
                    train: None,
                    schedule: ScheduleSpec {
                        steps: 200,
                        peak_lr: 5e-4,
                        warmup_steps: 0,
                        decay_rate: 0.5,
                        decay_interval: 500,
                        label_smoothing: 0.1,
                        batch_tokens: 512,
                        clip_norm: Some(1.0),
                        eval_every: 0,
                        checkpoint_every: 0,
                    },
                }),
            },
        }
    }

    /// Built-in recipes by name.
    pub fn recipe(name: &str) -> Option<Self> {
        match name {
            "paper-mini" => Some(Self::paper_mini()),
            _ => None,
        }
    }
}

fn corpus_exists(prefix: &Path) -> Result<()> {
    for ext in [".src", ".tgt"] {
        let p = crate::util::suffixed(prefix, ext);
        if !p.is_file() {
            return Err(KdError::Config(format!("corpus file {} does not exist", p.display())));
        }
    }
    Ok(())
}

/// Short label for a decoding setup, e.g. `beam4`, `greedy`, `top10`.
pub fn decode_label(dc: &DecodeConfig) -> String {
    match dc.mode {
        DecodeMode::Greedy => "greedy".into(),
        DecodeMode::Beam { width } => format!("beam{width}"),
        DecodeMode::TopK { k, temperature } if temperature == 1.0 => format!("top{k}"),
        DecodeMode::TopK { k, temperature } => format!("top{k}@T{temperature}"),
    }
}
