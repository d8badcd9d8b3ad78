//! Pre-LayerNorm encoder-decoder transformer.
//!
//! Each block computes `x + Sublayer(LayerNorm(x))`; both stacks end with a
//! final LayerNorm. Positions are encoded with fixed sinusoids added to the
//! `sqrt(d_model)`-scaled token embeddings. With `tied_embeddings` one table
//! serves as source embedding, target embedding and output projection.

mod checkpoint;
mod forward;

use std::collections::HashMap;

use kdlab_compute::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KdError, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{forward, Batch, Bound, Encoded};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

fn d_model_default() -> usize {
    512
}
fn d_ff_default() -> usize {
    2048
}
fn heads_default() -> usize {
    8
}
fn dropout_default() -> f64 {
    0.1
}
fn max_len_default() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    #[serde(default = "d_model_default")]
    pub d_model: usize,
    #[serde(default = "d_ff_default")]
    pub d_ff: usize,
    #[serde(default = "heads_default")]
    pub heads: usize,
    #[serde(default = "dropout_default")]
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest source or target sequence (including BOS/EOS) accepted.
    #[serde(default = "max_len_default")]
    pub max_len: usize,
    pub tied_embeddings: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Reference-width model (512/2048/8) with the given depth and vocabulary.
    pub fn new(encoder_layers: usize, decoder_layers: usize, vocab: usize) -> Self {
        Self {
            encoder_layers,
            decoder_layers,
            d_model: d_model_default(),
            d_ff: d_ff_default(),
            heads: heads_default(),
            dropout: dropout_default(),
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_len: max_len_default(),
            tied_embeddings: true,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            errs.push("encoder_layers and decoder_layers must be at least 1".to_string());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            errs.push(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_ff == 0 {
            errs.push("d_ff must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            errs.push("vocabulary sizes must be positive".to_string());
        }
        if self.tied_embeddings && self.src_vocab != self.tgt_vocab {
            errs.push("tied embeddings need equal source and target vocabularies".to_string());
        }
        if self.max_len < 2 {
            errs.push("max_len must be at least 2".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(KdError::Validation(errs))
        }
    }

    /// Depth label such as `2x2`.
    pub fn size_label(&self) -> String {
        format!("{}x{}", self.encoder_layers, self.decoder_layers)
    }

    /// Closed-form parameter count.
    ///
    /// With `d = d_model`, `f = d_ff`:
    /// attention `4d² + 4d`, feed-forward `2df + f + d`, LayerNorm `2d`;
    /// encoder layer = attention + feed-forward + 2 LayerNorms,
    /// decoder layer = 2 attentions + feed-forward + 3 LayerNorms,
    /// plus 2 final LayerNorms and the embeddings
    /// (`V·d` tied, `Vs·d + 2·Vt·d` untied; no output bias).
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * f + f + d;
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        let emb = if self.tied_embeddings {
            self.src_vocab * d
        } else {
            self.src_vocab * d + 2 * self.tgt_vocab * d
        };
        self.encoder_layers * enc + self.decoder_layers * dec + 2 * ln + emb
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter, in canonical order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let emb = Init::Normal(0.5 / (d as f64).sqrt());
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    if cfg.tied_embeddings {
        push("embed.shared".into(), vec![cfg.src_vocab, d], emb);
    } else {
        push("embed.src".into(), vec![cfg.src_vocab, d], emb);
        push("embed.tgt".into(), vec![cfg.tgt_vocab, d], emb);
        push("embed.out".into(), vec![cfg.tgt_vocab, d], emb);
    }
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.g"), vec![d], Init::Ones);
        push(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.w{m}"), vec![d, d], lin(d));
            push(format!("{p}.b{m}"), vec![d], Init::Zeros);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, f], lin(d));
        push(format!("{p}.b1"), vec![f], Init::Zeros);
        push(format!("{p}.w2"), vec![f, d], lin(f));
        push(format!("{p}.b2"), vec![d], Init::Zeros);
    };
    for i in 0..cfg.encoder_layers {
        ln(&mut push, &format!("enc.{i}.ln1"));
        attn(&mut push, &format!("enc.{i}.self"));
        ln(&mut push, &format!("enc.{i}.ln2"));
        ffn(&mut push, &format!("enc.{i}.ffn"));
    }
    ln(&mut push, "enc.ln");
    for i in 0..cfg.decoder_layers {
        ln(&mut push, &format!("dec.{i}.ln1"));
        attn(&mut push, &format!("dec.{i}.self"));
        ln(&mut push, &format!("dec.{i}.ln2"));
        attn(&mut push, &format!("dec.{i}.cross"));
        ln(&mut push, &format!("dec.{i}.ln3"));
        ffn(&mut push, &format!("dec.{i}.ffn"));
    }
    ln(&mut push, "dec.ln");
    out
}

/// Named parameter tensors of one transformer, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

pub type ModelParams = Params<f32>;

impl<T: Element> Params<T> {
    pub(crate) fn from_named(named: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors): (Vec<String>, Vec<Tensor<T>>) = named.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub(crate) fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Checks that names and shapes agree with `cfg`'s layout.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = layout(cfg);
        if expect.len() != self.len() {
            return Err(KdError::Checkpoint(format!(
                "config expects {} tensors, found {}",
                expect.len(),
                self.len()
            )));
        }
        for ((name, shape, _), (n, t)) in expect.iter().zip(self.iter()) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(KdError::Checkpoint(format!(
                    "tensor {n} {:?} does not match config entry {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: linear weights `N(0, 1/fan_in)`, embeddings
/// `N(0, 0.25/d_model)`, biases 0, LayerNorm gains 1.
pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = layout(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            let t = Tensor::new(&shape, data).expect("layout shapes are consistent");
            (name, t)
        })
        .collect();
    Ok(Params::from_named(named))
}
