use kdlab_compute::{AttentionMask, Element, Graph, Tensor, Var};

use super::{Activation, ModelConfig, Params, LN_EPS};
use crate::error::{KdError, Result};
use crate::tokenizer::{BOS, EOS, PAD};

/// Padded id matrices for one batch of sentence pairs.
///
/// `src` is `[size × src_len]`, `tgt_in` and `tgt_out` are `[size × tgt_len]`,
/// all row-major and padded with `PAD`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<bool>,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_valid: Vec<bool>,
}

fn pad_rows(rows: &[&[u32]]) -> (usize, Vec<usize>, Vec<bool>) {
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = vec![PAD as usize; rows.len() * len];
    let mut valid = vec![false; rows.len() * len];
    for (b, r) in rows.iter().enumerate() {
        for (i, &id) in r.iter().enumerate() {
            ids[b * len + i] = id as usize;
            valid[b * len + i] = true;
        }
    }
    (len, ids, valid)
}

impl Batch {
    /// Batch from already framed sequences. `tgt_out`, when given, must match
    /// `tgt_in` row lengths; otherwise the output side is all padding.
    pub fn new(src: &[&[u32]], tgt_in: &[&[u32]], tgt_out: Option<&[&[u32]]>) -> Result<Self> {
        if src.len() != tgt_in.len() || tgt_out.is_some_and(|o| o.len() != src.len()) {
            return Err(KdError::Usage("batch sides have different sizes".into()));
        }
        if src.iter().chain(tgt_in).any(|r| r.is_empty()) {
            return Err(KdError::Length("empty sequence in batch".into()));
        }
        let (src_len, src_ids, src_valid) = pad_rows(src);
        let (tgt_len, tgt_in_ids, tgt_valid) = pad_rows(tgt_in);
        let tgt_out_ids = match tgt_out {
            Some(o) => {
                if o.iter().zip(tgt_in).any(|(a, b)| a.len() != b.len()) {
                    return Err(KdError::Usage("tgt_out rows must match tgt_in lengths".into()));
                }
                pad_rows(o).1
            }
            None => vec![PAD as usize; tgt_in_ids.len()],
        };
        Ok(Self {
            size: src.len(),
            src_len,
            src: src_ids,
            src_valid,
            tgt_len,
            tgt_in: tgt_in_ids,
            tgt_out: tgt_out_ids,
            tgt_valid,
        })
    }

    /// Frames unframed token sequences: source `x EOS`, decoder input
    /// `BOS y`, decoder output `y EOS`.
    pub fn framed(pairs: &[(&[u32], &[u32])]) -> Result<Self> {
        let src: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| [*s, &[EOS]].concat()).collect();
        let tin: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| [&[BOS], *t].concat()).collect();
        let tout: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| [*t, &[EOS]].concat()).collect();
        fn r(v: &[Vec<u32>]) -> Vec<&[u32]> {
            v.iter().map(Vec::as_slice).collect()
        }
        Self::new(&r(&src), &r(&tin), Some(&r(&tout)))
    }

    /// Number of non-pad target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_valid.iter().filter(|&&v| v).count()
    }
}

/// Parameters inserted into one graph.
pub struct Bound<'p, T: Element> {
    params: &'p Params<T>,
    vars: Vec<Var>,
}

impl<'p, T: Element> Bound<'p, T> {
    /// Adds every parameter as a differentiable leaf (`trainable`) or a constant.
    pub fn new(g: &mut Graph<T>, params: &'p Params<T>, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { params, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }
}

fn sinusoid<T: Element>(positions: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            out.push(T::from_f64_lossy(v));
        }
    }
    out
}

fn check_ids(ids: &[usize], vocab: usize, side: &str) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(bad) => Err(KdError::Range(format!("{side} id {bad} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

struct Ctx<'a, 'p, T: Element> {
    cfg: &'a ModelConfig,
    p: &'a Bound<'p, T>,
}

impl<T: Element> Ctx<'_, '_, T> {
    fn linear(&self, g: &mut Graph<T>, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.p.v(&format!("{prefix}.{w}")))?;
        Ok(g.add_row(y, self.p.v(&format!("{prefix}.{b}")))?)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let (gain, bias) = (self.p.v(&format!("{prefix}.g")), self.p.v(&format!("{prefix}.b")));
        Ok(g.layer_norm(x, gain, bias, T::from_f64_lossy(LN_EPS))?)
    }

    /// Token embedding scaled by `sqrt(d)` plus sinusoidal positions, for a
    /// `[b × t]` id matrix.
    fn embed(&self, g: &mut Graph<T>, table: &str, ids: &[usize], t: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let e = g.embed(self.p.v(table), ids)?;
        let e = g.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        let pe = sinusoid::<T>(t, d);
        let rows = ids.len() / t.max(1);
        let tiled: Vec<T> = (0..rows).flat_map(|_| pe.iter().copied()).collect();
        let pe = g.constant(Tensor::new(&[ids.len(), d], tiled)?);
        let x = g.add(e, pe)?;
        Ok(g.dropout(x, self.cfg.dropout)?)
    }

    fn split_heads(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.cfg.heads;
        let dh = self.cfg.d_model / h;
        let x = g.reshape(x, &[b, t, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * h, t, dh])?)
    }

    fn merge_heads(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.cfg.heads;
        let dh = self.cfg.d_model / h;
        let x = g.reshape(x, &[b, h, t, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * t, h * dh])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        xq: Var,
        xkv: Var,
        b: usize,
        tq: usize,
        tk: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let dh = self.cfg.d_model / self.cfg.heads;
        let q = self.linear(g, xq, prefix, "wq", "bq")?;
        let q = g.scale(q, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let k = self.linear(g, xkv, prefix, "wk", "bk")?;
        let v = self.linear(g, xkv, prefix, "wv", "bv")?;
        let (q, k, v) = (
            self.split_heads(g, q, b, tq)?,
            self.split_heads(g, k, b, tk)?,
            self.split_heads(g, v, b, tk)?,
        );
        let scores = g.batch_matmul(q, k, true)?;
        let probs = g.masked_softmax(scores, mask, self.cfg.heads)?;
        let probs = g.dropout(probs, self.cfg.dropout)?;
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = self.merge_heads(g, ctx, b, tq)?;
        self.linear(g, ctx, prefix, "wo", "bo")
    }

    fn feed_forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, x, prefix, "w1", "b1")?;
        let h = match self.cfg.activation {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        self.linear(g, h, prefix, "w2", "b2")
    }

    fn residual(&self, g: &mut Graph<T>, x: Var, sub: Var) -> Result<Var> {
        let sub = g.dropout(sub, self.cfg.dropout)?;
        Ok(g.add(x, sub)?)
    }

    fn encoder(&self, g: &mut Graph<T>, src: &[usize], valid: &[bool], b: usize, s: usize) -> Result<Var> {
        let table = if self.cfg.tied_embeddings { "embed.shared" } else { "embed.src" };
        let mut x = self.embed(g, table, src, s)?;
        let mask = AttentionMask {
            key_valid: valid.to_vec(),
            batch: b,
            keys: s,
            causal: false,
        };
        for i in 0..self.cfg.encoder_layers {
            let h = self.norm(g, x, &format!("enc.{i}.ln1"))?;
            let a = self.attention(g, &format!("enc.{i}.self"), h, h, b, s, s, &mask)?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, &format!("enc.{i}.ln2"))?;
            let f = self.feed_forward(g, h, &format!("enc.{i}.ffn"))?;
            x = self.residual(g, x, f)?;
        }
        self.norm(g, x, "enc.ln")
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        src_valid: &[bool],
        s: usize,
        tgt: &[usize],
        tgt_valid: &[bool],
        b: usize,
        t: usize,
    ) -> Result<Var> {
        let table = if self.cfg.tied_embeddings { "embed.shared" } else { "embed.tgt" };
        let mut x = self.embed(g, table, tgt, t)?;
        let self_mask = AttentionMask {
            key_valid: tgt_valid.to_vec(),
            batch: b,
            keys: t,
            causal: true,
        };
        let cross_mask = AttentionMask {
            key_valid: src_valid.to_vec(),
            batch: b,
            keys: s,
            causal: false,
        };
        for i in 0..self.cfg.decoder_layers {
            let h = self.norm(g, x, &format!("dec.{i}.ln1"))?;
            let a = self.attention(g, &format!("dec.{i}.self"), h, h, b, t, t, &self_mask)?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, &format!("dec.{i}.ln2"))?;
            let a = self.attention(g, &format!("dec.{i}.cross"), h, memory, b, t, s, &cross_mask)?;
            x = self.residual(g, x, a)?;
            let h = self.norm(g, x, &format!("dec.{i}.ln3"))?;
            let f = self.feed_forward(g, h, &format!("dec.{i}.ffn"))?;
            x = self.residual(g, x, f)?;
        }
        self.norm(g, x, "dec.ln")
    }

    fn logits(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        let table = if self.cfg.tied_embeddings { "embed.shared" } else { "embed.out" };
        Ok(g.matmul_t(hidden, self.p.v(table), false, true)?)
    }

    fn check_lengths(&self, batch: &Batch) -> Result<()> {
        let max = self.cfg.max_len;
        if batch.src_len > max || batch.tgt_len > max {
            return Err(KdError::Length(format!(
                "sequence lengths {}/{} exceed max_len {max}",
                batch.src_len, batch.tgt_len
            )));
        }
        check_ids(&batch.src, self.cfg.src_vocab, "source")?;
        check_ids(&batch.tgt_in, self.cfg.tgt_vocab, "target")?;
        check_ids(&batch.tgt_out, self.cfg.tgt_vocab, "target")
    }
}

/// Teacher-forced logits `[size·tgt_len × tgt_vocab]` for `batch`.
///
/// Dropout is active only if `g` is a training graph.
pub fn forward<T: Element>(cfg: &ModelConfig, p: &Bound<'_, T>, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
    let ctx = Ctx { cfg, p };
    ctx.check_lengths(batch)?;
    let (b, s, t) = (batch.size, batch.src_len, batch.tgt_len);
    if b == 0 {
        return Err(KdError::Usage("empty batch".into()));
    }
    let memory = ctx.encoder(g, &batch.src, &batch.src_valid, b, s)?;
    let hidden = ctx.decoder(g, memory, &batch.src_valid, s, &batch.tgt_in, &batch.tgt_valid, b, t)?;
    ctx.logits(g, hidden)
}

/// Encoder output for a set of source sentences, reusable across decoding steps.
#[derive(Clone, Debug)]
pub struct Encoded<T: Element = f32> {
    /// `[batch·src_len × d_model]`.
    pub memory: Tensor<T>,
    pub src_valid: Vec<bool>,
    pub src_len: usize,
    pub batch: usize,
}

impl<T: Element> Encoded<T> {
    /// Runs the encoder on framed source sequences.
    pub fn new(cfg: &ModelConfig, params: &Params<T>, sources: &[&[u32]]) -> Result<Self> {
        if sources.is_empty() {
            return Ok(Self {
                memory: Tensor::zeros(&[0, cfg.d_model]),
                src_valid: Vec::new(),
                src_len: 0,
                batch: 0,
            });
        }
        if sources.iter().any(|s| s.is_empty()) {
            return Err(KdError::Length("empty source sequence".into()));
        }
        let (s, ids, valid) = pad_rows(sources);
        if s > cfg.max_len {
            return Err(KdError::Length(format!("source length {s} exceeds max_len {}", cfg.max_len)));
        }
        check_ids(&ids, cfg.src_vocab, "source")?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, false);
        let ctx = Ctx { cfg, p: &p };
        let m = ctx.encoder(&mut g, &ids, &valid, sources.len(), s)?;
        Ok(Self {
            memory: g.value(m).clone(),
            src_valid: valid,
            src_len: s,
            batch: sources.len(),
        })
    }

    /// Re-indexes sentences: entry `i` of the result is sentence `rows[i]`.
    pub fn select(&self, rows: &[usize]) -> Self {
        let (s, d) = (self.src_len, self.memory.last_dim());
        let mut mem = Vec::with_capacity(rows.len() * s * d);
        let mut valid = Vec::with_capacity(rows.len() * s);
        for &r in rows {
            mem.extend_from_slice(&self.memory.data()[r * s * d..(r + 1) * s * d]);
            valid.extend_from_slice(&self.src_valid[r * s..(r + 1) * s]);
        }
        Self {
            memory: Tensor::new(&[rows.len() * s, d], mem).expect("consistent shape"),
            src_valid: valid,
            src_len: s,
            batch: rows.len(),
        }
    }

    /// Logits `[n × tgt_vocab]` for the token following each prefix, where
    /// prefix `i` is decoded against sentence `i`. Prefixes start with BOS.
    pub fn next_logits(&self, cfg: &ModelConfig, params: &Params<T>, prefixes: &[&[u32]]) -> Result<Tensor<T>> {
        if prefixes.len() != self.batch {
            return Err(KdError::Usage(format!(
                "{} prefixes for {} encoded sentences",
                prefixes.len(),
                self.batch
            )));
        }
        if prefixes.is_empty() {
            return Ok(Tensor::zeros(&[0, cfg.tgt_vocab]));
        }
        if prefixes.iter().any(|p| p.is_empty()) {
            return Err(KdError::Length("empty decoder prefix".into()));
        }
        let (t, ids, valid) = pad_rows(prefixes);
        if t > cfg.max_len {
            return Err(KdError::Length(format!("target length {t} exceeds max_len {}", cfg.max_len)));
        }
        check_ids(&ids, cfg.tgt_vocab, "target")?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, false);
        let ctx = Ctx { cfg, p: &p };
        let memory = g.constant(self.memory.clone());
        let hidden = ctx.decoder(&mut g, memory, &self.src_valid, self.src_len, &ids, &valid, self.batch, t)?;
        let last: Vec<usize> = prefixes.iter().enumerate().map(|(i, p)| i * t + p.len() - 1).collect();
        let hidden = g.gather_rows(hidden, &last)?;
        let logits = ctx.logits(&mut g, hidden)?;
        Ok(g.value(logits).clone())
    }
}
