use rand::Rng;

use crate::graph::{axis_split, permute_walk, AttentionMask, Op};
use crate::kernels::{gelu, gemm, log_softmax_into, softmax_into};
use crate::{ComputeError, Element, Graph, Result, Tensor, Var};

fn shape_err(op: &str, detail: String) -> ComputeError {
    ComputeError::Shape(format!("{op}: {detail}"))
}

impl<T: Element> Graph<T> {
    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` read the operand transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (need 2-D)")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            out.data_mut(),
            T::zero(),
        );
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]` when `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(&[g, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for gi in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &av[gi * m * k..],
                    false,
                    &bv[gi * k * n..],
                    tb,
                    &mut od[gi * m * n..],
                    T::zero(),
                );
            }
        }
        Ok(self.push(out, Op::BatchMatMul { a, b, tb }, &[a, b]))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[n]` vector to every row of a tensor whose last dimension is `n`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let w = self.value(a).last_dim();
        if self.shape(bias) != [w] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(w) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x *= c;
        }
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            if *x < T::zero() {
                *x = T::zero();
            }
        }
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = gelu(*x).0;
        }
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&shape);
        let mut row = vec![T::zero(); len];
        let mut res = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    row[j] = src[base + j * inner];
                }
                softmax_into(&row, &mut res);
                for j in 0..len {
                    out.data_mut()[base + j * inner] = res[j];
                }
            }
        }
        Ok(self.push(out, Op::Softmax { a, axis }, &[a]))
    }

    /// Softmax over the last axis of `[batch·heads, queries, keys]` scores,
    /// giving exactly zero weight to keys the mask rules out.
    pub fn masked_softmax(&mut self, a: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] != mask.batch * heads || shape[2] != mask.keys {
            return Err(shape_err(
                "masked_softmax",
                format!("scores {shape:?} vs mask batch {} keys {} heads {heads}", mask.batch, mask.keys),
            ));
        }
        let (groups, queries, keys) = (shape[0], shape[1], shape[2]);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        let mut allowed = vec![false; keys];
        for g in 0..groups {
            let b = g / heads;
            for q in 0..queries {
                let base = (g * queries + q) * keys;
                let mut max = T::neg_infinity();
                for k in 0..keys {
                    allowed[k] = mask.allows(b, q, k);
                    if allowed[k] && src[base + k] > max {
                        max = src[base + k];
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for k in 0..keys {
                    if allowed[k] {
                        let e = (src[base + k] - max).exp();
                        od[base + k] = e;
                        sum += e;
                    }
                }
                let inv = T::one() / sum;
                for k in 0..keys {
                    od[base + k] *= inv;
                }
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax { a }, &[a]))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with gain {:?} bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let keep = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let xv = self.value(x);
        let rows = xv.rows();
        let wt = T::from_usize(w).unwrap();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = if keep { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut rstd = if keep { vec![T::zero(); rows] } else { Vec::new() };
        for (r, (xr, or)) in xv.data().chunks(w).zip(out.data_mut().chunks_mut(w)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / wt;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..w {
                let h = (xr[j] - mean) * rs;
                or[j] = h * gv[j] + bv[j];
                if keep {
                    xhat[r * w + j] = h;
                }
            }
            if keep {
                rstd[r] = rs;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embed", format!("table {ts:?}")));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(ComputeError::Range(format!("id {bad} outside table of {vocab} rows")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(&[ids.len(), dim], data)?;
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    /// Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(ComputeError::Usage(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            let keep = self.rng.random::<f64>() >= p;
            mask.push(if keep { scale } else { T::zero() });
        }
        let mut out = self.value(a).clone();
        for (x, &m) in out.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        Ok(self.push(out, Op::Dropout { a, mask }, &[a]))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s = v.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| ComputeError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, total, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("{perm:?} for {shape:?}")));
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        permute_walk(&shape, perm, |o, i| data[o] = src[i]);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`, giving `[rows.len(), last_dim]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let n = av.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(ComputeError::Range(format!("row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(av.row(r));
        }
        let out = Tensor::new(&[rows.len(), w], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    /// Mean label-smoothed cross-entropy over rows of `[n, vocab]` logits.
    ///
    /// Each row's target gets weight `1 - smoothing`, every other class
    /// `smoothing / (vocab - 1)`. Rows whose target equals `pad` are skipped.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: T,
        pad: Option<usize>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        if smoothing < T::zero() || smoothing >= T::one() {
            return Err(ComputeError::Usage("label smoothing must lie in [0, 1)".into()));
        }
        let v = lv.last_dim();
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(ComputeError::Range(format!("target {bad} outside vocabulary of {v}")));
        }
        let off = if v > 1 {
            smoothing / T::from_usize(v - 1).unwrap()
        } else {
            T::zero()
        };
        let on = T::one() - smoothing;
        let keep = self.requires_grad(logits);
        let mut probs = if keep { vec![T::zero(); lv.len()] } else { Vec::new() };
        let mut lp = vec![T::zero(); v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == pad {
                continue;
            }
            log_softmax_into(lv.row(r), &mut lp);
            let mut others = T::zero();
            for (j, &l) in lp.iter().enumerate() {
                if j != t {
                    others += l;
                }
            }
            total -= on * lp[t] + off * others;
            count += 1;
            if keep {
                for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(&lp) {
                    *p = l.exp();
                }
            }
        }
        if count == 0 {
            return Err(ComputeError::EmptyBatch);
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing,
                probs,
                count,
            },
            &[logits],
        ))
    }
}
