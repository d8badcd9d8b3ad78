//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; backward walks it once in reverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kernels::gemm;
use crate::{ComputeError, Element, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-validity and causality description for [`Graph::masked_softmax`].
#[derive(Clone, Debug)]
pub struct AttentionMask {
    /// `[batch × keys]`, false where the key is padding.
    pub key_valid: Vec<bool>,
    pub batch: usize,
    pub keys: usize,
    /// Query `q` may only see keys `k <= q`.
    pub causal: bool,
}

impl AttentionMask {
    pub fn allows(&self, b: usize, q: usize, k: usize) -> bool {
        self.key_valid[b * self.keys + k] && (!self.causal || k <= q)
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax { a: Var, axis: usize },
    MaskedSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embed { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: Option<usize>, smoothing: T, probs: Vec<T>, count: usize },
}

impl<T> Op<T> {
    #[cfg(debug_assertions)]
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embed { .. } => "embed",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
///
/// `train` switches dropout on; the dropout stream is seeded at
/// construction so a given `(seed, step)` always draws the same masks.
pub struct Graph<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) train: bool,
    pub(crate) rng: ChaCha8Rng,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// Evaluation-mode graph (dropout is the identity).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph whose dropout masks derive from `(seed, step)`.
    pub fn training(seed: u64, step: u64) -> Self {
        let mixed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        Self {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(mixed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        #[cfg(debug_assertions)]
        {
            if !value.is_finite() && parents.iter().all(|p| self.nodes[p.0].value.is_finite()) {
                panic!("{} produced a non-finite value from finite inputs", op.name());
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(ComputeError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // keep the node's own gradient around for inspection
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = if *ta {
                    (av.shape()[1], av.shape()[0])
                } else {
                    (av.shape()[0], av.shape()[1])
                };
                let n = if *tb { bv.shape()[0] } else { bv.shape()[1] };
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, av.shape());
                    if *ta {
                        // dA (k×m) = op(B) · dCᵀ
                        gemm(k, n, m, bv.data(), *tb, gd, true, ga.data_mut(), T::one());
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        gemm(m, n, k, gd, false, bv.data(), !*tb, ga.data_mut(), T::one());
                    }
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, bv.shape());
                    if *tb {
                        // dB (n×k) = dCᵀ · op(A)
                        gemm(n, m, k, gd, true, av.data(), *ta, gb.data_mut(), T::one());
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        gemm(k, m, n, av.data(), !*ta, gd, false, gb.data_mut(), T::one());
                    }
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *tb { bv.shape()[1] } else { bv.shape()[2] };
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, av.shape());
                    for gi in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[gi * m * n..],
                            false,
                            &bv.data()[gi * k * n..],
                            !*tb,
                            &mut ga.data_mut()[gi * m * k..],
                            T::one(),
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, bv.shape());
                    for gi in 0..groups {
                        if *tb {
                            gemm(
                                n,
                                m,
                                k,
                                &gd[gi * m * n..],
                                true,
                                &av.data()[gi * m * k..],
                                false,
                                &mut gb.data_mut()[gi * k * n..],
                                T::one(),
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[gi * m * k..],
                                true,
                                &gd[gi * m * n..],
                                false,
                                &mut gb.data_mut()[gi * k * n..],
                                T::one(),
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        add_into(grad_buf(grads, p, g.shape()).data_mut(), gd);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.wants(*a) {
                    add_into(grad_buf(grads, *a, g.shape()).data_mut(), gd);
                }
                if self.wants(*bias) {
                    let w = g.last_dim();
                    let gb = grad_buf(grads, *bias, &[w]).data_mut();
                    for row in gd.chunks(w) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, g.shape()).data_mut();
                    for ((o, &gv), &bb) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += gv * bb;
                    }
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, g.shape()).data_mut();
                    for ((o, &gv), &aa) in gb.iter_mut().zip(gd).zip(av) {
                        *o += gv * aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = grad_buf(grads, *a, g.shape()).data_mut();
                for (o, &gv) in ga.iter_mut().zip(gd) {
                    *o += gv * *c;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = grad_buf(grads, *a, g.shape()).data_mut();
                for ((o, &gv), &x) in ga.iter_mut().zip(gd).zip(av) {
                    if x > T::zero() {
                        *o += gv;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                let ga = grad_buf(grads, *a, g.shape()).data_mut();
                for ((o, &gv), &x) in ga.iter_mut().zip(gd).zip(av) {
                    *o += gv * crate::kernels::gelu(x).1;
                }
            }
            Op::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let ga = grad_buf(grads, *a, g.shape()).data_mut();
                let yd = y.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += gd[idx] * yd[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] += yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                let y = &node.value;
                let w = y.last_dim();
                let ga = grad_buf(grads, *a, g.shape()).data_mut();
                for ((yr, gr), out) in y.data().chunks(w).zip(gd.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                        *o += p * (q - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = g.last_dim();
                let gain_v = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = grad_buf(grads, *gain, &[w]).data_mut();
                    for (gr, xr) in gd.chunks(w).zip(xhat.chunks(w)) {
                        for ((o, &gv), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xh;
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = grad_buf(grads, *bias, &[w]).data_mut();
                    for gr in gd.chunks(w) {
                        add_into(gb, gr);
                    }
                }
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.shape()).data_mut();
                    let wt = T::from_usize(w).unwrap();
                    let mut dxhat = vec![T::zero(); w];
                    for (r, ((gr, xr), out)) in gd
                        .chunks(w)
                        .zip(xhat.chunks(w))
                        .zip(gx.chunks_mut(w))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..w {
                            dxhat[j] = gr[j] * gain_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= wt;
                        mean_dx /= wt;
                        for j in 0..w {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let w = tv.last_dim();
                let gt = grad_buf(grads, *table, tv.shape()).data_mut();
                for (&id, gr) in ids.iter().zip(gd.chunks(w)) {
                    add_into(&mut gt[id * w..(id + 1) * w], gr);
                }
            }
            Op::Dropout { a, mask } => {
                let ga = grad_buf(grads, *a, g.shape()).data_mut();
                for ((o, &gv), &m) in ga.iter_mut().zip(gd).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::Sum(a) => {
                let gv = gd[0];
                let shape = self.value(*a).shape().to_vec();
                for o in grad_buf(grads, *a, &shape).data_mut() {
                    *o += gv;
                }
            }
            Op::Mean(a) => {
                let shape = self.value(*a).shape().to_vec();
                let n = T::from_usize(shape.iter().product::<usize>().max(1)).unwrap();
                let gv = gd[0] / n;
                for o in grad_buf(grads, *a, &shape).data_mut() {
                    *o += gv;
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.value(p).shape().to_vec();
                    let plen = pshape[*axis];
                    if self.wants(p) {
                        let gp = grad_buf(grads, p, &pshape).data_mut();
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + plen) * inner];
                            add_into(&mut gp[o * plen * inner..(o + 1) * plen * inner], src);
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { a, axis, start } => {
                let ashape = self.value(*a).shape().to_vec();
                let (outer, total, inner) = axis_split(&ashape, *axis);
                let len = g.shape()[*axis];
                let ga = grad_buf(grads, *a, &ashape).data_mut();
                for o in 0..outer {
                    let dst = &mut ga[(o * total + start) * inner..(o * total + start + len) * inner];
                    add_into(dst, &gd[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Reshape(a) => {
                let ashape = self.value(*a).shape().to_vec();
                add_into(grad_buf(grads, *a, &ashape).data_mut(), gd);
            }
            Op::Permute { a, perm } => {
                let ashape = self.value(*a).shape().to_vec();
                let ga = grad_buf(grads, *a, &ashape).data_mut();
                permute_walk(&ashape, perm, |out_i, in_i| ga[in_i] += gd[out_i]);
            }
            Op::GatherRows { a, rows } => {
                let ashape = self.value(*a).shape().to_vec();
                let w = *ashape.last().unwrap_or(&1);
                let ga = grad_buf(grads, *a, &ashape).data_mut();
                for (&r, gr) in rows.iter().zip(gd.chunks(w)) {
                    add_into(&mut ga[r * w..(r + 1) * w], gr);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let off = if v > 1 {
                    *smoothing / T::from_usize(v - 1).unwrap()
                } else {
                    T::zero()
                };
                let on = T::one() - *smoothing;
                let gl = grad_buf(grads, *logits, lv.shape()).data_mut();
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *pad {
                        continue;
                    }
                    let pr = &probs[r * v..(r + 1) * v];
                    let out = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        let q = if j == t { on } else { off };
                        out[j] += (pr[j] - q) * scale;
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn grad_buf<'a, T: Element>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Visits every element of the permuted tensor, passing
/// `(output offset, input offset)`.
pub(crate) fn permute_walk(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = in_shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for o in 0..total {
        f(o, off);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
