//! Tape-based reverse-mode differentiation over a small, closed op set.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the op that produced it. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that requires them.
//! Parameters are borrowed rather than copied, so a graph lives no longer
//! than the weights it reads.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::RotaryTable;
use crate::tensor::{batched_gemm, MatmulPlan, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// `z·σ(z)`
    Silu,
    /// `relu(z)·σ(z)`
    ISwiglu,
}

enum Op<'a, T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Unary {
        a: Var,
        f: Unary,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Rope {
        x: Var,
        table: &'a RotaryTable<T>,
        start: usize,
    },
    Pow {
        base: Var,
        exp: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    DagLoss {
        w: Var,
        expm: Vec<f64>,
        clamped: Vec<bool>,
    },
    SumAll {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SwapAxes12 {
        a: Var,
    },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Tensor<T>>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// Upper bound for a single head's acyclicity penalty before it is clamped.
pub const DAG_CLAMP: f64 = 1e12;

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub(crate) fn unary_fwd<T: Scalar>(f: Unary, z: T) -> T {
    match f {
        Unary::Silu => z * sigmoid(z),
        Unary::ISwiglu => {
            if z > T::zero() {
                z * sigmoid(z)
            } else {
                T::zero()
            }
        }
    }
}

fn unary_grad<T: Scalar>(f: Unary, z: T) -> T {
    let s = sigmoid(z);
    let silu_d = s + z * s * (T::one() - s);
    match f {
        Unary::Silu => silu_d,
        Unary::ISwiglu => {
            if z > T::zero() {
                silu_d
            } else {
                T::zero()
            }
        }
    }
}

/// In-place row softmax over the last axis. `causal` masks keys that lie in
/// the future of each query row, aligned so the last query sees every key.
pub(crate) fn softmax_rows<T: Scalar>(x: &mut [T], rows_per_block: usize, cols: usize, causal: bool) {
    if cols == 0 {
        return;
    }
    let offset = cols as isize - rows_per_block as isize;
    for (r, row) in x.chunks_mut(cols).enumerate() {
        let limit = if causal {
            let qi = (r % rows_per_block) as isize;
            (qi + offset + 1).clamp(0, cols as isize) as usize
        } else {
            cols
        };
        let max = row[..limit]
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row[..limit].iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row[..limit].iter_mut() {
            *v = *v / total;
        }
        for v in row[limit..].iter_mut() {
            *v = T::zero();
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<'a, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf; `requires_grad` controls whether backward reaches it.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b), ta, tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul { a, b, ta, tb }, rg))
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || !sa.ends_with(sb) {
            return Err(shape_err(format!("{what}: {sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "add")?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x + bv[i % nb];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add { a, b }, rg))
    }

    /// `a ⊙ b` with `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "mul")?;
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x * bv[i % nb];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Scale { a, c }, rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|z| unary_fwd(f, z));
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Unary { a, f }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer norm over {d} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d.max(1);
        let mut out = xv.clone();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let dt = T::of(d as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis. With `causal`, a `[.., q, k]` score block
    /// masks key `j` for query `i` when `j > i + (k - q)`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut out = self.value(x).clone();
        let shape = out.shape().to_vec();
        let cols = out.last_dim();
        let rows_per_block = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        softmax_rows(out.data_mut(), rows_per_block, cols, causal);
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::Softmax { x }, rg)
    }

    /// Rotary embedding of a `[b, h, s, dk]` tensor whose row `p` sits at
    /// absolute position `start + p`.
    pub fn rope(&mut self, x: Var, table: &'a RotaryTable<T>, start: usize) -> Result<Var> {
        let out = table.apply(self.value(x), start)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), Op::Rope { x, table, start }, rg))
    }

    /// Elementwise `base ^ exp`, computed as `exp(exp · ln base)`; `exp`
    /// broadcasts over leading axes. Every base entry must be positive.
    pub fn pow(&mut self, base: Var, exp: Var) -> Result<Var> {
        self.check_suffix(base, exp, "pow")?;
        if let Some(bad) = self.value(base).data().iter().find(|&&v| v <= T::zero() || v.is_nan()) {
            return Err(Error::NonPositiveBase(bad.as_f64()));
        }
        let ev = self.value(exp).data();
        let ne = ev.len();
        let mut out = self.value(base).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = (ev[i % ne] * x.ln()).exp();
        }
        let rg = self.rg(&[base, exp]);
        Ok(self.push(Cow::Owned(out), Op::Pow { base, exp }, rg))
    }

    /// Row gather from a `[vocab, d]` table; output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = match tv.shape() {
            [v, d] => (*v, *d),
            s => return Err(shape_err(format!("embedding table must be rank 2, got {s:?}"))),
        };
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(shape_err(format!("{} ids for prefix {prefix:?}", ids.len())));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `[.., vocab]` logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.len() / v;
        if rows != targets.len() {
            return Err(shape_err(format!("{rows} logit rows for {} targets", targets.len())));
        }
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t].as_f64();
        }
        let out = Tensor::scalar(T::of(total / rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Cow::Owned(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over heads of `tr(exp(W ⊙ W)) − n` for a `[.., n, n]` stack.
    pub fn dag_loss(&mut self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        let n = wv.last_dim();
        if wv.rank() < 2 || wv.shape()[wv.rank() - 2] != n {
            return Err(shape_err(format!("dag loss needs square slices, got {:?}", wv.shape())));
        }
        let heads = wv.len() / (n * n);
        let mut total = 0.0;
        let mut expm = Vec::with_capacity(wv.len());
        let mut clamped = Vec::with_capacity(heads);
        for hd in 0..heads {
            let sq: Vec<f64> = wv.data()[hd * n * n..(hd + 1) * n * n]
                .iter()
                .map(|x| x.as_f64() * x.as_f64())
                .collect();
            let e = linalg::expm(&sq, n);
            let tr: f64 = (0..n).map(|i| e[i * n + i]).sum::<f64>() - n as f64;
            let over = !tr.is_finite() || tr > DAG_CLAMP;
            clamped.push(over);
            total += if over { DAG_CLAMP } else { tr };
            expm.extend(e);
        }
        let out = Tensor::scalar(T::of(total / heads as f64));
        let rg = self.rg(&[w]);
        Ok(self.push(Cow::Owned(out), Op::DagLoss { w, expm, clamped }, rg))
    }

    /// Whether any head of a dag-loss node hit [`DAG_CLAMP`].
    pub fn dag_clamped(&self, v: Var) -> bool {
        match &self.nodes[v.0].op {
            Op::DagLoss { clamped, .. } => clamped.iter().any(|&c| c),
            _ => false,
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumAll { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), Op::Reshape { a }, rg))
    }

    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 4 {
            return Err(shape_err(format!("swap_axes12 needs rank 4, got {:?}", self.shape(a))));
        }
        let out = self.value(a).swap_axes12();
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), Op::SwapAxes12 { a }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let plan = MatmulPlan::new(av.shape(), bv.shape(), ta, tb).expect("validated");
                let base = plan.geom();
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.needs(a) {
                    let mut ga = Tensor::zeros(av.shape());
                    let mut geom = base;
                    geom.nc = plan.na;
                    geom.k = n;
                    if !ta {
                        // dA = dC · op(B)ᵀ
                        geom.m = m;
                        geom.n = k;
                        geom.na = plan.batch;
                        geom.a_dims = (m, n);
                        geom.nb = plan.nb;
                        geom.b_dims = plan.b_dims;
                        batched_gemm(g.data(), false, bv.data(), !tb, ga.data_mut(), geom, true);
                    } else {
                        // dA = op(B) · dCᵀ
                        geom.m = k;
                        geom.n = m;
                        geom.na = plan.nb;
                        geom.a_dims = plan.b_dims;
                        geom.nb = plan.batch;
                        geom.b_dims = (m, n);
                        batched_gemm(bv.data(), tb, g.data(), true, ga.data_mut(), geom, true);
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    let mut geom = base;
                    geom.nc = plan.nb;
                    geom.k = m;
                    if !tb {
                        // dB = op(A)ᵀ · dC
                        geom.m = k;
                        geom.n = n;
                        geom.na = plan.na;
                        geom.a_dims = plan.a_dims;
                        geom.nb = plan.batch;
                        geom.b_dims = (m, n);
                        batched_gemm(av.data(), !ta, g.data(), false, gb.data_mut(), geom, true);
                    } else {
                        // dB = dCᵀ · op(A)
                        geom.m = n;
                        geom.n = k;
                        geom.na = plan.batch;
                        geom.a_dims = (m, n);
                        geom.nb = plan.na;
                        geom.b_dims = plan.a_dims;
                        batched_gemm(g.data(), true, av.data(), ta, gb.data_mut(), geom, true);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(b) {
                    let mut gb = Tensor::zeros(self.shape(b));
                    let nb = gb.len();
                    for (j, &x) in g.data().iter().enumerate() {
                        gb.data_mut()[j % nb] = gb.data()[j % nb] + x;
                    }
                    self.accumulate(grads, b, gb);
                }
                if self.needs(a) {
                    self.accumulate(grads, a, g.clone());
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let nb = bv.len();
                if self.needs(b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    for (j, (&x, &y)) in g.data().iter().zip(av.data()).enumerate() {
                        gb.data_mut()[j % nb] = gb.data()[j % nb] + x * y;
                    }
                    self.accumulate(grads, b, gb);
                }
                if self.needs(a) {
                    let ga = Tensor::from_fn(av.shape(), |j| g.data()[j] * bv.data()[j % nb]);
                    self.accumulate(grads, a, ga);
                }
            }
            &Op::Scale { a, c } => {
                self.accumulate(grads, a, g.map(|x| x * c));
            }
            &Op::Unary { a, f } => {
                let av = self.value(a);
                let ga = Tensor::from_fn(av.shape(), |j| g.data()[j] * unary_grad(f, av.data()[j]));
                self.accumulate(grads, a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                let rows = rstd.len();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = Tensor::zeros(&[d]);
                    let mut gbias = Tensor::zeros(&[d]);
                    for r in 0..rows {
                        for j in 0..d {
                            let dy = g.data()[r * d + j];
                            gg.data_mut()[j] = gg.data()[j] + dy * xhat[r * d + j];
                            gbias.data_mut()[j] = gbias.data()[j] + dy;
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                    self.accumulate(grads, *bias, gbias);
                }
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let dt = T::of(d as f64);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dt;
                        mean_dh_h = mean_dh_h / dt;
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv[j];
                            gx.data_mut()[r * d + j] =
                                rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            &Op::Softmax { x } => {
                let cols = out.last_dim();
                let mut gx = Tensor::zeros(out.shape());
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(gx.data_mut().chunks_mut(cols))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Rope { x, table, start } => {
                let gx = table.apply_inverse(g, start).expect("validated in forward");
                self.accumulate(grads, x, gx);
            }
            &Op::Pow { base, exp } => {
                let (bv, ev) = (self.value(base), self.value(exp));
                let ne = ev.len();
                if self.needs(exp) {
                    let mut ge = Tensor::zeros(ev.shape());
                    for j in 0..bv.len() {
                        let v = g.data()[j] * out.data()[j] * bv.data()[j].ln();
                        ge.data_mut()[j % ne] = ge.data()[j % ne] + v;
                    }
                    self.accumulate(grads, exp, ge);
                }
                if self.needs(base) {
                    let gb = Tensor::from_fn(bv.shape(), |j| {
                        g.data()[j] * ev.data()[j % ne] * out.data()[j] / bv.data()[j]
                    });
                    self.accumulate(grads, base, gb);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt.data_mut()[id * d + j] = gt.data()[id * d + j] + g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let scale = g.data()[0] / T::of(targets.len() as f64);
                let mut gl = lv.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl.data_mut()[r * v..(r + 1) * v];
                    softmax_rows(row, 1, v, false);
                    row[t] = row[t] - T::one();
                    for x in row.iter_mut() {
                        *x = *x * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::DagLoss { w, expm, clamped } => {
                let wv = self.value(*w);
                let n = wv.last_dim();
                let heads = clamped.len();
                let scale = g.data()[0].as_f64() / heads as f64;
                let mut gw = Tensor::zeros(wv.shape());
                for hd in 0..heads {
                    if clamped[hd] {
                        continue;
                    }
                    let base = hd * n * n;
                    for r in 0..n {
                        for c in 0..n {
                            // d tr(exp(W⊙W)) / dW = exp(W⊙W)ᵀ ⊙ 2W
                            let e_t = expm[base + c * n + r];
                            let wrc = wv.data()[base + r * n + c].as_f64();
                            gw.data_mut()[base + r * n + c] = T::of(scale * 2.0 * wrc * e_t);
                        }
                    }
                }
                self.accumulate(grads, *w, gw);
            }
            &Op::SumAll { a } => {
                self.accumulate(grads, a, Tensor::full(self.shape(a), g.data()[0]));
            }
            &Op::Reshape { a } => {
                let ga = g.clone().reshape(self.shape(a)).expect("same size");
                self.accumulate(grads, a, ga);
            }
            &Op::SwapAxes12 { a } => {
                self.accumulate(grads, a, g.swap_axes12());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_broadcast_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let b = g.input(Tensor::from_fn(&[3], |i| i as f64), true);
        let c = g.add(a, b).unwrap();
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2]));
        let b = g.input(Tensor::ones(&[2]), true);
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 3]));
        let y = g.softmax(x, true);
        let v = g.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn pow_rejects_nonpositive_base() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let p = g.constant(Tensor::ones(&[2]));
        assert!(matches!(g.pow(a, p), Err(Error::NonPositiveBase(_))));
    }
}
