//! Differentiable building blocks: affine maps, layer normalization, the
//! SwiGLU and LU units, the iSwiGLU activation, rotary embeddings and
//! softmax. Each builder appends nodes to an autograd [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

/// Weight layout for an affine map `x·w + b` with `w: [n_in, n_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}

/// `(x·w_in + b_in) ⊙ silu(x·w_gate + b_gate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwigluUnit<P> {
    pub value: Linear<P>,
    pub gate: Linear<P>,
}

/// Linear projection back from the gated hidden size.
#[derive(Debug, Clone, PartialEq)]
pub struct LuUnit<P> {
    pub out: Linear<P>,
}

impl<P> Linear<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<Linear<Q>, E> {
        Ok(Linear {
            w: f(&self.w)?,
            b: f(&self.b)?,
        })
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl<P> LayerNormParams<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<LayerNormParams<Q>, E> {
        Ok(LayerNormParams {
            gain: f(&self.gain)?,
            bias: f(&self.bias)?,
        })
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> SwigluUnit<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<SwigluUnit<Q>, E> {
        Ok(SwigluUnit {
            value: self.value.map(f)?,
            gate: self.gate.map(f)?,
        })
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        self.value.visit(&format!("{prefix}.value"), f);
        self.gate.visit(&format!("{prefix}.gate"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.gate.visit_mut(&format!("{prefix}.gate"), f);
    }
}

impl<P> LuUnit<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<LuUnit<Q>, E> {
        Ok(LuUnit {
            out: self.out.map(f)?,
        })
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        self.out.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

impl<T: Scalar> Linear<Tensor<T>> {
    /// Normal weights with the given std, zero bias.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[n_in, n_out], std, rng),
            b: Tensor::zeros(&[n_out]),
        }
    }
}

impl<T: Scalar> LayerNormParams<Tensor<T>> {
    pub fn init(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Scalar> SwigluUnit<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            value: Linear::init(d_in, hidden, std, rng),
            gate: Linear::init(d_in, hidden, std, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.value.w.len() + self.value.b.len() + self.gate.w.len() + self.gate.b.len()
    }
}

impl<T: Scalar> LuUnit<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(hidden: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            out: Linear::init(hidden, d_out, std, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.out.w.len() + self.out.b.len()
    }
}

/// `x·w + b` over the last axis of `x`.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &Linear<Var>) -> Result<Var> {
    let xw = g.matmul(x, p.w, false, false)?;
    g.add(xw, p.b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias, LAYER_NORM_EPS)
}

pub fn silu<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.unary(x, Unary::Silu)
}

/// Nonnegative activation `relu(z)·σ(z)`: zero for `z ≤ 0`, SiLU above.
pub fn iswiglu<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.unary(x, Unary::ISwiglu)
}

/// Scalar form of [`iswiglu`].
pub fn iswiglu_scalar(z: f64) -> f64 {
    crate::autograd::unary_fwd(Unary::ISwiglu, z)
}

pub fn swiglu<T: Scalar>(g: &mut Graph<'_, T>, x: Var, unit: &SwigluUnit<Var>) -> Result<Var> {
    let value = linear(g, x, &unit.value)?;
    let gate = linear(g, x, &unit.gate)?;
    let gate = silu(g, gate);
    g.mul(value, gate)
}

pub fn lu<T: Scalar>(g: &mut Graph<'_, T>, x: Var, unit: &LuUnit<Var>) -> Result<Var> {
    linear(g, x, &unit.out)
}

pub fn softmax_lastdim<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.softmax(x, false)
}

/// Cosine/sine phase tables for rotary position embedding, indexed by
/// absolute position and frequency pair. Pairs are adjacent lanes
/// `(2i, 2i+1)` rotated by `pos · base^(-2i/dk)`.
#[derive(Debug, Clone)]
pub struct RotaryTable<T> {
    dk: usize,
    capacity: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotaryTable<T> {
    pub fn new(dk: usize, capacity: usize, base: f64) -> Result<Self> {
        if dk == 0 || !dk.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "rotary embedding needs an even head size, got {dk}"
            )));
        }
        let half = dk / 2;
        let mut cos = Vec::with_capacity(capacity * half);
        let mut sin = Vec::with_capacity(capacity * half);
        for pos in 0..capacity {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / dk as f64);
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        Ok(Self {
            dk,
            capacity,
            cos,
            sin,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dk(&self) -> usize {
        self.dk
    }

    /// `(cos, sin)` for one position and frequency pair.
    pub fn phase(&self, pos: usize, pair: usize) -> (T, T) {
        let i = pos * (self.dk / 2) + pair;
        (self.cos[i], self.sin[i])
    }

    fn rotate(&self, x: &Tensor<T>, start: usize, inverse: bool) -> Result<Tensor<T>> {
        let dk = self.dk;
        if x.rank() < 2 || x.last_dim() != dk {
            return Err(Error::ShapeMismatch(format!(
                "rotary embedding over {dk} lanes applied to {:?}",
                x.shape()
            )));
        }
        let s = x.shape()[x.rank() - 2];
        if start + s > self.capacity {
            return Err(Error::PositionOverflow {
                requested: start + s,
                capacity: self.capacity,
            });
        }
        let half = dk / 2;
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(dk).enumerate() {
            let pos = start + r % s;
            let base = pos * half;
            for i in 0..half {
                let (c, sn) = (self.cos[base + i], self.sin[base + i]);
                let sn = if inverse { -sn } else { sn };
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * sn;
                row[2 * i + 1] = a * sn + b * c;
            }
        }
        Ok(out)
    }

    /// Rotate `[.., s, dk]` so that row `p` uses position `start + p`.
    pub fn apply(&self, x: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
        self.rotate(x, start, false)
    }

    /// Transpose (inverse) rotation; used for gradients.
    pub fn apply_inverse(&self, x: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
        self.rotate(x, start, true)
    }
}

pub fn rope_apply<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    start_pos: usize,
    table: &'a RotaryTable<T>,
) -> Result<Var> {
    g.rope(x, table, start_pos)
}
