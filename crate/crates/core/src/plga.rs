//! Power law graph attention.
//!
//! From the rotary-embedded query the block derives, per head:
//!
//! * a density operator `D = QᵀQ / s`,
//! * `A`, the output of a deep residual network of gated linear units
//!   applied row-wise to `D` (shared by all heads of a layer),
//! * the metric tensor `A_LM = iswiglu(A·W_a + B_a) + ε`,
//! * the potential tensor `A_P = A_LM ^ P` (elementwise, learned `P`),
//! * the energy-curvature tensor `G_LM = W_g·A_P + B_g`.
//!
//! Attention then projects queries and keys through `G_LM`:
//! `softmax(q·G_LM·kᵀ / √dk)·v`. With `G_LM = I` this is scaled
//! dot-product attention.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, LayerNormParams, LuUnit, SwigluUnit};
use crate::tensor::{Scalar, Tensor};

/// Per-head learned tensors, each stored as `[h, dk, dk]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlgaHeadParams<P> {
    pub w_a: P,
    pub b_a: P,
    /// Power coefficients.
    pub p: P,
    pub w_g: P,
    pub b_g: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GluPair<P> {
    pub swiglu: SwigluUnit<P>,
    pub lu: LuUnit<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<P> {
    pub pairs: Vec<GluPair<P>>,
    pub norm: LayerNormParams<P>,
}

/// Row-wise residual GLU network shared by all heads of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGluNet<P> {
    pub blocks: Vec<ResidualBlock<P>>,
    pub out_norm: LayerNormParams<P>,
}

impl<P> PlgaHeadParams<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<PlgaHeadParams<Q>, E> {
        Ok(PlgaHeadParams {
            w_a: f(&self.w_a)?,
            b_a: f(&self.b_a)?,
            p: f(&self.p)?,
            w_g: f(&self.w_g)?,
            b_g: f(&self.b_g)?,
        })
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        f(format!("{prefix}.w_a"), &self.w_a);
        f(format!("{prefix}.b_a"), &self.b_a);
        f(format!("{prefix}.p"), &self.p);
        f(format!("{prefix}.w_g"), &self.w_g);
        f(format!("{prefix}.b_g"), &self.b_g);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.w_a"), &mut self.w_a);
        f(format!("{prefix}.b_a"), &mut self.b_a);
        f(format!("{prefix}.p"), &mut self.p);
        f(format!("{prefix}.w_g"), &mut self.w_g);
        f(format!("{prefix}.b_g"), &mut self.b_g);
    }
}

impl<P> ResidualGluNet<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<ResidualGluNet<Q>, E> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                Ok(ResidualBlock {
                    pairs: b
                        .pairs
                        .iter()
                        .map(|p| {
                            Ok(GluPair {
                                swiglu: p.swiglu.map(f)?,
                                lu: p.lu.map(f)?,
                            })
                        })
                        .collect::<Result<_, E>>()?,
                    norm: b.norm.map(f)?,
                })
            })
            .collect::<Result<_, E>>()?;
        Ok(ResidualGluNet {
            blocks,
            out_norm: self.out_norm.map(f)?,
        })
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, p) in b.pairs.iter().enumerate() {
                p.swiglu.visit(&format!("{prefix}.blocks.{i}.pairs.{j}.swiglu"), f);
                p.lu.visit(&format!("{prefix}.blocks.{i}.pairs.{j}.lu"), f);
            }
            b.norm.visit(&format!("{prefix}.blocks.{i}.norm"), f);
        }
        self.out_norm.visit(&format!("{prefix}.out_norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (j, p) in b.pairs.iter_mut().enumerate() {
                p.swiglu.visit_mut(&format!("{prefix}.blocks.{i}.pairs.{j}.swiglu"), f);
                p.lu.visit_mut(&format!("{prefix}.blocks.{i}.pairs.{j}.lu"), f);
            }
            b.norm.visit_mut(&format!("{prefix}.blocks.{i}.norm"), f);
        }
        self.out_norm.visit_mut(&format!("{prefix}.out_norm"), f);
    }
}

impl<T: Scalar> ResidualGluNet<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(
        dk: usize,
        a_dff: usize,
        blocks: usize,
        pairs: usize,
        rng: &mut R,
    ) -> Self {
        let std_in = 1.0 / (dk as f64).sqrt();
        let std_out = 1.0 / (a_dff as f64).sqrt() / (2.0 * (blocks * pairs) as f64).sqrt();
        Self {
            blocks: (0..blocks)
                .map(|_| ResidualBlock {
                    pairs: (0..pairs)
                        .map(|_| GluPair {
                            swiglu: SwigluUnit::init(dk, a_dff, std_in, rng),
                            lu: LuUnit::init(a_dff, dk, std_out, rng),
                        })
                        .collect(),
                    norm: LayerNormParams::init(dk),
                })
                .collect(),
            out_norm: LayerNormParams::init(dk),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

impl<T: Scalar> PlgaHeadParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(heads: usize, dk: usize, rng: &mut R) -> Self {
        let mut w_a = Tensor::<T>::randn(&[heads, dk, dk], 0.2 / (dk as f64).sqrt(), rng);
        w_a.add_assign(&Tensor::eye_stack(heads, dk));
        Self {
            w_a,
            b_a: Tensor::zeros(&[heads, dk, dk]),
            p: Tensor::ones(&[heads, dk, dk]),
            w_g: Tensor::randn(&[heads, dk, dk], 1.0 / dk as f64, rng),
            b_g: Tensor::eye_stack(heads, dk),
        }
    }
}

/// `QᵀQ / s` per `(batch, head)`: `[b, h, s, dk] -> [b, h, dk, dk]`.
pub fn density_operator<T: Scalar>(g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!("density operator on {shape:?}")));
    }
    let s = shape[shape.len() - 2];
    if s == 0 {
        return Err(Error::EmptySequence);
    }
    let gram = g.matmul(q, q, true, false)?;
    Ok(g.scale(gram, T::of(1.0 / s as f64)))
}

/// Runs every row of the `[.., dk, dk]` operand through the shared
/// residual network. Each block feeds its input through its GLU pairs in
/// sequence, adds the result back and normalizes; a final normalization
/// closes the network.
pub fn residual_net_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    d: Var,
    net: &ResidualGluNet<Var>,
) -> Result<Var> {
    let mut x = d;
    for block in &net.blocks {
        let mut y = x;
        for pair in &block.pairs {
            let hidden = nn::swiglu(g, y, &pair.swiglu)?;
            y = nn::lu(g, hidden, &pair.lu)?;
        }
        let sum = g.add(x, y)?;
        x = nn::layer_norm(g, sum, &block.norm)?;
    }
    nn::layer_norm(g, x, &net.out_norm)
}

/// `iswiglu(A·W_a + B_a) + ε`, entrywise at least `ε`.
pub fn metric_tensor<T: Scalar>(
    g: &mut Graph<'_, T>,
    a: Var,
    w_a: Var,
    b_a: Var,
    epsilon_bias: f64,
) -> Result<Var> {
    let aw = g.matmul(a, w_a, false, false)?;
    let pre = g.add(aw, b_a)?;
    let act = nn::iswiglu(g, pre);
    let eps = g.constant(Tensor::scalar(T::of(epsilon_bias)));
    g.add(act, eps)
}

/// `A_LM ^ P` entrywise.
pub fn potential_tensor<T: Scalar>(g: &mut Graph<'_, T>, a_lm: Var, p: Var) -> Result<Var> {
    g.pow(a_lm, p)
}

/// `W_g·A_P + B_g`; mixes every embedding dimension with all others.
pub fn energy_curvature<T: Scalar>(g: &mut Graph<'_, T>, a_p: Var, w_g: Var, b_g: Var) -> Result<Var> {
    let mixed = g.matmul(w_g, a_p, false, false)?;
    g.add(mixed, b_g)
}

/// `softmax(q·G·kᵀ/√dk)·v` with an optional causal mask. `g_lm` is
/// `[b, h, dk, dk]` or `[h, dk, dk]` shared across the batch.
pub fn plga_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    g_lm: Var,
    causal: bool,
) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "attention inputs q {:?}, k {:?}, v {:?}",
            qs,
            g.shape(k),
            g.shape(v)
        )));
    }
    let dk = qs[3];
    let qg = g.matmul(q, g_lm, false, false)?;
    let scores = g.matmul(qg, k, false, true)?;
    let scores = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()));
    let e_lm = g.softmax(scores, causal);
    let out = g.matmul(e_lm, v, false, false)?;
    Ok((out, e_lm))
}

/// Deductive tensors of one pass, as graph handles.
#[derive(Debug, Clone, Copy)]
pub struct PlgaVars {
    pub a: Var,
    pub a_lm: Var,
    pub a_p: Var,
    pub g_lm: Var,
}

/// Density operator through energy-curvature tensor.
pub fn energy_curvature_from_query<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    heads: &PlgaHeadParams<Var>,
    net: &ResidualGluNet<Var>,
    epsilon_bias: f64,
) -> Result<PlgaVars> {
    let d = density_operator(g, q)?;
    energy_curvature_from_density(g, d, heads, net, epsilon_bias)
}

pub fn energy_curvature_from_density<T: Scalar>(
    g: &mut Graph<'_, T>,
    d: Var,
    heads: &PlgaHeadParams<Var>,
    net: &ResidualGluNet<Var>,
    epsilon_bias: f64,
) -> Result<PlgaVars> {
    let a = residual_net_forward(g, d, net)?;
    let a_lm = metric_tensor(g, a, heads.w_a, heads.b_a, epsilon_bias)?;
    let a_p = potential_tensor(g, a_lm, heads.p)?;
    let g_lm = energy_curvature(g, a_p, heads.w_g, heads.b_g)?;
    Ok(PlgaVars { a, a_lm, a_p, g_lm })
}

/// Full PLGA: deductive outputs from `q`, then attention through `G_LM`.
pub fn plga_full<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: &PlgaHeadParams<Var>,
    net: &ResidualGluNet<Var>,
    epsilon_bias: f64,
    causal: bool,
) -> Result<(Var, PlgaVars)> {
    let d = energy_curvature_from_query(g, q, heads, net, epsilon_bias)?;
    let (out, _) = plga_attention(g, q, k, v, d.g_lm, causal)?;
    Ok((out, d))
}

/// Per-layer deductive tensors for one batch item, `[h, dk, dk]` each in
/// 64-bit. Constant-G variants carry only `g_lm`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeductive {
    pub a: Option<Tensor<f64>>,
    pub a_lm: Option<Tensor<f64>>,
    pub a_p: Option<Tensor<f64>>,
    pub g_lm: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeductiveOutputs {
    pub layers: Vec<LayerDeductive>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DeductiveKind {
    #[serde(rename = "A")]
    A,
    #[serde(rename = "A_LM")]
    ALm,
    #[serde(rename = "A_P")]
    AP,
    #[serde(rename = "G_LM")]
    GLm,
}

impl DeductiveKind {
    pub const ALL: [DeductiveKind; 4] = [Self::A, Self::ALm, Self::AP, Self::GLm];

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::ALm => "A_LM",
            Self::AP => "A_P",
            Self::GLm => "G_LM",
        }
    }
}

impl LayerDeductive {
    pub fn get(&self, kind: DeductiveKind) -> Option<&Tensor<f64>> {
        match kind {
            DeductiveKind::A => self.a.as_ref(),
            DeductiveKind::ALm => self.a_lm.as_ref(),
            DeductiveKind::AP => self.a_p.as_ref(),
            DeductiveKind::GLm => Some(&self.g_lm),
        }
    }
}

impl DeductiveOutputs {
    /// Tensors of one kind across layers; `None` if any layer lacks it.
    pub fn kind(&self, kind: DeductiveKind) -> Option<Vec<&Tensor<f64>>> {
        self.layers.iter().map(|l| l.get(kind)).collect()
    }
}
