//! The decoder stack: token embedding, pre-norm PLGA attention and SwiGLU
//! feed-forward sublayers, a final norm and an LM head tied to the
//! embedding. One of three variants decides where each layer's
//! energy-curvature tensor comes from.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::autograd::{Graph, Var};
use crate::cache::{CacheSet, LayerPrime};
use crate::config::{ModelConfig, PredefinedGKind, Variant};
use crate::error::{Error, Result};
use crate::generation::BOS;
use crate::nn::{self, LayerNormParams, Linear, LuUnit, RotaryTable, SwigluUnit, ROPE_BASE};
use crate::plga::{
    self, DeductiveOutputs, LayerDeductive, PlgaHeadParams, PlgaVars, ResidualGluNet,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<P> {
    pub q: Linear<P>,
    pub k: Linear<P>,
    pub v: Linear<P>,
    pub o: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GSource<P> {
    Plga {
        heads: PlgaHeadParams<P>,
        net: ResidualGluNet<P>,
    },
    /// Constant `[h, dk, dk]` tensor; not trained.
    Constant(P),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<P> {
    pub swiglu: SwigluUnit<P>,
    pub out: LuUnit<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<P> {
    pub attn_norm: LayerNormParams<P>,
    pub attn: Attention<P>,
    pub g: GSource<P>,
    pub ffn_norm: LayerNormParams<P>,
    pub ffn: FeedForward<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<P> {
    pub embedding: P,
    pub layers: Vec<DecoderLayer<P>>,
    pub final_norm: LayerNormParams<P>,
}

/// Name suffix of constant energy-curvature tensors.
pub const CONSTANT_G_SUFFIX: &str = ".g_lm";

pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(CONSTANT_G_SUFFIX)
}

impl<P> Weights<P> {
    pub fn map<'s, Q, E>(&'s self, f: &mut impl FnMut(&'s P) -> Result<Q, E>) -> Result<Weights<Q>, E> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(DecoderLayer {
                    attn_norm: l.attn_norm.map(f)?,
                    attn: Attention {
                        q: l.attn.q.map(f)?,
                        k: l.attn.k.map(f)?,
                        v: l.attn.v.map(f)?,
                        o: l.attn.o.map(f)?,
                    },
                    g: match &l.g {
                        GSource::Plga { heads, net } => GSource::Plga {
                            heads: heads.map(f)?,
                            net: net.map(f)?,
                        },
                        GSource::Constant(t) => GSource::Constant(f(t)?),
                    },
                    ffn_norm: l.ffn_norm.map(f)?,
                    ffn: FeedForward {
                        swiglu: l.ffn.swiglu.map(f)?,
                        out: l.ffn.out.map(f)?,
                    },
                })
            })
            .collect::<Result<_, E>>()?;
        Ok(Weights {
            embedding: f(&self.embedding)?,
            layers,
            final_norm: self.final_norm.map(f)?,
        })
    }

    /// Visits every tensor with its checkpoint name, in a fixed order.
    pub fn visit<'s>(&'s self, f: &mut impl FnMut(String, &'s P)) {
        f("embedding".into(), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            l.attn_norm.visit(&format!("{p}.attn_norm"), f);
            l.attn.q.visit(&format!("{p}.attn.q"), f);
            l.attn.k.visit(&format!("{p}.attn.k"), f);
            l.attn.v.visit(&format!("{p}.attn.v"), f);
            l.attn.o.visit(&format!("{p}.attn.o"), f);
            match &l.g {
                GSource::Plga { heads, net } => {
                    heads.visit(&format!("{p}.plga.heads"), f);
                    net.visit(&format!("{p}.plga.net"), f);
                }
                GSource::Constant(t) => f(format!("{p}{CONSTANT_G_SUFFIX}"), t),
            }
            l.ffn_norm.visit(&format!("{p}.ffn_norm"), f);
            l.ffn.swiglu.visit(&format!("{p}.ffn.swiglu"), f);
            l.ffn.out.visit(&format!("{p}.ffn.out"), f);
        }
        self.final_norm.visit("final_norm", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        f("embedding".into(), &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            l.attn_norm.visit_mut(&format!("{p}.attn_norm"), f);
            l.attn.q.visit_mut(&format!("{p}.attn.q"), f);
            l.attn.k.visit_mut(&format!("{p}.attn.k"), f);
            l.attn.v.visit_mut(&format!("{p}.attn.v"), f);
            l.attn.o.visit_mut(&format!("{p}.attn.o"), f);
            match &mut l.g {
                GSource::Plga { heads, net } => {
                    heads.visit_mut(&format!("{p}.plga.heads"), f);
                    net.visit_mut(&format!("{p}.plga.net"), f);
                }
                GSource::Constant(t) => f(format!("{p}{CONSTANT_G_SUFFIX}"), t),
            }
            l.ffn_norm.visit_mut(&format!("{p}.ffn_norm"), f);
            l.ffn.swiglu.visit_mut(&format!("{p}.ffn.swiglu"), f);
            l.ffn.out.visit_mut(&format!("{p}.ffn.out"), f);
        }
        self.final_norm.visit_mut("final_norm", f);
    }
}

/// Replacement for the energy-curvature tensor at attention time.
#[derive(Debug, Clone, PartialEq)]
pub enum GOverride {
    Identity,
    /// Zero-mean, unit-variance normal entries.
    RandomNormal { seed: u64 },
    /// One `[h, dk, dk]` tensor per layer.
    Tensors(Vec<Tensor<f32>>),
}

impl GOverride {
    pub fn resolve(&self, config: &ModelConfig) -> Result<Vec<Tensor<f32>>> {
        let (h, dk, l) = (config.num_heads, config.dk, config.num_layers);
        match self {
            GOverride::Identity => Ok(vec![Tensor::eye_stack(h, dk); l]),
            GOverride::RandomNormal { seed } => {
                let mut rng = StdRng::seed_from_u64(*seed);
                Ok((0..l).map(|_| Tensor::randn(&[h, dk, dk], 1.0, &mut rng)).collect())
            }
            GOverride::Tensors(ts) => {
                if ts.len() != l || ts.iter().any(|t| t.shape() != [h, dk, dk]) {
                    return Err(Error::InvalidOverride(format!(
                        "expected {l} tensors of shape [{h}, {dk}, {dk}]"
                    )));
                }
                Ok(ts.clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PldrModel {
    config: ModelConfig,
    pub weights: Weights<Tensor<f32>>,
    rope: RotaryTable<f32>,
}

/// Graph handles for one layer of a full pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Rotary-embedded keys, `[b, h, s, dk]`.
    pub k: Var,
    pub v: Var,
    pub q: Var,
    /// Tensor the attention used.
    pub g_used: Var,
    pub plga: Option<PlgaVars>,
}

pub struct ForwardTrace {
    pub weights: Weights<Var>,
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

fn f64_slices(t: &Tensor<f32>, batch: usize) -> Vec<Tensor<f64>> {
    // [b, h, dk, dk] or a batch-shared [h, dk, dk]
    if t.rank() == 4 {
        (0..batch).map(|b| t.index0(b).to_f64()).collect()
    } else {
        vec![t.to_f64(); batch]
    }
}

impl PldrModel {
    /// Fresh weights from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let config = config.validate()?;
        let mut rng = StdRng::seed_from_u64(config.init_seed);
        let (d, h, dk) = (config.d_model, config.num_heads, config.dk);
        let std = 0.02;
        let out_std = 0.02 / (2.0 * config.num_layers as f64).sqrt();
        let constant_g = match config.variant {
            Variant::Trainable => None,
            Variant::PredefinedG => match config.predefined_g_kind {
                Some(PredefinedGKind::Identity) => Some(GOverride::Identity),
                Some(PredefinedGKind::RandomNormal) => Some(GOverride::RandomNormal {
                    seed: config.init_seed ^ 0x5eed_9c0f_fee5,
                }),
                Some(PredefinedGKind::FromCheckpoint) | None => {
                    return Err(Error::InvalidConfig(
                        "a checkpoint-derived G must be loaded, not initialized".into(),
                    ))
                }
            },
            Variant::TransferredG => {
                return Err(Error::InvalidConfig(
                    "transferred_g models come from transfer_g or a checkpoint".into(),
                ))
            }
        };
        let constant_g = constant_g.map(|o| o.resolve(&config)).transpose()?;
        let layers = (0..config.num_layers)
            .map(|i| DecoderLayer {
                attn_norm: LayerNormParams::init(d),
                attn: Attention {
                    q: Linear::init(d, d, std, &mut rng),
                    k: Linear::init(d, d, std, &mut rng),
                    v: Linear::init(d, d, std, &mut rng),
                    o: Linear::init(d, d, out_std, &mut rng),
                },
                g: match &constant_g {
                    Some(gs) => GSource::Constant(gs[i].clone()),
                    None => GSource::Plga {
                        heads: PlgaHeadParams::init(h, dk, &mut rng),
                        net: ResidualGluNet::init(
                            dk,
                            config.a_dff,
                            config.num_residual_layers,
                            config.glu_per_residual,
                            &mut rng,
                        ),
                    },
                },
                ffn_norm: LayerNormParams::init(d),
                ffn: FeedForward {
                    swiglu: SwigluUnit::init(d, config.d_ff, std, &mut rng),
                    out: LuUnit::init(config.d_ff, d, out_std, &mut rng),
                },
            })
            .collect();
        let weights = Weights {
            embedding: Tensor::randn(&[config.vocab_size, d], std, &mut rng),
            layers,
            final_norm: LayerNormParams::init(d),
        };
        Self::from_weights(config, weights)
    }

    /// Assemble a model from explicit weights, checking every shape
    /// against the config.
    pub fn from_weights(config: ModelConfig, weights: Weights<Tensor<f32>>) -> Result<Self> {
        let config = config.validate()?;
        if weights.layers.len() != config.num_layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layers for a {}-layer config",
                weights.layers.len(),
                config.num_layers
            )));
        }
        for l in &weights.layers {
            let constant = matches!(l.g, GSource::Constant(_));
            if constant == (config.variant == Variant::Trainable) {
                return Err(Error::VariantMismatch {
                    expected: config.variant.name(),
                    found: if constant { "constant-G" } else { "trainable" },
                });
            }
        }
        let expected = Self::expected_shapes(&config);
        let mut found = Vec::new();
        weights.visit(&mut |name, t| found.push((name, t.shape().to_vec())));
        if found != expected {
            let diff = found
                .iter()
                .zip(&expected)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{a:?} vs expected {b:?}"))
                .unwrap_or_else(|| format!("{} tensors vs {} expected", found.len(), expected.len()));
            return Err(Error::ShapeMismatch(diff));
        }
        let rope = RotaryTable::new(config.dk, config.context_length, ROPE_BASE)?;
        Ok(Self {
            config,
            weights,
            rope,
        })
    }

    /// Names and shapes of every tensor a config implies, in visit order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, h, dk, a, ff) = (
            config.d_model,
            config.num_heads,
            config.dk,
            config.a_dff,
            config.d_ff,
        );
        let lin = |n_in: usize, n_out: usize| Linear {
            w: vec![n_in, n_out],
            b: vec![n_out],
        };
        let norm = |n: usize| LayerNormParams {
            gain: vec![n],
            bias: vec![n],
        };
        let layer = DecoderLayer {
            attn_norm: norm(d),
            attn: Attention {
                q: lin(d, d),
                k: lin(d, d),
                v: lin(d, d),
                o: lin(d, d),
            },
            g: match config.variant {
                Variant::Trainable => GSource::Plga {
                    heads: PlgaHeadParams {
                        w_a: vec![h, dk, dk],
                        b_a: vec![h, dk, dk],
                        p: vec![h, dk, dk],
                        w_g: vec![h, dk, dk],
                        b_g: vec![h, dk, dk],
                    },
                    net: ResidualGluNet {
                        blocks: (0..config.num_residual_layers)
                            .map(|_| plga::ResidualBlock {
                                pairs: (0..config.glu_per_residual)
                                    .map(|_| plga::GluPair {
                                        swiglu: SwigluUnit {
                                            value: lin(dk, a),
                                            gate: lin(dk, a),
                                        },
                                        lu: LuUnit { out: lin(a, dk) },
                                    })
                                    .collect(),
                                norm: norm(dk),
                            })
                            .collect(),
                        out_norm: norm(dk),
                    },
                },
                _ => GSource::Constant(vec![h, dk, dk]),
            },
            ffn_norm: norm(d),
            ffn: FeedForward {
                swiglu: SwigluUnit {
                    value: lin(d, ff),
                    gate: lin(d, ff),
                },
                out: LuUnit { out: lin(ff, d) },
            },
        };
        let shapes = Weights {
            embedding: vec![config.vocab_size, d],
            layers: vec![layer; config.num_layers],
            final_norm: norm(d),
        };
        let mut out = Vec::new();
        shapes.visit(&mut |name, s| out.push((name, s.clone())));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn rope(&self) -> &RotaryTable<f32> {
        &self.rope
    }

    /// Number of trainable scalars (constant G tensors excluded).
    pub fn trainable_param_count(&self) -> u64 {
        let mut n = 0u64;
        self.weights.visit(&mut |name, t| {
            if is_trainable(&name) {
                n += t.len() as u64;
            }
        });
        n
    }

    /// Order-sensitive FNV-1a checksum over every weight's bits.
    pub fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.weights.visit(&mut |name, t| {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        });
        h
    }

    fn check_tokens(&self, tokens: &[Vec<usize>], start: usize) -> Result<(usize, usize)> {
        let b = tokens.len();
        let s = tokens.first().map(Vec::len).unwrap_or(0);
        if b == 0 || s == 0 {
            return Err(Error::InvalidArgument("empty token batch".into()));
        }
        if tokens.iter().any(|r| r.len() != s) {
            return Err(Error::InvalidArgument("ragged token batch".into()));
        }
        if start + s > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: start + s,
                limit: self.config.context_length,
            });
        }
        let vocab = self.config.vocab_size;
        if let Some(&id) = tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok((b, s))
    }

    /// Graph for a causal full-sequence pass. Weights enter as trainable
    /// leaves (constant G as non-trainable ones) so callers can
    /// differentiate the returned logits.
    pub fn build_forward<'g>(
        &'g self,
        g: &mut Graph<'g, f32>,
        tokens: &[Vec<usize>],
        g_override: Option<&'g [Tensor<f32>]>,
    ) -> Result<ForwardTrace> {
        let (b, s) = self.check_tokens(tokens, 0)?;
        let cfg = &self.config;
        let (d, h, dk) = (cfg.d_model, cfg.num_heads, cfg.dk);
        let mut names = Vec::new();
        self.weights.visit(&mut |name, _| names.push(name));
        let mut i = 0;
        let w = self.weights.map(&mut |t| {
            let trainable = is_trainable(&names[i]);
            i += 1;
            Ok::<_, Error>(if trainable { g.param(t) } else { g.constant_ref(t) })
        })?;
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let mut x = g.embedding(w.embedding, &ids, &[b, s])?;
        let mut traces = Vec::with_capacity(cfg.num_layers);
        for (li, layer) in w.layers.iter().enumerate() {
            let hn = nn::layer_norm(g, x, &layer.attn_norm)?;
            let split = |g: &mut Graph<'g, f32>, p: &Linear<Var>| -> Result<Var> {
                let y = nn::linear(g, hn, p)?;
                let y = g.reshape(y, &[b, s, h, dk])?;
                g.swap_axes12(y)
            };
            let q = split(g, &layer.attn.q)?;
            let k = split(g, &layer.attn.k)?;
            let v = split(g, &layer.attn.v)?;
            let q = g.rope(q, &self.rope, 0)?;
            let k = g.rope(k, &self.rope, 0)?;
            let (g_lm, plga_vars) = match &layer.g {
                GSource::Plga { heads, net } => {
                    let pv = plga::energy_curvature_from_query(g, q, heads, net, cfg.epsilon_bias)?;
                    (pv.g_lm, Some(pv))
                }
                GSource::Constant(c) => (*c, None),
            };
            let g_used = match g_override {
                Some(ov) => g.constant_ref(&ov[li]),
                None => g_lm,
            };
            let (att, _) = plga::plga_attention(g, q, k, v, g_used, true)?;
            let att = g.swap_axes12(att)?;
            let att = g.reshape(att, &[b, s, d])?;
            let att = nn::linear(g, att, &layer.attn.o)?;
            x = g.add(x, att)?;
            let hn = nn::layer_norm(g, x, &layer.ffn_norm)?;
            let ff = nn::swiglu(g, hn, &layer.ffn.swiglu)?;
            let ff = nn::lu(g, ff, &layer.ffn.out)?;
            x = g.add(x, ff)?;
            traces.push(LayerTrace {
                k,
                v,
                q,
                g_used,
                plga: plga_vars,
            });
        }
        let xn = nn::layer_norm(g, x, &w.final_norm)?;
        let logits = g.matmul(xn, w.embedding, false, true)?;
        Ok(ForwardTrace {
            weights: w,
            logits,
            layers: traces,
        })
    }

    /// Deductive tensors of a finished pass, one entry per batch item.
    pub fn collect_deductive(&self, g: &Graph<'_, f32>, trace: &ForwardTrace, batch: usize) -> Vec<DeductiveOutputs> {
        let mut per_batch: Vec<DeductiveOutputs> = (0..batch)
            .map(|_| DeductiveOutputs { layers: Vec::new() })
            .collect();
        for (li, lt) in trace.layers.iter().enumerate() {
            let g_lm = match (&lt.plga, &self.weights.layers[li].g) {
                (Some(pv), _) => f64_slices(g.value(pv.g_lm), batch),
                (None, GSource::Constant(c)) => f64_slices(c, batch),
                (None, GSource::Plga { .. }) => unreachable!("plga layer without trace"),
            };
            let part = |v: Option<Var>| v.map(|v| f64_slices(g.value(v), batch));
            let a = part(lt.plga.map(|p| p.a));
            let a_lm = part(lt.plga.map(|p| p.a_lm));
            let a_p = part(lt.plga.map(|p| p.a_p));
            for (bi, out) in per_batch.iter_mut().enumerate() {
                out.layers.push(LayerDeductive {
                    a: a.as_ref().map(|v| v[bi].clone()),
                    a_lm: a_lm.as_ref().map(|v| v[bi].clone()),
                    a_p: a_p.as_ref().map(|v| v[bi].clone()),
                    g_lm: g_lm[bi].clone(),
                });
            }
        }
        per_batch
    }

    /// Causal pass over `[b][s]` tokens. Returns `[b, s, vocab]` logits and,
    /// when requested, deductive outputs per batch item.
    pub fn forward_full(
        &self,
        tokens: &[Vec<usize>],
        capture_deductive: bool,
    ) -> Result<(Tensor<f32>, Option<Vec<DeductiveOutputs>>)> {
        self.forward_full_with(tokens, capture_deductive, None)
    }

    pub fn forward_full_with(
        &self,
        tokens: &[Vec<usize>],
        capture_deductive: bool,
        g_override: Option<&[Tensor<f32>]>,
    ) -> Result<(Tensor<f32>, Option<Vec<DeductiveOutputs>>)> {
        let mut g = Graph::new();
        let trace = self.build_forward(&mut g, tokens, g_override)?;
        let deductive = capture_deductive.then(|| self.collect_deductive(&g, &trace, tokens.len()));
        Ok((g.into_value(trace.logits), deductive))
    }

    /// Full pass over a prompt that also primes `caches` for incremental
    /// decoding. Returns the logits of the last position, `[b, vocab]`.
    pub fn prime(
        &self,
        tokens: &[Vec<usize>],
        caches: &mut CacheSet,
        g_override: Option<&[Tensor<f32>]>,
        capture_deductive: bool,
    ) -> Result<(Tensor<f32>, Option<Vec<DeductiveOutputs>>)> {
        let mut g = Graph::new();
        let trace = self.build_forward(&mut g, tokens, g_override)?;
        let b = tokens.len();
        let mut primes = Vec::with_capacity(trace.layers.len());
        for lt in &trace.layers {
            let (a, a_lm, a_p, density_sum) = match &lt.plga {
                Some(pv) => {
                    // running QᵀQ lets KV-only decoding recompute G exactly
                    let gram = g.value(lt.q).matmul(g.value(lt.q), true, false)?;
                    (
                        Some(g.value(pv.a).clone()),
                        Some(g.value(pv.a_lm).clone()),
                        Some(g.value(pv.a_p).clone()),
                        Some(gram),
                    )
                }
                None => (None, None, None, None),
            };
            let g_lm = g.value(lt.g_used);
            let g_lm = if g_lm.rank() == 3 {
                Tensor::stack(&vec![g_lm.clone(); b])?
            } else {
                g_lm.clone()
            };
            primes.push(LayerPrime {
                k: g.value(lt.k).clone(),
                v: g.value(lt.v).clone(),
                g_lm,
                a,
                a_lm,
                a_p,
                density_sum,
            });
        }
        caches.prime(primes)?;
        let deductive = capture_deductive.then(|| self.collect_deductive(&g, &trace, b));
        let logits = g.value(trace.logits);
        let (s, vocab) = (tokens[0].len(), self.config.vocab_size);
        let last = Tensor::from_fn(&[b, vocab], |i| {
            let (bi, j) = (i / vocab, i % vocab);
            logits.data()[(bi * s + s - 1) * vocab + j]
        });
        Ok((last, deductive))
    }

    /// Single-token step against primed caches; attention runs unmasked
    /// over the cached keys. Returns `[b, 1, vocab]` logits and, when
    /// requested, the deductive tensors used at this step.
    pub fn forward_incremental(
        &self,
        tokens: &[usize],
        caches: &mut CacheSet,
        g_override: Option<&[Tensor<f32>]>,
        capture_deductive: bool,
    ) -> Result<(Tensor<f32>, Option<Vec<DeductiveOutputs>>)> {
        if !caches.is_primed() {
            return Err(Error::NotPrimed);
        }
        let b = tokens.len();
        if b != caches.batch() {
            return Err(Error::InvalidArgument(format!(
                "{b} tokens for a cache of batch {}",
                caches.batch()
            )));
        }
        let pos = caches.next_position();
        let rows: Vec<Vec<usize>> = tokens.iter().map(|&t| vec![t]).collect();
        self.check_tokens(&rows, pos)?;
        let cfg = &self.config;
        let (d, h, dk) = (cfg.d_model, cfg.num_heads, cfg.dk);
        let mut g = Graph::<f32>::new();
        let w = self
            .weights
            .map(&mut |t| Ok::<_, Error>(g.constant_ref(t)))?;
        let mut x = g.embedding(w.embedding, tokens, &[b, 1])?;
        let mut captured: Vec<Vec<LayerDeductive>> = vec![Vec::new(); b];
        for (li, layer) in w.layers.iter().enumerate() {
            let hn = nn::layer_norm(&mut g, x, &layer.attn_norm)?;
            let mut split = |p: &Linear<Var>| -> Result<Tensor<f32>> {
                let y = nn::linear(&mut g, hn, p)?;
                g.value(y).clone().reshape(&[b, h, 1, dk])
            };
            // with one position the head split needs no transpose
            let q = self.rope.apply(&split(&layer.attn.q)?, pos)?;
            let k = self.rope.apply(&split(&layer.attn.k)?, pos)?;
            let v = split(&layer.attn.v)?;
            caches.append(li, &k, &v)?;

            let mut step_plga = None;
            let g_now: Tensor<f32> = if let Some(ov) = g_override {
                if caches.g_enabled() {
                    caches.layer(li).g_cached().expect("primed").clone()
                } else {
                    if let GSource::Plga { .. } = layer.g {
                        step_plga = Some(self.recompute_plga(li, caches, &q)?);
                    }
                    Tensor::stack(&vec![ov[li].clone(); b])?
                }
            } else if caches.g_enabled() {
                caches.layer(li).g_cached().expect("primed").clone()
            } else {
                match &layer.g {
                    GSource::Plga { .. } => {
                        let lp = self.recompute_plga(li, caches, &q)?;
                        let gl = lp.g_lm.clone();
                        step_plga = Some(lp);
                        gl
                    }
                    GSource::Constant(_) => caches.layer(li).g_cached().expect("primed").clone(),
                }
            };
            let att = caches.attend_incremental(li, &q, &g_now)?;
            if capture_deductive {
                let cache = caches.layer(li);
                let (a, a_lm, a_p) = match &step_plga {
                    Some(lp) => (Some(&lp.a), Some(&lp.a_lm), Some(&lp.a_p)),
                    None => (cache.a_cached(), cache.a_lm_cached(), cache.a_p_cached()),
                };
                let gl_src = step_plga.as_ref().map(|lp| &lp.g_lm).unwrap_or(&g_now);
                let gl = f64_slices(gl_src, b);
                let slice = |t: Option<&Tensor<f32>>| t.map(|t| f64_slices(t, b));
                let (a, a_lm, a_p) = (slice(a), slice(a_lm), slice(a_p));
                for (bi, out) in captured.iter_mut().enumerate() {
                    out.push(LayerDeductive {
                        a: a.as_ref().map(|v| v[bi].clone()),
                        a_lm: a_lm.as_ref().map(|v| v[bi].clone()),
                        a_p: a_p.as_ref().map(|v| v[bi].clone()),
                        g_lm: gl[bi].clone(),
                    });
                }
            }
            let att = g.constant(att.reshape(&[b, 1, d])?);
            let att = nn::linear(&mut g, att, &layer.attn.o)?;
            x = g.add(x, att)?;
            let hn = nn::layer_norm(&mut g, x, &layer.ffn_norm)?;
            let ff = nn::swiglu(&mut g, hn, &layer.ffn.swiglu)?;
            let ff = nn::lu(&mut g, ff, &layer.ffn.out)?;
            x = g.add(x, ff)?;
        }
        caches.advance()?;
        let xn = nn::layer_norm(&mut g, x, &w.final_norm)?;
        let logits = g.matmul(xn, w.embedding, false, true)?;
        let deductive = capture_deductive.then(|| {
            captured
                .into_iter()
                .map(|layers| DeductiveOutputs { layers })
                .collect()
        });
        Ok((g.into_value(logits), deductive))
    }

    /// Recompute one layer's PLGA tensors from the running density sum
    /// (KV-cache without G-cache).
    fn recompute_plga(&self, li: usize, caches: &mut CacheSet, q: &Tensor<f32>) -> Result<StepPlga> {
        let GSource::Plga { heads, net } = &self.weights.layers[li].g else {
            unreachable!("recompute_plga on a constant-G layer")
        };
        let density = caches.accumulate_density(li, q)?;
        let mut g = Graph::<f32>::new();
        let hv = heads.map(&mut |t| Ok::<_, Error>(g.constant_ref(t)))?;
        let nv = net.map(&mut |t| Ok::<_, Error>(g.constant_ref(t)))?;
        let dv = g.constant(density);
        let pv = plga::energy_curvature_from_density(&mut g, dv, &hv, &nv, self.config.epsilon_bias)?;
        Ok(StepPlga {
            a: g.value(pv.a).clone(),
            a_lm: g.value(pv.a_lm).clone(),
            a_p: g.value(pv.a_p).clone(),
            g_lm: g.value(pv.g_lm).clone(),
        })
    }

    /// Build a constant-G model whose per-layer tensor is the one this
    /// trained model produces for an empty prompt (a lone BOS token)
    /// while greedily generating one token. All other weights are shared.
    pub fn transfer_g(&self) -> Result<PldrModel> {
        if self.config.variant != Variant::Trainable {
            return Err(Error::VariantMismatch {
                expected: Variant::Trainable.name(),
                found: self.config.variant.name(),
            });
        }
        let snapshot = self.probe_g()?;
        let mut layers = snapshot.into_iter();
        let weights = self.weights.map(&mut |t| Ok::<_, Error>(t.clone()))?;
        let weights = Weights {
            layers: weights
                .layers
                .into_iter()
                .map(|l| DecoderLayer {
                    g: GSource::Constant(layers.next().expect("one G per layer")),
                    ..l
                })
                .collect(),
            ..weights
        };
        let config = ModelConfig {
            variant: Variant::TransferredG,
            predefined_g_kind: None,
            ..self.config.clone()
        };
        Self::from_weights(config, weights)
    }

    /// Per-layer `[h, dk, dk]` energy-curvature tensors for the BOS probe.
    pub fn probe_g(&self) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::new();
        let trace = self.build_forward(&mut g, &[vec![BOS]], None)?;
        trace
            .layers
            .iter()
            .map(|lt| {
                let v = g.value(lt.g_used);
                Ok(if v.rank() == 4 { v.index0(0) } else { v.clone() })
            })
            .collect()
    }
}

struct StepPlga {
    a: Tensor<f32>,
    a_lm: Tensor<f32>,
    a_p: Tensor<f32>,
    g_lm: Tensor<f32>,
}
