//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use std::path::PathBuf;

use pldr::config::{PredefinedGKind, Variant};
use pldr::model::{GSource, Weights};
use pldr::training::{pack_corpus, TrainConfig, Trainer};
use pldr::{ModelConfig, PldrModel, Tensor};

pub fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny_corpus.txt")
}

pub fn corpus_windows(context_length: usize) -> Vec<Vec<usize>> {
    let text = std::fs::read_to_string(corpus_path()).expect("corpus file");
    let docs: Vec<&str> = text.lines().collect();
    pack_corpus(&docs, context_length).expect("non-empty corpus")
}

pub fn small_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 16,
        d_ff: 24,
        dk: 8,
        a_dff: 6,
        num_residual_layers: 2,
        glu_per_residual: 2,
        context_length: 48,
        variant,
        predefined_g_kind: match variant {
            Variant::PredefinedG => Some(PredefinedGKind::Identity),
            _ => None,
        },
        init_seed: seed,
        ..ModelConfig::default()
    }
}

pub fn desk(variant: Variant, kind: Option<PredefinedGKind>, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        predefined_g_kind: kind,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

/// Desk Trainable model trained on the bundled corpus.
pub fn train_desk(steps: usize, dag: [f64; 3], seed: u64) -> (PldrModel, Vec<pldr::training::LossReport>) {
    let cfg = desk(Variant::Trainable, None, seed);
    let windows = corpus_windows(cfg.context_length);
    let tc = TrainConfig {
        total_steps: steps,
        warmup_steps: steps.min(50),
        dag_coefficients: dag,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(PldrModel::new(cfg).unwrap(), tc).unwrap();
    let reports = t.fit(&windows, |_| {}).unwrap();
    (t.model, reports)
}

/// Replace every layer's G source by a constant tensor, keeping all other
/// weights.
pub fn with_constant_g(model: &PldrModel, variant: Variant, gs: &[Tensor<f32>]) -> PldrModel {
    let mut weights: Weights<Tensor<f32>> = model.weights.clone();
    for (l, g) in weights.layers.iter_mut().zip(gs) {
        l.g = GSource::Constant(g.clone());
    }
    let config = ModelConfig {
        variant,
        predefined_g_kind: match variant {
            Variant::PredefinedG => Some(PredefinedGKind::FromCheckpoint),
            _ => None,
        },
        ..model.config().clone()
    };
    PldrModel::from_weights(config, weights).unwrap()
}

// ---- plain-loop reference decoder with scaled dot-product attention ----

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn linear(x: &[f64], rows: usize, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    let (w, b) = (f64s(w), f64s(b));
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += x[r * n_in + i] * w[i * n_out + o];
            }
            out[r * n_out + o] = acc;
        }
    }
    out
}

fn layer_norm(x: &[f64], d: usize, gain: &Tensor<f32>, bias: &Tensor<f32>) -> Vec<f64> {
    let (g, b) = (f64s(gain), f64s(bias));
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[j] + b[j];
        }
    }
    out
}

fn rotate(v: &mut [f64], pos: usize) {
    let dk = v.len();
    for i in 0..dk / 2 {
        let theta = pos as f64 * 10_000f64.powf(-2.0 * i as f64 / dk as f64);
        let (c, s) = (theta.cos(), theta.sin());
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Logits `[s][vocab]` of one sequence through a standard pre-norm
/// decoder with causal softmax(q·kᵀ/√dk) attention.
pub fn sdpa_reference(model: &PldrModel, tokens: &[usize]) -> Vec<Vec<f64>> {
    let c = model.config();
    let (d, h, dk, s) = (c.d_model, c.num_heads, c.dk, tokens.len());
    let w = &model.weights;
    let emb = f64s(&w.embedding);
    let mut x: Vec<f64> = tokens
        .iter()
        .flat_map(|&t| emb[t * d..(t + 1) * d].to_vec())
        .collect();
    for l in &w.layers {
        let hn = layer_norm(&x, d, &l.attn_norm.gain, &l.attn_norm.bias);
        let q = linear(&hn, s, &l.attn.q.w, &l.attn.q.b);
        let k = linear(&hn, s, &l.attn.k.w, &l.attn.k.b);
        let v = linear(&hn, s, &l.attn.v.w, &l.attn.v.b);
        let mut att = vec![0.0; s * d];
        for head in 0..h {
            let lane = |m: &[f64], p: usize| m[p * d + head * dk..p * d + (head + 1) * dk].to_vec();
            let qs: Vec<Vec<f64>> = (0..s)
                .map(|p| {
                    let mut r = lane(&q, p);
                    rotate(&mut r, p);
                    r
                })
                .collect();
            let ks: Vec<Vec<f64>> = (0..s)
                .map(|p| {
                    let mut r = lane(&k, p);
                    rotate(&mut r, p);
                    r
                })
                .collect();
            for i in 0..s {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    let vj = lane(&v, j);
                    for t in 0..dk {
                        att[i * d + head * dk + t] += ej / z * vj[t];
                    }
                }
            }
        }
        let o = linear(&att, s, &l.attn.o.w, &l.attn.o.b);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let hn = layer_norm(&x, d, &l.ffn_norm.gain, &l.ffn_norm.bias);
        let val = linear(&hn, s, &l.ffn.swiglu.value.w, &l.ffn.swiglu.value.b);
        let gate = linear(&hn, s, &l.ffn.swiglu.gate.w, &l.ffn.swiglu.gate.b);
        let hidden: Vec<f64> = val.iter().zip(&gate).map(|(a, b)| a * silu(*b)).collect();
        let ff = linear(&hidden, s, &l.ffn.out.out.w, &l.ffn.out.out.b);
        x.iter_mut().zip(&ff).for_each(|(a, b)| *a += b);
    }
    let xn = layer_norm(&x, d, &w.final_norm.gain, &w.final_norm.bias);
    (0..s)
        .map(|p| {
            (0..c.vocab_size)
                .map(|t| (0..d).map(|j| xn[p * d + j] * emb[t * d + j]).sum())
                .collect()
        })
        .collect()
}

// ---- diagnostics oracles ----

/// Determinant by cofactor expansion along the first row.
pub fn cofactor_det(m: &[f64], n: usize) -> f64 {
    if n == 1 {
        return m[0];
    }
    let mut det = 0.0;
    for col in 0..n {
        let minor: Vec<f64> = (1..n)
            .flat_map(|r| (0..n).filter(move |&c| c != col).map(move |c| (r, c)))
            .map(|(r, c)| m[r * n + c])
            .collect();
        let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[col] * cofactor_det(&minor, n - 1);
    }
    det
}

/// Pooled pairwise-head RMSE by explicit loops over layers, pairs and
/// entries.
pub fn pairwise_rmse(layers: &[Tensor<f64>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in layers {
        let (h, r, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let at = |hd: usize, i: usize, j: usize| t.data()[(hd * r + i) * c + j];
        for a in 0..h {
            for b in 0..h {
                if a >= b {
                    continue;
                }
                for i in 0..r {
                    for j in 0..c {
                        sum += (at(a, i, j) - at(b, i, j)).powi(2);
                        n += 1;
                    }
                }
            }
        }
    }
    (sum / n as f64).sqrt()
}
