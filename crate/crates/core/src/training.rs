//! Corpus packing, the training objective, AdamW and the learning-rate
//! schedule.

use std::f64::consts::PI;
use std::io::Write;

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generation::EOS;
use crate::linalg;
use crate::model::{is_trainable, PldrModel};
use crate::plga::PlgaVars;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Weights on the DAG losses of (A_LM, A_P, G_LM).
    pub dag_coefficients: [f64; 3],
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    pub eval_every: usize,
    /// Seed for batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 4,
            dag_coefficients: [0.0; 3],
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            log_every: 10,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::NonPositive("learning_rate"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::NonPositive("warmup_steps"));
        }
        if self.total_steps == 0 {
            return Err(Error::NonPositive("total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::NonPositive("batch_size"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.dag_coefficients.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidArgument("dag coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Inputs and next-token targets, `[b][s]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input_ids: Vec<Vec<usize>>,
    pub target_ids: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_windows(windows: &[&[usize]]) -> Self {
        Self {
            input_ids: windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect(),
            target_ids: windows.iter().map(|w| w[1..].to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub cross_entropy: f64,
    /// Unweighted DAG losses of (A_LM, A_P, G_LM).
    pub dag_losses: [f64; 3],
    pub total: f64,
    pub next_token_accuracy: f64,
    pub learning_rate_now: f64,
    /// Some head's DAG loss overflowed and was clamped.
    pub dag_overflow: bool,
}

/// Byte stream of documents, each followed by an end-of-sequence token.
pub fn tokenize_documents<S: AsRef<str>>(docs: &[S]) -> Vec<usize> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(d.as_ref().bytes().map(usize::from));
        out.push(EOS);
    }
    out
}

/// Contiguous `(context_length + 1)`-token windows; the partial tail is
/// dropped so no window needs padding.
pub fn pack_tokens(stream: &[usize], context_length: usize) -> Result<Vec<Vec<usize>>> {
    if stream.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if context_length == 0 {
        return Err(Error::NonPositive("context_length"));
    }
    Ok(stream
        .chunks_exact(context_length + 1)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn pack_corpus<S: AsRef<str>>(docs: &[S], context_length: usize) -> Result<Vec<Vec<usize>>> {
    if docs.iter().all(|d| d.as_ref().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    pack_tokens(&tokenize_documents(docs), context_length)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DagValue {
    pub loss: f64,
    pub overflow: bool,
}

/// Mean over heads of `tr(exp(W ⊙ W)) − dk` for a `[h, dk, dk]` tensor.
pub fn dag_loss(t: &Tensor<f64>) -> Result<DagValue> {
    let n = t.last_dim();
    if t.rank() != 3 || t.shape()[1] != n {
        return Err(Error::ShapeMismatch(format!("dag loss on {:?}", t.shape())));
    }
    let heads = t.shape()[0];
    let (mut total, mut overflow) = (0.0, false);
    for h in 0..heads {
        let sq: Vec<f64> = t.data()[h * n * n..(h + 1) * n * n].iter().map(|x| x * x).collect();
        let e = linalg::expm(&sq, n);
        let v = (0..n).map(|i| e[i * n + i]).sum::<f64>() - n as f64;
        if !v.is_finite() || v > crate::autograd::DAG_CLAMP {
            overflow = true;
            total += crate::autograd::DAG_CLAMP;
        } else {
            total += v;
        }
    }
    if overflow {
        log::warn!("dag loss overflowed; clamped to {:e}", crate::autograd::DAG_CLAMP);
    }
    Ok(DagValue {
        loss: total / heads as f64,
        overflow,
    })
}

/// Linear warmup to `learning_rate`, then cosine decay to a tenth of it.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    if step <= cfg.warmup_steps {
        return lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (PI * progress).cos()))
}

/// AdamW moments for every trainable tensor, in weight-visit order.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

fn decays(name: &str) -> bool {
    name == "embedding" || name.ends_with(".w") || name.ends_with(".w_a") || name.ends_with(".w_g")
}

impl AdamW {
    pub fn new(model: &PldrModel) -> Self {
        let mut m = Vec::new();
        model.weights.visit(&mut |name, t| {
            if is_trainable(&name) {
                m.push(Tensor::zeros(t.shape()));
            }
        });
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update with gradients listed in trainable visit order; the
    /// global gradient norm is clipped to `cfg.grad_clip` first.
    fn update(&mut self, model: &mut PldrModel, grads: &mut [Tensor<f32>], lr: f64, cfg: &TrainConfig) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let mut i = 0;
        model.weights.visit_mut(&mut |name, w| {
            if !is_trainable(&name) {
                return;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let decay = if decays(&name) {
                (lr * cfg.weight_decay) as f32
            } else {
                0.0
            };
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g * clip as f32;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m as f64 / bc1;
                let vhat = *v as f64 / bc2;
                *w -= decay * *w;
                *w -= (lr * mhat / (vhat.sqrt() + cfg.adam_eps)) as f32;
            }
            i += 1;
        });
        norm
    }
}

struct Objective {
    loss: Var,
    ce: f64,
    dag: [f64; 3],
    total: f64,
    accuracy: f64,
    overflow: bool,
}

fn objective<'g>(
    model: &'g PldrModel,
    g: &mut Graph<'g, f32>,
    batch: &Batch,
    coeffs: [f64; 3],
) -> Result<(Objective, crate::model::ForwardTrace)> {
    let trace = model.build_forward(g, &batch.input_ids, None)?;
    let targets: Vec<usize> = batch.target_ids.iter().flatten().copied().collect();
    let ce_var = g.cross_entropy(trace.logits, &targets)?;
    let ce = g.value(ce_var).data()[0] as f64;

    let logits = g.value(trace.logits);
    let vocab = logits.last_dim();
    let correct = logits
        .data()
        .chunks(vocab)
        .zip(&targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            best.0 == t
        })
        .count();
    let accuracy = correct as f64 / targets.len() as f64;

    let mut loss = ce_var;
    let mut dag = [0.0; 3];
    let mut overflow = false;
    let plga: Vec<PlgaVars> = trace.layers.iter().filter_map(|l| l.plga).collect();
    if !plga.is_empty() {
        let scale = 1.0 / plga.len() as f32;
        for (kind, slot) in dag.iter_mut().enumerate() {
            let mut terms = Vec::new();
            for pv in &plga {
                let t = [pv.a_lm, pv.a_p, pv.g_lm][kind];
                let d = g.dag_loss(t)?;
                overflow |= g.dag_clamped(d);
                *slot += g.value(d).data()[0] as f64 / plga.len() as f64;
                terms.push(d);
            }
            if coeffs[kind] > 0.0 {
                for d in terms {
                    let w = g.scale(d, scale * coeffs[kind] as f32);
                    loss = g.add(loss, w)?;
                }
            }
        }
    }
    let total = ce + coeffs.iter().zip(&dag).map(|(c, d)| c * d).sum::<f64>();
    if overflow {
        log::warn!("dag loss clamped at {:e}", crate::autograd::DAG_CLAMP);
    }
    Ok((
        Objective {
            loss,
            ce,
            dag,
            total,
            accuracy,
            overflow,
        },
        trace,
    ))
}

/// Loss and accuracy without updating anything.
pub fn evaluate(model: &PldrModel, batches: &[Batch], coeffs: [f64; 3]) -> Result<LossReport> {
    if batches.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut acc = LossReport {
        step: 0,
        cross_entropy: 0.0,
        dag_losses: [0.0; 3],
        total: 0.0,
        next_token_accuracy: 0.0,
        learning_rate_now: 0.0,
        dag_overflow: false,
    };
    for b in batches {
        let mut g = Graph::new();
        let (o, _) = objective(model, &mut g, b, coeffs)?;
        acc.cross_entropy += o.ce;
        acc.total += o.total;
        acc.next_token_accuracy += o.accuracy;
        for (a, d) in acc.dag_losses.iter_mut().zip(o.dag) {
            *a += d;
        }
        acc.dag_overflow |= o.overflow;
    }
    let n = batches.len() as f64;
    acc.cross_entropy /= n;
    acc.total /= n;
    acc.next_token_accuracy /= n;
    acc.dag_losses.iter_mut().for_each(|d| *d /= n);
    Ok(acc)
}

/// Forward, backward and one AdamW update at 1-based `step`. The report
/// describes the loss before the update.
pub fn train_step(
    model: &mut PldrModel,
    batch: &Batch,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let lr = lr_schedule(step, cfg);
    let (report, mut grads) = {
        let mut g = Graph::new();
        let (o, trace) = objective(model, &mut g, batch, cfg.dag_coefficients)?;
        if !o.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("ce {} dag {:?}", o.ce, o.dag),
            });
        }
        let mut all = g.backward(o.loss);
        let mut grads = Vec::new();
        let mut bad = None;
        trace.weights.visit(&mut |name, &v| {
            if !is_trainable(&name) {
                return;
            }
            let gr = all
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            if bad.is_none() && !gr.all_finite() {
                bad = Some(name);
            }
            grads.push(gr);
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("non-finite gradient in {name}"),
            });
        }
        (
            LossReport {
                step,
                cross_entropy: o.ce,
                dag_losses: o.dag,
                total: o.total,
                next_token_accuracy: o.accuracy,
                learning_rate_now: lr,
                dag_overflow: o.overflow,
            },
            grads,
        )
    };
    opt.update(model, &mut grads, lr, cfg);
    Ok(report)
}

/// Gradient of the training objective for every trainable tensor, by name.
pub fn gradients(model: &PldrModel, batch: &Batch, coeffs: [f64; 3]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut g = Graph::new();
    let (o, trace) = objective(model, &mut g, batch, coeffs)?;
    let mut all = g.backward(o.loss);
    let mut out = Vec::new();
    trace.weights.visit(&mut |name, &v| {
        if is_trainable(&name) {
            let gr = all.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.push((name, gr));
        }
    });
    Ok(out)
}

/// Training loop state: model, optimizer and batch sampler.
pub struct Trainer {
    pub model: PldrModel,
    pub config: TrainConfig,
    opt: AdamW,
    rng: StdRng,
    step: usize,
}

impl Trainer {
    pub fn new(model: PldrModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt: AdamW::new(&model),
            rng: StdRng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `batch_size` distinct windows drawn uniformly (fewer if the corpus
    /// is smaller).
    pub fn sample_batch(&mut self, windows: &[Vec<usize>]) -> Result<Batch> {
        if windows.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let k = self.config.batch_size.min(windows.len());
        let picks = sample(&mut self.rng, windows.len(), k);
        let chosen: Vec<&[usize]> = picks.iter().map(|i| windows[i].as_slice()).collect();
        Ok(Batch::from_windows(&chosen))
    }

    pub fn train_on(&mut self, batch: &Batch) -> Result<LossReport> {
        self.step += 1;
        train_step(&mut self.model, batch, &mut self.opt, &self.config, self.step)
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn fit(&mut self, windows: &[Vec<usize>], mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(self.config.total_steps);
        while self.step < self.config.total_steps {
            let batch = self.sample_batch(windows)?;
            let r = self.train_on(&batch)?;
            if self.config.log_every > 0 && (r.step % self.config.log_every == 0 || r.step == 1) {
                log::info!(
                    "step {} ce {:.4} dag {:.3e}/{:.3e}/{:.3e} acc {:.3} lr {:.2e}",
                    r.step,
                    r.cross_entropy,
                    r.dag_losses[0],
                    r.dag_losses[1],
                    r.dag_losses[2],
                    r.next_token_accuracy,
                    r.learning_rate_now
                );
            }
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    ce: f64,
    dag_alm: f64,
    dag_ap: f64,
    dag_glm: f64,
    total: f64,
    acc: f64,
    lr: f64,
}

/// Writes reports as CSV with columns
/// `step,ce,dag_alm,dag_ap,dag_glm,total,acc,lr`.
pub fn write_csv<W: Write>(out: W, reports: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow {
            step: r.step,
            ce: r.cross_entropy,
            dag_alm: r.dag_losses[0],
            dag_ap: r.dag_losses[1],
            dag_glm: r.dag_losses[2],
            total: r.total,
            acc: r.next_token_accuracy,
            lr: r.learning_rate_now,
        })
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn packing_examples() {
        let s = 7;
        let stream: Vec<usize> = (0..2 * (s + 1)).map(|i| i % 256).collect();
        let w = pack_tokens(&stream, s).unwrap();
        assert_eq!(w.len(), 2);
        let mut longer = stream.clone();
        longer.extend([1, 2, 3]);
        assert_eq!(pack_tokens(&longer, s).unwrap(), w);
        assert!(matches!(pack_tokens(&[], s), Err(Error::EmptyCorpus)));
        assert!(matches!(pack_corpus(&["", ""], s), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn windows_reconstruct_a_stream_prefix() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..20 {
            let docs: Vec<String> = (0..rng.gen_range(1..6))
                .map(|_| {
                    (0..rng.gen_range(0..300))
                        .map(|_| rng.gen_range(b'a'..=b'z') as char)
                        .collect()
                })
                .collect();
            let stream = tokenize_documents(&docs);
            let s = rng.gen_range(1..40);
            let Ok(w) = pack_tokens(&stream, s) else { continue };
            let flat: Vec<usize> = w.concat();
            assert_eq!(&stream[..flat.len()], flat.as_slice());
            assert!(stream.len() - flat.len() < s + 1);
            let b = Batch::from_windows(&w.iter().map(Vec::as_slice).collect::<Vec<_>>());
            assert!(b.input_ids.iter().all(|r| r.len() == s));
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(10, &cfg) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(110, &cfg) - 1e-4).abs() < 1e-15);
        // halfway through the decay the cosine term is exactly one half
        assert!((lr_schedule(60, &cfg) - 1e-3 * 0.55).abs() < 1e-15);
    }

    #[test]
    fn dag_loss_examples() {
        let z = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert_eq!(dag_loss(&z).unwrap().loss, 0.0);
        let lower = Tensor::from_fn(&[1, 5, 5], |i| if i / 5 > i % 5 { (i as f64).sin() * 3.0 } else { 0.0 });
        assert!(dag_loss(&lower).unwrap().loss.abs() < 1e-9);
        let huge = Tensor::full(&[1, 4, 4], 1e3);
        assert!(dag_loss(&huge).unwrap().overflow);
    }
}
