//! Measurements over deductive outputs: inter-head RMSE, head
//! determinants, rank probes, cached-versus-uncached comparison and
//! generation timing.

use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::CacheMode;
use crate::error::{Error, Result};
use crate::generation::{generate, GenerateOptions, SamplerSpec};
use crate::linalg;
use crate::model::PldrModel;
use crate::plga::{DeductiveKind, DeductiveOutputs};
use crate::tensor::Tensor;

/// `ln(f32::MAX)`: determinants beyond this do not fit a 32-bit float.
pub fn overflow_log_threshold() -> f64 {
    (f32::MAX as f64).ln()
}

/// Pooled RMSE of entrywise differences over all head pairs `i < j`,
/// across every layer. `None` for kinds the outputs do not carry.
pub fn rmse_between_heads(d: &DeductiveOutputs) -> Result<Vec<(DeductiveKind, Option<f64>)>> {
    DeductiveKind::ALL
        .iter()
        .map(|&kind| Ok((kind, d.kind(kind).map(|ts| pooled_rmse(&ts)).transpose()?)))
        .collect()
}

pub(crate) fn pooled_rmse(layers: &[&Tensor<f64>]) -> Result<f64> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for t in layers {
        let h = t.shape()[0];
        if h < 2 {
            return Err(Error::SingleHead(h));
        }
        let m = t.len() / h;
        let data = t.data();
        for i in 0..h {
            for j in i + 1..h {
                for e in 0..m {
                    let diff = data[i * m + e] - data[j * m + e];
                    sum += diff * diff;
                }
                count += m;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadDeterminant {
    pub sign: i8,
    pub log_abs_det: f64,
    pub overflow: bool,
}

impl HeadDeterminant {
    pub fn from_log(sign: i8, log_abs_det: f64) -> Self {
        Self {
            sign,
            log_abs_det,
            overflow: sign != 0 && log_abs_det > overflow_log_threshold(),
        }
    }

    /// The determinant itself, infinite when it overflows 64-bit.
    pub fn value(&self) -> f64 {
        self.sign as f64 * self.log_abs_det.exp()
    }
}

/// Sign and log-magnitude of the determinant of every head slice.
pub fn head_determinants(t: &Tensor<f64>) -> Result<Vec<HeadDeterminant>> {
    let n = square_dim(t)?;
    Ok(t.data()
        .chunks(n * n)
        .map(|m| {
            let (s, l) = linalg::log_det(m, n);
            HeadDeterminant::from_log(s, l)
        })
        .collect())
}

fn square_dim(t: &Tensor<f64>) -> Result<usize> {
    let n = t.last_dim();
    if t.rank() != 3 || t.shape()[1] != n {
        return Err(Error::ShapeMismatch(format!("expected [h, n, n], got {:?}", t.shape())));
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub numeric_rank: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Largest ‖row − mean row‖∞.
    pub row_spread: f64,
    /// |λ₁ − mean row sum| with λ₁ from power iteration.
    pub eigen_row_sum_gap: Option<f64>,
}

pub fn singularity_probe(t: &Tensor<f64>) -> Result<Vec<SingularityReport>> {
    let n = square_dim(t)?;
    t.data()
        .chunks(n * n)
        .map(|m| {
            let sv = linalg::singular_values(m, n)?;
            let s1 = sv[0];
            let rank = sv.iter().filter(|&&s| s > 1e-8 * s1).count();
            let mean_row: Vec<f64> = (0..n)
                .map(|j| (0..n).map(|i| m[i * n + j]).sum::<f64>() / n as f64)
                .collect();
            let row_spread = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| (m[i * n + j] - mean_row[j]).abs())
                .fold(0.0, f64::max);
            let row_sum: f64 = mean_row.iter().sum();
            Ok(SingularityReport {
                numeric_rank: rank,
                sigma1: s1,
                sigma2: sv.get(1).copied().unwrap_or(0.0),
                row_spread,
                eigen_row_sum_gap: linalg::dominant_eigenvalue(m, n, 1000).map(|l| (l - row_sum).abs()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetric {
    pub layer: usize,
    pub rmse: f64,
    /// Largest `ln|det|` over heads in this layer.
    pub log_abs_det: f64,
    pub sign: i8,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMetric {
    pub kind: DeductiveKind,
    pub rmse: f64,
    /// `ln` of the maximum |det| over all heads and layers.
    pub max_abs_log_det: f64,
    pub det_sign: i8,
    pub overflow: bool,
    pub layers: Vec<LayerMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetricReport {
    pub kinds: Vec<KindMetric>,
}

fn largest(dets: &[HeadDeterminant]) -> HeadDeterminant {
    dets.iter()
        .copied()
        .max_by(|a, b| {
            let la = if a.sign == 0 { f64::NEG_INFINITY } else { a.log_abs_det };
            let lb = if b.sign == 0 { f64::NEG_INFINITY } else { b.log_abs_det };
            la.total_cmp(&lb)
        })
        .unwrap_or(HeadDeterminant::from_log(0, f64::NEG_INFINITY))
}

pub fn head_metrics(d: &DeductiveOutputs) -> Result<HeadMetricReport> {
    let mut kinds = Vec::new();
    for kind in DeductiveKind::ALL {
        let Some(ts) = d.kind(kind) else { continue };
        let mut layers = Vec::with_capacity(ts.len());
        let mut all = Vec::new();
        for (li, t) in ts.iter().enumerate() {
            let dets = head_determinants(t)?;
            let top = largest(&dets);
            layers.push(LayerMetric {
                layer: li,
                rmse: pooled_rmse(&[t])?,
                log_abs_det: top.log_abs_det,
                sign: top.sign,
                overflow: top.overflow,
            });
            all.extend(dets);
        }
        let top = largest(&all);
        kinds.push(KindMetric {
            kind,
            rmse: pooled_rmse(&ts)?,
            max_abs_log_det: top.log_abs_det,
            det_sign: top.sign,
            overflow: top.overflow,
            layers,
        });
    }
    Ok(HeadMetricReport { kinds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindDrift {
    pub kind: DeductiveKind,
    /// Max-abs difference of the final-step outputs between modes.
    pub drift: f64,
    pub rmse_cached: f64,
    pub rmse_uncached: f64,
    pub log_abs_det_cached: f64,
    pub sign_cached: i8,
    pub overflow_cached: bool,
    pub log_abs_det_uncached: f64,
    pub sign_uncached: i8,
    pub overflow_uncached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub prompt: String,
    pub n_tokens: usize,
    pub token_agreement: f64,
    pub tokens_cached: Vec<usize>,
    pub tokens_uncached: Vec<usize>,
    pub kinds: Vec<KindDrift>,
    pub cached: HeadMetricReport,
    pub uncached: HeadMetricReport,
}

fn max_abs_diff(a: &[&Tensor<f64>], b: &[&Tensor<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

/// Greedy generation with KV+G caches and without, compared on tokens and
/// on the deductive outputs used at the final step.
pub fn compare_cached_uncached(model: &PldrModel, prompt: &str, n_tokens: usize) -> Result<InvarianceReport> {
    let run = |cache| {
        generate(
            model,
            prompt,
            &GenerateOptions {
                max_length: n_tokens,
                sampler: SamplerSpec::greedy(),
                cache,
                g_override: None,
                capture_deductive: true,
            },
        )
    };
    let cached = run(CacheMode::KV_G)?;
    let uncached = run(CacheMode::NONE)?;
    let longest = cached.token_ids.len().max(uncached.token_ids.len());
    let same = cached
        .token_ids
        .iter()
        .zip(&uncached.token_ids)
        .filter(|(a, b)| a == b)
        .count();
    let token_agreement = if longest == 0 {
        1.0
    } else {
        same as f64 / longest as f64
    };
    let last = |r: &crate::generation::GenerationResult| {
        r.deductive_snapshots
            .as_ref()
            .and_then(|s| s.last().cloned())
            .ok_or_else(|| Error::InvalidArgument("no tokens generated".into()))
    };
    let (dc, du) = (last(&cached)?, last(&uncached)?);
    let (mc, mu) = (head_metrics(&dc)?, head_metrics(&du)?);
    let mut kinds = Vec::new();
    for (kc, ku) in mc.kinds.iter().zip(&mu.kinds) {
        let (Some(a), Some(b)) = (dc.kind(kc.kind), du.kind(ku.kind)) else {
            continue;
        };
        kinds.push(KindDrift {
            kind: kc.kind,
            drift: max_abs_diff(&a, &b),
            rmse_cached: kc.rmse,
            rmse_uncached: ku.rmse,
            log_abs_det_cached: kc.max_abs_log_det,
            sign_cached: kc.det_sign,
            overflow_cached: kc.overflow,
            log_abs_det_uncached: ku.max_abs_log_det,
            sign_uncached: ku.det_sign,
            overflow_uncached: ku.overflow,
        });
    }
    Ok(InvarianceReport {
        prompt: prompt.to_string(),
        n_tokens,
        token_agreement,
        tokens_cached: cached.token_ids,
        tokens_uncached: uncached.token_ids,
        kinds,
        cached: mc,
        uncached: mu,
    })
}

impl InvarianceReport {
    /// Plain-text rendering: one row per deductive kind with RMSE and the
    /// largest head determinant in both modes (`↗` marks overflow).
    pub fn to_table(&self) -> String {
        let det = |l: f64, s: i8, o: bool| {
            if o {
                "↗".to_string()
            } else if s == 0 {
                "0".to_string()
            } else {
                format!("{:.6e}", s as f64 * l.exp())
            }
        };
        let mut out = format!(
            "{:<6} {:>24} {:>24} {:>14} {:>14} {:>12}\n",
            "kind", "rmse (kv+g)", "rmse (none)", "max|det| kv+g", "max|det| none", "drift"
        );
        for k in &self.kinds {
            out.push_str(&format!(
                "{:<6} {:>24.15e} {:>24.15e} {:>14} {:>14} {:>12.3e}\n",
                k.kind.label(),
                k.rmse_cached,
                k.rmse_uncached,
                det(k.log_abs_det_cached, k.sign_cached, k.overflow_cached),
                det(k.log_abs_det_uncached, k.sign_uncached, k.overflow_uncached),
                k.drift
            ));
        }
        out.push_str(&format!("token agreement {:.4}\n", self.token_agreement));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub runs: usize,
    pub loops_per_run: usize,
    pub n_tokens: usize,
    pub cache: CacheMode,
    /// Wall time of each run.
    pub samples_ms: Vec<f64>,
}

/// Wall-clock time of `runs` runs, each `loops` sequential generations of
/// `n_tokens`, after one untimed warmup run.
#[allow(clippy::too_many_arguments)]
pub fn time_inference(
    model: &PldrModel,
    prompt: &str,
    spec: &SamplerSpec,
    n_tokens: usize,
    runs: usize,
    loops: usize,
    cache: CacheMode,
) -> Result<TimingReport> {
    if runs < 2 {
        return Err(Error::InvalidArgument(format!(
            "timing needs at least 2 runs, got {runs}"
        )));
    }
    if loops == 0 {
        return Err(Error::NonPositive("loops"));
    }
    let opts = GenerateOptions {
        max_length: n_tokens,
        sampler: spec.clone(),
        cache,
        g_override: None,
        capture_deductive: false,
    };
    let run_once = || -> Result<f64> {
        let start = Instant::now();
        for _ in 0..loops {
            std::hint::black_box(generate(model, prompt, &opts)?);
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    run_once()?;
    let samples = (0..runs).map(|_| run_once()).collect::<Result<Vec<_>>>()?;
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    Ok(TimingReport {
        mean_ms: mean,
        std_ms: var.sqrt(),
        runs,
        loops_per_run: loops,
        n_tokens,
        cache,
        samples_ms: samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plga::LayerDeductive;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn outputs(layers: Vec<Tensor<f64>>) -> DeductiveOutputs {
        DeductiveOutputs {
            layers: layers
                .into_iter()
                .map(|g| LayerDeductive {
                    a: None,
                    a_lm: None,
                    a_p: None,
                    g_lm: g,
                })
                .collect(),
        }
    }

    fn g_rmse(d: &DeductiveOutputs) -> f64 {
        rmse_between_heads(d)
            .unwrap()
            .into_iter()
            .find(|(k, _)| *k == DeductiveKind::GLm)
            .and_then(|(_, v)| v)
            .unwrap()
    }

    #[test]
    fn rmse_examples() {
        let mut rng = StdRng::seed_from_u64(0);
        let head = Tensor::<f64>::randn(&[1, 3, 3], 1.0, &mut rng);
        let same = Tensor::stack(&[head.index0(0), head.index0(0), head.index0(0)]).unwrap();
        assert_eq!(g_rmse(&outputs(vec![same])), 0.0);
        let shifted = Tensor::stack(&[head.index0(0), head.index0(0).map(|x| x - 0.75)]).unwrap();
        assert!((g_rmse(&outputs(vec![shifted])) - 0.75).abs() < 1e-15);
        let single = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(matches!(rmse_between_heads(&outputs(vec![single])), Err(Error::SingleHead(1))));
        // kinds a constant-G model lacks come back empty
        let r = rmse_between_heads(&outputs(vec![Tensor::zeros(&[2, 2, 2])])).unwrap();
        assert!(r.iter().filter(|(k, _)| *k != DeductiveKind::GLm).all(|(_, v)| v.is_none()));
    }

    #[test]
    fn determinant_examples() {
        let eye = Tensor::<f64>::eye_stack(1, 4);
        assert_eq!(
            head_determinants(&eye).unwrap(),
            vec![HeadDeterminant {
                sign: 1,
                log_abs_det: 0.0,
                overflow: false
            }]
        );
        let u = [1.0, -2.0, 0.5];
        let rank1 = Tensor::from_fn(&[1, 3, 3], |i| u[i / 3] * u[i % 3] * 2.0);
        assert_eq!(head_determinants(&rank1).unwrap()[0].value(), 0.0);
        let diag = Tensor::from_fn(&[1, 3, 3], |i| if i % 4 == 0 { (i / 4 + 1) as f64 } else { 0.0 });
        let d = head_determinants(&diag).unwrap()[0];
        assert!((d.value() - 6.0).abs() < 1e-12);
        assert!((d.log_abs_det - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn overflow_boundary() {
        assert!(!HeadDeterminant::from_log(1, 88.0).overflow);
        assert!(HeadDeterminant::from_log(-1, 89.0).overflow);
        assert!((overflow_log_threshold() - 88.7228).abs() < 1e-4);
    }

    #[test]
    fn singularity_examples() {
        let row = [0.2, 0.9, -0.3, 1.4];
        let rank1 = Tensor::from_fn(&[1, 4, 4], |i| row[i % 4]);
        let r = &singularity_probe(&rank1).unwrap()[0];
        assert_eq!(r.numeric_rank, 1);
        assert!(r.sigma2 / r.sigma1 < 1e-12);
        assert!(r.row_spread == 0.0);
        assert!(r.eigen_row_sum_gap.unwrap() < 1e-12);

        let eye = Tensor::<f64>::eye_stack(1, 4);
        let r = &singularity_probe(&eye).unwrap()[0];
        assert_eq!(r.numeric_rank, 4);
        assert!((r.sigma1 - 1.0).abs() < 1e-15 && (r.sigma2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rmse_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(9);
        let t = Tensor::<f64>::randn(&[4, 3, 3], 1.0, &mut rng);
        let perm = Tensor::stack(&[t.index0(2), t.index0(0), t.index0(3), t.index0(1)]).unwrap();
        let a = g_rmse(&outputs(vec![t]));
        let b = g_rmse(&outputs(vec![perm]));
        assert!((a - b).abs() < 1e-14);
    }
}
