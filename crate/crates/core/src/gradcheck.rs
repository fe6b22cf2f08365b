//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares the reverse-mode gradient of `Σ r ⊙ f(inputs)` (random `r`)
/// against central differences in 64-bit.
pub fn grad_check<'a, F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Tensor::<f64>::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0))
    };

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let r = g.constant(probe.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum_all(weighted);
    let grads = g.backward(loss);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    let mut offset = 0;
    for (which, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[which]).unwrap_or(&zeros);
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < input.len() => sample(rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for idx in coords {
            let mut ins = inputs.to_vec();
            ins[which].data_mut()[idx] += cfg.step;
            let plus = eval(&ins)?;
            ins[which].data_mut()[idx] -= 2.0 * cfg.step;
            let minus = eval(&ins)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.tolerance || !rel.is_finite() {
                return Err(Error::GradMismatch {
                    index: offset + idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
        offset += input.len();
    }
    Ok(report)
}
