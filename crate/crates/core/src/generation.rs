//! Byte-level tokenization, sampling and the generation loop.

use web_time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cache::{CacheMode, CacheSet};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::model::{GOverride, PldrModel};
use crate::plga::DeductiveOutputs;

pub const BOS: usize = 256;
pub const EOS: usize = 257;

pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Bytes back to text; control tokens are dropped and invalid UTF-8 is
/// replaced.
pub fn decode_bytes(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub temperature: f64,
    /// 0 disables; 1 is argmax.
    pub top_k: usize,
    /// 1 disables.
    pub top_p: f64,
    pub rng_seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            rng_seed: 0,
        }
    }
}

impl SamplerSpec {
    pub fn greedy() -> Self {
        Self {
            top_k: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

fn argmax(logits: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in logits.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.filter(|(_, b)| *b > f32::NEG_INFINITY).map(|(i, _)| i)
}

/// Candidate tokens with their renormalized probabilities after
/// temperature, top-k and nucleus truncation, most likely first.
pub fn truncated_distribution(logits: &[f32], spec: &SamplerSpec) -> Result<Vec<(usize, f64)>> {
    spec.validate()?;
    if logits.iter().any(|x| x.is_nan() || *x == f32::INFINITY) {
        return Err(Error::DegenerateDistribution);
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x as f64 / spec.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateDistribution);
    }
    let mut probs: Vec<(usize, f64)> = scaled
        .iter()
        .enumerate()
        .map(|(i, &z)| (i, (z - max).exp()))
        .filter(|(_, p)| *p > 0.0)
        .collect();
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    if spec.top_k > 0 {
        probs.truncate(spec.top_k);
    }
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    if spec.top_p < 1.0 {
        let mut mass = 0.0;
        let keep = probs
            .iter()
            .position(|p| {
                mass += p.1;
                mass >= spec.top_p
            })
            .map_or(probs.len(), |i| i + 1);
        probs.truncate(keep);
        let total: f64 = probs.iter().map(|p| p.1).sum();
        probs.iter_mut().for_each(|p| p.1 /= total);
    }
    if probs.is_empty() {
        return Err(Error::DegenerateDistribution);
    }
    Ok(probs)
}

pub fn sample_next<R: Rng + ?Sized>(logits: &[f32], spec: &SamplerSpec, rng: &mut R) -> Result<usize> {
    if spec.top_k == 1 {
        spec.validate()?;
        if logits.iter().any(|x| x.is_nan()) {
            return Err(Error::DegenerateDistribution);
        }
        return argmax(logits).ok_or(Error::DegenerateDistribution);
    }
    let probs = truncated_distribution(logits, spec)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &probs {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(probs.last().expect("non-empty").0)
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// Number of new tokens to produce (fewer when the end token appears).
    pub max_length: usize,
    pub sampler: SamplerSpec,
    pub cache: CacheMode,
    pub g_override: Option<GOverride>,
    pub capture_deductive: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_length: 32,
            sampler: SamplerSpec::greedy(),
            cache: CacheMode::KV_G,
            g_override: None,
            capture_deductive: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Newly generated tokens, prompt excluded.
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Deductive outputs used at each generation step.
    pub deductive_snapshots: Option<Vec<DeductiveOutputs>>,
    pub per_token_nanoseconds: Vec<u64>,
    pub cache_mode_used: CacheMode,
}

pub fn generate(model: &PldrModel, prompt: &str, opts: &GenerateOptions) -> Result<GenerationResult> {
    generate_from_ids(model, &encode_text(prompt), opts)
}

/// Generation from already tokenized prompt bytes; a begin-of-sequence
/// token is prepended.
pub fn generate_from_ids(
    model: &PldrModel,
    prompt_ids: &[usize],
    opts: &GenerateOptions,
) -> Result<GenerationResult> {
    let cfg = model.config();
    let mode = opts.cache.validate()?;
    opts.sampler.validate()?;
    let mut seq = Vec::with_capacity(prompt_ids.len() + 1 + opts.max_length);
    seq.push(BOS);
    seq.extend_from_slice(prompt_ids);
    // the last generated token is never fed back
    let positions = seq.len() + opts.max_length.saturating_sub(1);
    if positions > cfg.context_length {
        return Err(Error::ContextOverflow {
            len: positions,
            limit: cfg.context_length,
        });
    }
    let overrides = match &opts.g_override {
        None => None,
        Some(_) if cfg.variant != Variant::Trainable => {
            return Err(Error::InvalidOverride(format!(
                "G override needs a trainable model, not {}",
                cfg.variant.name()
            )))
        }
        Some(o) => Some(o.resolve(cfg)?),
    };
    let ov = overrides.as_deref();
    let mut rng = StdRng::seed_from_u64(opts.sampler.rng_seed);
    let mut out = GenerationResult {
        token_ids: Vec::with_capacity(opts.max_length),
        text: String::new(),
        deductive_snapshots: opts.capture_deductive.then(Vec::new),
        per_token_nanoseconds: Vec::with_capacity(opts.max_length),
        cache_mode_used: mode,
    };
    let mut record = |out: &mut GenerationResult,
                      logits: &[f32],
                      ded: Option<Vec<DeductiveOutputs>>,
                      start: Instant|
     -> Result<usize> {
        let next = sample_next(logits, &opts.sampler, &mut rng)?;
        out.per_token_nanoseconds
            .push(start.elapsed().as_nanos().min(u64::MAX as u128) as u64);
        out.token_ids.push(next);
        if let (Some(snaps), Some(mut d)) = (out.deductive_snapshots.as_mut(), ded) {
            snaps.push(d.swap_remove(0));
        }
        Ok(next)
    };
    if opts.max_length == 0 {
        return Ok(out);
    }

    if mode.kv_enabled {
        let mut caches = CacheSet::new(cfg, 1, positions, mode)?;
        let start = Instant::now();
        let (logits, ded) = model.prime(&[seq.clone()], &mut caches, ov, opts.capture_deductive)?;
        let mut next = record(&mut out, logits.data(), ded, start)?;
        while out.token_ids.len() < opts.max_length && next != EOS {
            let start = Instant::now();
            let (logits, ded) =
                model.forward_incremental(&[next], &mut caches, ov, opts.capture_deductive)?;
            next = record(&mut out, logits.data(), ded, start)?;
        }
    } else {
        loop {
            let start = Instant::now();
            let (logits, ded) = model.forward_full_with(&[seq.clone()], opts.capture_deductive, ov)?;
            let vocab = cfg.vocab_size;
            let last = &logits.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
            let next = record(&mut out, last, ded, start)?;
            if out.token_ids.len() >= opts.max_length || next == EOS {
                break;
            }
            seq.push(next);
        }
    }
    out.text = decode_bytes(&out.token_ids);
    Ok(out)
}
