//! Browser demo: parameter counts, attention/G heatmaps and cached versus
//! uncached generation on a small randomly initialised model.

use pldr::autograd::Graph;
use pldr::cache::CacheMode;
use pldr::config::PredefinedGKind;
use pldr::generation::{decode_bytes, encode_text, generate, GenerateOptions, SamplerSpec, BOS};
use pldr::plga::plga_attention;
use pldr::{ModelConfig, PldrModel, Variant};
use serde_json::json;
use wasm_bindgen::prelude::*;
use web_time::Instant;

pub fn param_counts_json(config_text: &str) -> Result<String, String> {
    let cfg = ModelConfig::from_kv_text(config_text).map_err(|e| e.to_string())?;
    let mut v = serde_json::to_value(cfg.plga_param_count()).map_err(|e| e.to_string())?;
    v["config"] = serde_json::Value::String(cfg.to_kv_text());
    Ok(v.to_string())
}

#[wasm_bindgen]
pub fn param_counts(config_text: &str) -> Result<String, JsError> {
    param_counts_json(config_text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct Demo {
    model: PldrModel,
}

impl Demo {
    pub fn create(variant: &str, seed: u32) -> Result<Demo, String> {
        let variant: Variant = variant.parse().map_err(|e: pldr::Error| e.to_string())?;
        let cfg = ModelConfig {
            variant: if variant == Variant::TransferredG { Variant::Trainable } else { variant },
            predefined_g_kind: (variant == Variant::PredefinedG).then_some(PredefinedGKind::RandomNormal),
            init_seed: seed as u64,
            ..ModelConfig::default()
        };
        let mut model = PldrModel::new(cfg).map_err(|e| e.to_string())?;
        if variant == Variant::TransferredG {
            model = model.transfer_g().map_err(|e| e.to_string())?;
        }
        Ok(Demo { model })
    }

    pub fn model(&self) -> &PldrModel {
        &self.model
    }

    /// Attention probabilities and the G tensor of every head in `layer`.
    pub fn heatmap_json(&self, prompt: &str, layer: usize) -> Result<String, String> {
        let cfg = self.model.config();
        if layer >= cfg.num_layers {
            return Err(format!("layer {layer} out of range (model has {})", cfg.num_layers));
        }
        let mut ids = vec![BOS];
        ids.extend(encode_text(prompt));
        ids.truncate(cfg.context_length);
        let s = ids.len();
        let (h, dk) = (cfg.num_heads, cfg.dk);

        let mut g = Graph::new();
        let trace = self.model.build_forward(&mut g, &[ids.clone()], None).map_err(|e| e.to_string())?;
        let lt = &trace.layers[layer];
        let (_, probs) = plga_attention(&mut g, lt.q, lt.k, lt.v, lt.g_used, true).map_err(|e| e.to_string())?;
        let probs = g.value(probs).data();
        let g_data = g.value(lt.g_used).data();

        let heads: Vec<_> = (0..h)
            .map(|hd| {
                let attention: Vec<Vec<f32>> =
                    (0..s).map(|i| probs[(hd * s + i) * s..(hd * s + i + 1) * s].to_vec()).collect();
                let g_head: Vec<Vec<f32>> =
                    (0..dk).map(|r| g_data[(hd * dk + r) * dk..(hd * dk + r + 1) * dk].to_vec()).collect();
                json!({ "attention": attention, "g": g_head })
            })
            .collect();
        let tokens: Vec<String> = ids
            .iter()
            .map(|&t| if t == BOS { "<s>".to_string() } else { decode_bytes(&[t]) })
            .collect();
        Ok(json!({ "tokens": tokens, "layer": layer, "heads": heads }).to_string())
    }

    /// Greedy generation with KV+G caches and without, timed.
    pub fn compare_json(&self, prompt: &str, n_tokens: usize) -> Result<String, String> {
        let run = |cache| {
            let start = Instant::now();
            let r = generate(
                &self.model,
                prompt,
                &GenerateOptions {
                    max_length: n_tokens,
                    sampler: SamplerSpec::greedy(),
                    cache,
                    g_override: None,
                    capture_deductive: false,
                },
            )
            .map_err(|e| e.to_string())?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            Ok::<_, String>((r, ms))
        };
        let (cached, cached_ms) = run(CacheMode::KV_G)?;
        let (uncached, uncached_ms) = run(CacheMode::NONE)?;
        Ok(json!({
            "cached": { "text": cached.text, "token_ids": cached.token_ids, "ms": cached_ms },
            "uncached": { "text": uncached.text, "token_ids": uncached.token_ids, "ms": uncached_ms },
            "identical": cached.token_ids == uncached.token_ids,
        })
        .to_string())
    }
}

#[wasm_bindgen]
impl Demo {
    /// `variant` is one of `trainable`, `predefined_g`, `transferred_g`.
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, seed: u32) -> Result<Demo, JsError> {
        Demo::create(variant, seed).map_err(|e| JsError::new(&e))
    }

    pub fn summary(&self) -> String {
        let cfg = self.model.config();
        json!({
            "variant": cfg.variant,
            "num_layers": cfg.num_layers,
            "num_heads": cfg.num_heads,
            "dk": cfg.dk,
            "context_length": cfg.context_length,
            "trainable_params": self.model.trainable_param_count(),
        })
        .to_string()
    }

    pub fn heatmap(&self, prompt: &str, layer: usize) -> Result<String, JsError> {
        self.heatmap_json(prompt, layer).map_err(|e| JsError::new(&e))
    }

    pub fn compare(&self, prompt: &str, n_tokens: usize) -> Result<String, JsError> {
        self.compare_json(prompt, n_tokens).map_err(|e| JsError::new(&e))
    }
}
