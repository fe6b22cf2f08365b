//! Model hyperparameters, their `key = value` text form, and the exact
//! parameter-count arithmetic for the power law graph attention block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a layer's energy-curvature tensor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full PLGA network computes the tensor from each input.
    Trainable,
    /// Constant tensor fixed at initialization.
    PredefinedG,
    /// Constant tensor captured from a trained model.
    TransferredG,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Trainable => "trainable",
            Variant::PredefinedG => "predefined_g",
            Variant::TransferredG => "transferred_g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredefinedGKind {
    Identity,
    RandomNormal,
    FromCheckpoint,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainable" => Ok(Variant::Trainable),
            "predefined_g" => Ok(Variant::PredefinedG),
            "transferred_g" => Ok(Variant::TransferredG),
            _ => Err(Error::InvalidConfig(format!("unknown variant `{s}`"))),
        }
    }
}

impl FromStr for PredefinedGKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PredefinedGKind::Identity),
            "random_normal" => Ok(PredefinedGKind::RandomNormal),
            "from_checkpoint" => Ok(PredefinedGKind::FromCheckpoint),
            _ => Err(Error::InvalidConfig(format!("unknown predefined_g_kind `{s}`"))),
        }
    }
}

impl fmt::Display for PredefinedGKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredefinedGKind::Identity => "identity",
            PredefinedGKind::RandomNormal => "random_normal",
            PredefinedGKind::FromCheckpoint => "from_checkpoint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    /// Hidden size of the decoder feed-forward block.
    pub d_ff: usize,
    /// Per-head embedding size.
    pub dk: usize,
    /// Hidden size of the SwiGLU units inside the residual network.
    pub a_dff: usize,
    pub num_residual_layers: usize,
    pub glu_per_residual: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Positive bias added to the metric tensor.
    pub epsilon_bias: f64,
    pub variant: Variant,
    pub predefined_g_kind: Option<PredefinedGKind>,
    /// Seed for weight initialization (and the random predefined tensor).
    pub init_seed: u64,
}

/// Vocabulary: 256 byte values, then begin- and end-of-sequence markers.
pub const BYTE_VOCAB: usize = 258;

impl Default for ModelConfig {
    /// Desk-scale model that trains in minutes on a laptop CPU.
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 172,
            dk: 16,
            a_dff: 42,
            num_residual_layers: 8,
            glu_per_residual: 2,
            vocab_size: BYTE_VOCAB,
            context_length: 128,
            epsilon_bias: 1e-6,
            variant: Variant::Trainable,
            predefined_g_kind: None,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub residual_net_params: u64,
    pub per_layer_plga_params: u64,
    pub total_plga_params: u64,
    /// `residual_net_params / dk²`.
    pub resl_over_a_ratio: f64,
}

impl ModelConfig {
    /// A configuration with the published 110M-class attention sizes.
    pub fn table_110m(a_dff: usize) -> Self {
        Self {
            num_layers: 5,
            num_heads: 14,
            d_model: 896,
            d_ff: 2389,
            dk: 64,
            a_dff,
            vocab_size: 32_000,
            context_length: 1024,
            ..Self::default()
        }
    }

    pub fn validate(self) -> Result<Self> {
        let sizes: [(&'static str, usize); 10] = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("dk", self.dk),
            ("a_dff", self.a_dff),
            ("num_residual_layers", self.num_residual_layers),
            ("glu_per_residual", self.glu_per_residual),
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::NonPositive(name));
        }
        if !(self.epsilon_bias > 0.0 && self.epsilon_bias.is_finite()) {
            return Err(Error::NonPositive("epsilon_bias"));
        }
        if self.d_model != self.num_heads * self.dk {
            return Err(Error::DimensionMismatch(format!(
                "d_model {} != num_heads {} x dk {}",
                self.d_model, self.num_heads, self.dk
            )));
        }
        if !self.dk.is_multiple_of(2) {
            return Err(Error::DimensionMismatch(format!(
                "dk {} must be even for rotary embedding",
                self.dk
            )));
        }
        if self.variant == Variant::PredefinedG && self.predefined_g_kind.is_none() {
            return Err(Error::InvalidConfig(
                "predefined_g variant needs predefined_g_kind".into(),
            ));
        }
        Ok(self)
    }

    /// Exact parameter arithmetic for the PLGA block that a constant
    /// energy-curvature tensor replaces.
    pub fn plga_param_count(&self) -> ParamCountReport {
        let dk = self.dk as u64;
        let a = self.a_dff as u64;
        let swiglu = (a * dk + a) * 2;
        let lu = a * dk + dk;
        let block = (swiglu + lu) * self.glu_per_residual as u64 + 2 * dk;
        let residual_net_params = block * self.num_residual_layers as u64;
        let per_layer_plga_params = residual_net_params + 5 * dk * dk * self.num_heads as u64 + 2 * dk;
        ParamCountReport {
            residual_net_params,
            per_layer_plga_params,
            total_plga_params: per_layer_plga_params * self.num_layers as u64,
            resl_over_a_ratio: residual_net_params as f64 / (dk * dk) as f64,
        }
    }

    /// Parse `key = value` lines. `#` starts a comment; unknown keys and
    /// duplicate keys are errors. Missing keys keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            let bad = |e: &dyn fmt::Display| {
                Error::InvalidConfig(format!("line {}: bad value for `{key}`: {e}", lineno + 1))
            };
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
            match key {
                "num_layers" => cfg.num_layers = int(value)?,
                "num_heads" => cfg.num_heads = int(value)?,
                "d_model" => cfg.d_model = int(value)?,
                "d_ff" => cfg.d_ff = int(value)?,
                "dk" => cfg.dk = int(value)?,
                "a_dff" => cfg.a_dff = int(value)?,
                "num_residual_layers" => cfg.num_residual_layers = int(value)?,
                "glu_per_residual" => cfg.glu_per_residual = int(value)?,
                "vocab_size" => cfg.vocab_size = int(value)?,
                "context_length" => cfg.context_length = int(value)?,
                "epsilon_bias" => cfg.epsilon_bias = value.parse().map_err(|e| bad(&e))?,
                "variant" => cfg.variant = value.parse()?,
                "predefined_g_kind" => {
                    cfg.predefined_g_kind = match value {
                        "none" => None,
                        v => Some(v.parse()?),
                    }
                }
                "init_seed" => cfg.init_seed = value.parse().map_err(|e| bad(&e))?,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "line {}: unknown key `{key}`",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()
    }

    pub fn to_kv_text(&self) -> String {
        let kind = self
            .predefined_g_kind
            .map(|k| k.to_string())
            .unwrap_or_else(|| "none".into());
        format!(
            "num_layers = {}\nnum_heads = {}\nd_model = {}\nd_ff = {}\ndk = {}\na_dff = {}\n\
             num_residual_layers = {}\nglu_per_residual = {}\nvocab_size = {}\ncontext_length = {}\n\
             epsilon_bias = {:e}\nvariant = {}\npredefined_g_kind = {}\ninit_seed = {}\n",
            self.num_layers,
            self.num_heads,
            self.d_model,
            self.d_ff,
            self.dk,
            self.a_dff,
            self.num_residual_layers,
            self.glu_per_residual,
            self.vocab_size,
            self.context_length,
            self.epsilon_bias,
            self.variant.name(),
            kind,
            self.init_seed
        )
    }
}
