//! Per-layer key/value storage for incremental decoding, plus the G-cache:
//! the energy-curvature tensor (and the residual-net output) stored once
//! from the prompt pass.

use crate::autograd::softmax_rows;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct CacheMode {
    pub kv_enabled: bool,
    pub g_enabled: bool,
}

impl CacheMode {
    pub const NONE: Self = Self {
        kv_enabled: false,
        g_enabled: false,
    };
    pub const KV: Self = Self {
        kv_enabled: true,
        g_enabled: false,
    };
    pub const KV_G: Self = Self {
        kv_enabled: true,
        g_enabled: true,
    };

    pub fn validate(self) -> Result<Self> {
        if self.g_enabled && !self.kv_enabled {
            return Err(Error::InvalidCacheMode("G-cache requires the KV-cache"));
        }
        Ok(self)
    }
}

/// What a full prompt pass hands to one layer's cache.
#[derive(Debug, Clone)]
pub struct LayerPrime {
    /// Rotary-embedded keys, `[b, h, s, dk]`.
    pub k: Tensor<f32>,
    pub v: Tensor<f32>,
    /// `[b, h, dk, dk]`.
    pub g_lm: Tensor<f32>,
    pub a: Option<Tensor<f32>>,
    pub a_lm: Option<Tensor<f32>>,
    pub a_p: Option<Tensor<f32>>,
    /// `QᵀQ` summed over the prompt, for recomputing G without a G-cache.
    pub density_sum: Option<Tensor<f32>>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    // [b, h, capacity, dk]; only the first `len` positions are meaningful
    k: Vec<f32>,
    v: Vec<f32>,
    g: Option<Tensor<f32>>,
    a: Option<Tensor<f32>>,
    a_lm: Option<Tensor<f32>>,
    a_p: Option<Tensor<f32>>,
    density_sum: Option<Tensor<f32>>,
    appended: bool,
}

impl LayerCache {
    fn empty() -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            g: None,
            a: None,
            a_lm: None,
            a_p: None,
            density_sum: None,
            appended: false,
        }
    }

    /// Energy-curvature tensor in use: the G-cache, or for constant-G
    /// models the constant itself.
    pub fn g_cached(&self) -> Option<&Tensor<f32>> {
        self.g.as_ref()
    }

    pub fn a_cached(&self) -> Option<&Tensor<f32>> {
        self.a.as_ref()
    }

    pub fn a_lm_cached(&self) -> Option<&Tensor<f32>> {
        self.a_lm.as_ref()
    }

    pub fn a_p_cached(&self) -> Option<&Tensor<f32>> {
        self.a_p.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct CacheSet {
    mode: CacheMode,
    batch: usize,
    heads: usize,
    dk: usize,
    capacity: usize,
    len: usize,
    primed: bool,
    /// Constant-G models keep their tensor even without the G-cache.
    constant_g: bool,
    layers: Vec<LayerCache>,
}

impl CacheSet {
    /// Empty caches sized for `capacity` positions. Storage is allocated
    /// at prime time.
    pub fn new(config: &ModelConfig, batch: usize, capacity: usize, mode: CacheMode) -> Result<Self> {
        let mode = mode.validate()?;
        if !mode.kv_enabled {
            return Err(Error::InvalidCacheMode("incremental decoding needs the KV-cache"));
        }
        if batch == 0 {
            return Err(Error::NonPositive("batch"));
        }
        if capacity > config.context_length {
            return Err(Error::ContextOverflow {
                len: capacity,
                limit: config.context_length,
            });
        }
        Ok(Self {
            mode,
            batch,
            heads: config.num_heads,
            dk: config.dk,
            capacity,
            len: 0,
            primed: false,
            constant_g: config.variant != crate::config::Variant::Trainable,
            layers: (0..config.num_layers).map(|_| LayerCache::empty()).collect(),
        })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn g_enabled(&self) -> bool {
        self.mode.g_enabled
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_primed(&self) -> bool {
        self.primed
    }

    /// Positions cached so far.
    pub fn next_position(&self) -> usize {
        self.len
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Cached keys of one layer, `[b, h, t, dk]`.
    pub fn keys(&self, layer: usize) -> Tensor<f32> {
        self.gather(&self.layers[layer].k, self.len)
    }

    pub fn values(&self, layer: usize) -> Tensor<f32> {
        self.gather(&self.layers[layer].v, self.len)
    }

    fn gather(&self, buf: &[f32], t: usize) -> Tensor<f32> {
        let (bh, dk, cap) = (self.batch * self.heads, self.dk, self.capacity);
        let mut out = Vec::with_capacity(bh * t * dk);
        for r in 0..bh {
            out.extend_from_slice(&buf[r * cap * dk..(r * cap + t) * dk]);
        }
        Tensor::new(&[self.batch, self.heads, t, dk], out).expect("consistent sizes")
    }

    pub fn prime(&mut self, products: Vec<LayerPrime>) -> Result<()> {
        if self.primed {
            return Err(Error::AlreadyPrimed);
        }
        if products.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} prompt products for {} layers",
                products.len(),
                self.layers.len()
            )));
        }
        let (b, h, dk, cap) = (self.batch, self.heads, self.dk, self.capacity);
        let s = products[0].k.shape().get(2).copied().unwrap_or(0);
        if s == 0 {
            return Err(Error::EmptySequence);
        }
        if s > cap {
            return Err(Error::ContextOverflow { len: s, limit: cap });
        }
        for (cache, p) in self.layers.iter_mut().zip(products) {
            let want = [b, h, s, dk];
            if p.k.shape() != want || p.v.shape() != want || p.g_lm.shape() != [b, h, dk, dk] {
                return Err(Error::ShapeMismatch(format!(
                    "prompt products k {:?}, v {:?}, g {:?}",
                    p.k.shape(),
                    p.v.shape(),
                    p.g_lm.shape()
                )));
            }
            cache.k = vec![0.0; b * h * cap * dk];
            cache.v = vec![0.0; b * h * cap * dk];
            for r in 0..b * h {
                let dst = r * cap * dk..(r * cap + s) * dk;
                let src = r * s * dk..(r + 1) * s * dk;
                cache.k[dst.clone()].copy_from_slice(&p.k.data()[src.clone()]);
                cache.v[dst].copy_from_slice(&p.v.data()[src]);
            }
            if self.mode.g_enabled || self.constant_g {
                cache.g = Some(p.g_lm);
            }
            if self.mode.g_enabled {
                cache.a = p.a;
                cache.a_lm = p.a_lm;
                cache.a_p = p.a_p;
            } else {
                cache.density_sum = p.density_sum;
            }
            cache.appended = false;
        }
        self.len = s;
        self.primed = true;
        Ok(())
    }

    /// Writes one position of keys and values, `[b, h, 1, dk]` each, at
    /// `next_position`. Call `advance` once every layer has appended.
    pub fn append(&mut self, layer: usize, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<()> {
        if !self.primed {
            return Err(Error::NotPrimed);
        }
        let (b, h, dk, cap, pos) = (self.batch, self.heads, self.dk, self.capacity, self.len);
        if k.shape() != [b, h, 1, dk] || v.shape() != [b, h, 1, dk] {
            return Err(Error::ShapeMismatch(format!(
                "append k {:?}, v {:?}",
                k.shape(),
                v.shape()
            )));
        }
        if pos >= cap {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                limit: cap,
            });
        }
        let cache = &mut self.layers[layer];
        if cache.appended {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} appended twice at position {pos}"
            )));
        }
        for r in 0..b * h {
            let dst = (r * cap + pos) * dk..(r * cap + pos + 1) * dk;
            cache.k[dst.clone()].copy_from_slice(&k.data()[r * dk..(r + 1) * dk]);
            cache.v[dst].copy_from_slice(&v.data()[r * dk..(r + 1) * dk]);
        }
        cache.appended = true;
        Ok(())
    }

    /// Moves the cursor past the position every layer just appended.
    pub fn advance(&mut self) -> Result<()> {
        if !self.primed {
            return Err(Error::NotPrimed);
        }
        if let Some(i) = self.layers.iter().position(|l| !l.appended) {
            return Err(Error::InvalidArgument(format!(
                "layer {i} has not appended position {}",
                self.len
            )));
        }
        for l in &mut self.layers {
            l.appended = false;
        }
        self.len += 1;
        Ok(())
    }

    /// Adds `qᵀq` for the newest query to the running sum and returns the
    /// density operator over every position so far, including the one
    /// being appended.
    pub fn accumulate_density(&mut self, layer: usize, q: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.primed {
            return Err(Error::NotPrimed);
        }
        let count = self.len + 1;
        let cache = &mut self.layers[layer];
        let sum = cache
            .density_sum
            .as_mut()
            .ok_or(Error::InvalidCacheMode("no running density for this cache"))?;
        let gram = q.matmul(q, true, false)?;
        sum.add_assign(&gram);
        Ok(sum.map(|x| x / count as f32))
    }

    /// Attention of one new query over every cached position (including
    /// the one just appended), without a mask:
    /// `softmax(q·g·Kᵀ/√dk)·V`. `g` is `[b, h, dk, dk]` or `[h, dk, dk]`.
    pub fn attend_incremental(&self, layer: usize, q: &Tensor<f32>, g: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.primed {
            return Err(Error::NotPrimed);
        }
        let (b, h, dk) = (self.batch, self.heads, self.dk);
        if q.shape() != [b, h, 1, dk] {
            return Err(Error::ShapeMismatch(format!("incremental query {:?}", q.shape())));
        }
        let cache = &self.layers[layer];
        let t = self.len + usize::from(cache.appended);
        let k = self.gather(&cache.k, t);
        let v = self.gather(&cache.v, t);
        let qg = q.matmul(g, false, false)?;
        let mut e = qg.matmul(&k, false, true)?;
        let scale = 1.0 / (dk as f32).sqrt();
        for x in e.data_mut() {
            *x *= scale;
        }
        softmax_rows(e.data_mut(), 1, t, false);
        e.matmul(&v, false, false)
    }

    /// Empties every layer; the set can be primed again.
    pub fn reset(&mut self) {
        for l in &mut self.layers {
            *l = LayerCache::empty();
        }
        self.len = 0;
        self.primed = false;
    }
}
