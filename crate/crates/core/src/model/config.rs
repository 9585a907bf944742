use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Which spatial sub-layer the encoder-decoder skeleton uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-time dynamic graph convolution (the full model).
    Cdgnet,
    /// Per-slice gated dynamic graph convolution, no temporal compression.
    Dgcn,
    /// Per-slice softmax spatial self-attention.
    Satt,
    /// Static distance-graph GCN.
    Basic,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cdgnet" => Ok(Variant::Cdgnet),
            "dgcn" => Ok(Variant::Dgcn),
            "satt" => Ok(Variant::Satt),
            "basic" => Ok(Variant::Basic),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cdgnet => "cdgnet",
            Variant::Dgcn => "dgcn",
            Variant::Satt => "satt",
            Variant::Basic => "basic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// History length `P` in time slices.
    pub history: usize,
    /// Forecast length `F`.
    pub horizon: usize,
    pub num_nodes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Width of the raw spatial embedding.
    pub d_se: usize,
    pub slots_per_day: usize,
    pub scale_logits: bool,
    pub variant: Variant,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Published defaults: P = F = 12, d = 64, h = 8, L = 3, 5-minute slots.
    pub fn with_nodes(num_nodes: usize) -> Self {
        Self {
            history: 12,
            horizon: 12,
            num_nodes,
            d_model: 64,
            heads: 8,
            layers: 3,
            d_se: 64,
            slots_per_day: 288,
            scale_logits: true,
            variant: Variant::Cdgnet,
            layer_norm_eps: 1e-5,
        }
    }

    /// Width of the temporal one-hot: day-of-week plus time-of-day.
    pub fn d_te(&self) -> usize {
        self.slots_per_day + 7
    }

    /// Decoder sequence length `P/2 + F`.
    pub fn decoder_len(&self) -> usize {
        self.history / 2 + self.horizon
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d_model, self.heads, self.scale_logits)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.history == 0 || self.history % 2 != 0 {
            return fail(format!("history length must be even and positive, got {}", self.history));
        }
        if self.horizon == 0 {
            return fail("horizon must be positive".into());
        }
        if self.num_nodes == 0 {
            return fail("need at least one sensor".into());
        }
        if self.layers == 0 {
            return fail("need at least one layer".into());
        }
        if self.d_se == 0 || self.slots_per_day == 0 {
            return fail("embedding widths must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        self.attention().map(|_| ())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("history", self.history);
        kv.set("horizon", self.horizon);
        kv.set("num_nodes", self.num_nodes);
        kv.set("d_model", self.d_model);
        kv.set("heads", self.heads);
        kv.set("layers", self.layers);
        kv.set("d_se", self.d_se);
        kv.set("d_te", self.d_te());
        kv.set("slots_per_day", self.slots_per_day);
        kv.set("scale_logits", self.scale_logits);
        kv.set("variant", self.variant);
        kv.set("layer_norm_eps", self.layer_norm_eps);
    }

    /// Overrides fields present in `kv`; `d_te`, if given, must agree with
    /// `slots_per_day`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    self.$field = v;
                }
            };
        }
        take!(history, "history");
        take!(horizon, "horizon");
        take!(num_nodes, "num_nodes");
        take!(d_model, "d_model");
        take!(heads, "heads");
        take!(layers, "layers");
        take!(d_se, "d_se");
        take!(slots_per_day, "slots_per_day");
        take!(scale_logits, "scale_logits");
        take!(variant, "variant");
        take!(layer_norm_eps, "layer_norm_eps");
        if let Some(d_te) = kv.get::<usize>("d_te")? {
            if d_te != self.d_te() {
                return Err(Error::Config(format!(
                    "d_te={d_te} does not match slots_per_day + 7 = {}",
                    self.d_te()
                )));
            }
        }
        Ok(())
    }
}
