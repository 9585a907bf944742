//! The encoder-decoder forecaster.
//!
//! Data flow for one batch of `B` windows:
//!
//! ```text
//! x_hist [B,P,N,1] ─ input MLP ─> x_en⁰ ─ L encoder layers ─> enc_out [B,P,N,d]
//! x_de⁰ = x_en⁰[P/2..P] ++ zeros[F] ─ L decoder layers (with enc_out) ─ output MLP
//!       ─> [B,P/2+F,N,1] ─ last F positions ─> forecast [B,F,N,1]
//! ```
//!
//! Every sub-layer is wrapped in a residual connection and layer norm. The
//! spatial sub-layers depend on [`Variant`].

mod config;
mod embedding;

pub use config::{ModelConfig, Variant};
pub use embedding::{spatio_temporal_embedding, temporal_one_hot, TimeOfWeek};

use embedding::{register_two_layer, two_layer};
use rand::SeedableRng;

use crate::attention::{
    cdgcn, cdgcn_ed, mhdgcn, spatial_self_attention, AttentionConfig, AttnParams, CdgcnParams,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore, SeededRng};
use crate::tensor::Tensor;

/// Extra inputs that are not learned from data.
#[derive(Debug, Clone, Default)]
pub struct ModelInputs {
    /// Dense `N × N` static graph weights (row = destination), required by
    /// the `Basic` variant.
    pub static_adjacency: Option<Vec<f64>>,
    /// `N × d_se` values replacing the random spatial-embedding init.
    pub spatial_embedding: Option<Vec<f64>>,
}

/// Attention weights captured from one spatial sub-layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// e.g. `encoder.0`, `decoder.1.self`, `decoder.1.cross`.
    pub name: String,
    /// Row-normalized adjacency `[B, T, h, N, N]`.
    pub adjacency: Option<Tensor>,
    /// Temporal attention weights `[B, N, h, T, T]`.
    pub temporal: Option<Tensor>,
}

/// Inputs for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Normalized history `[B, P, N, 1]`.
    pub history: Tensor,
    /// Time of week for all `P + F` positions of each window.
    pub times: Vec<Vec<TimeOfWeek>>,
}

/// Intermediate states of one decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderLayerOutput {
    pub after_self: Tensor,
    pub after_cross: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct Cdgnet {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// `D̃⁻¹(A + I)` for the `Basic` variant, row-major `N × N`.
    pub static_transition: Option<Vec<f64>>,
}

fn lead_len(x: &Tensor, what: &'static str, axis: usize, expected: usize) -> Result<()> {
    if x.rank() != 4 || x.shape()[axis] != expected {
        return Err(Error::Contract(format!(
            "{what} has shape {:?}, expected length {expected} on axis {axis}",
            x.shape()
        )));
    }
    Ok(())
}

/// Random-walk normalization of `A + I`.
pub fn static_transition(adjacency: &[f64], n: usize) -> Result<Vec<f64>> {
    if adjacency.len() != n * n {
        return Err(Error::Dimension {
            op: "static adjacency",
            lhs: vec![n, n],
            rhs: vec![adjacency.len()],
        });
    }
    if adjacency.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Config("static adjacency weights must be finite and nonnegative".into()));
    }
    let mut a = adjacency.to_vec();
    for i in 0..n {
        a[i * n + i] += 1.0;
        let deg: f64 = a[i * n..(i + 1) * n].iter().sum();
        a[i * n..(i + 1) * n].iter_mut().for_each(|w| *w /= deg);
    }
    Ok(a)
}

impl Cdgnet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_inputs(config, seed, ModelInputs::default())
    }

    pub fn with_inputs(config: ModelConfig, seed: u64, inputs: ModelInputs) -> Result<Self> {
        config.validate()?;
        let static_transition = match (&inputs.static_adjacency, config.variant) {
            (Some(a), _) => Some(static_transition(a, config.num_nodes)?),
            (None, Variant::Basic) => {
                return Err(Error::Config("the basic variant needs a static adjacency file".into()))
            }
            (None, _) => None,
        };
        let params = Self::init_params(&config, seed, inputs.spatial_embedding.as_deref())?;
        Ok(Self {
            config,
            params,
            static_transition,
        })
    }

    fn init_params(c: &ModelConfig, seed: u64, se_init: Option<&[f64]>) -> Result<ParamStore> {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = c.d_model;
        register_two_layer(&mut s, "input", 1, d, d, &mut rng)?;
        match se_init {
            Some(values) => {
                if values.len() != c.num_nodes * c.d_se {
                    return Err(Error::Config(format!(
                        "spatial embedding has {} values, expected {} × {}",
                        values.len(),
                        c.num_nodes,
                        c.d_se
                    )));
                }
                s.insert("ste.se_raw", &[c.num_nodes, c.d_se], values.to_vec())?;
            }
            None => s.insert_normal("ste.se_raw", &[c.num_nodes, c.d_se], 1.0 / (c.d_se as f64).sqrt(), &mut rng)?,
        }
        register_two_layer(&mut s, "ste.se", c.d_se, d, d, &mut rng)?;
        register_two_layer(&mut s, "ste.te", c.d_te(), d, d, &mut rng)?;
        let layer_norm = |s: &mut ParamStore, prefix: String| -> Result<()> {
            s.insert_constant(&format!("{prefix}.gamma"), &[d], 1.0)?;
            s.insert_constant(&format!("{prefix}.beta"), &[d], 0.0)
        };
        for l in 0..c.layers {
            let p = format!("enc.{l}");
            Self::register_self(&mut s, c, &format!("{p}.spatial"), &mut rng)?;
            layer_norm(&mut s, format!("{p}.ln1"))?;
            register_two_layer(&mut s, &format!("{p}.ff"), d, d, d, &mut rng)?;
            layer_norm(&mut s, format!("{p}.ln2"))?;
        }
        for l in 0..c.layers {
            let p = format!("dec.{l}");
            Self::register_self(&mut s, c, &format!("{p}.spatial"), &mut rng)?;
            layer_norm(&mut s, format!("{p}.ln1"))?;
            Self::register_cross(&mut s, c, &format!("{p}.cross"), &mut rng)?;
            layer_norm(&mut s, format!("{p}.ln2"))?;
            register_two_layer(&mut s, &format!("{p}.ff"), d, d, d, &mut rng)?;
            layer_norm(&mut s, format!("{p}.ln3"))?;
        }
        register_two_layer(&mut s, "output", d, d, 1, &mut rng)?;
        Ok(s)
    }

    fn register_self(s: &mut ParamStore, c: &ModelConfig, prefix: &str, rng: &mut SeededRng) -> Result<()> {
        let d = c.d_model;
        match c.variant {
            Variant::Cdgnet => CdgcnParams::register(s, prefix, 2 * d, d, rng),
            Variant::Dgcn | Variant::Satt => AttnParams::register(s, prefix, 2 * d, 2 * d, d, rng),
            Variant::Basic => s.insert_xavier(&format!("{prefix}.w"), 2 * d, d, rng),
        }
    }

    fn register_cross(s: &mut ParamStore, c: &ModelConfig, prefix: &str, rng: &mut SeededRng) -> Result<()> {
        let d = c.d_model;
        match c.variant {
            Variant::Cdgnet => CdgcnParams::register_ed(s, prefix, d, rng),
            Variant::Dgcn | Variant::Satt => AttnParams::register(s, prefix, d, d, d, rng),
            Variant::Basic => {
                s.insert_xavier(&format!("{prefix}.w_dec"), d, d, rng)?;
                s.insert_xavier(&format!("{prefix}.w_enc"), d, d, rng)
            }
        }
    }

    /// Number of scalar parameters; a pure function of the config.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn attention(&self) -> Result<AttentionConfig> {
        self.config.attention()
    }

    fn transition(&self) -> Result<Tensor> {
        let n = self.config.num_nodes;
        let a = self
            .static_transition
            .as_ref()
            .ok_or_else(|| Error::Config("the basic variant needs a static adjacency file".into()))?;
        Tensor::new(&[n, n], a.clone())
    }

    fn layer_norm(&self, x: &Tensor, bound: &Bound, prefix: &str) -> Result<Tensor> {
        x.layer_norm(
            &bound.get(&format!("{prefix}.gamma"))?,
            &bound.get(&format!("{prefix}.beta"))?,
            self.config.layer_norm_eps,
        )
    }

    /// Lifts normalized speeds `[.., 1]` to the model width.
    pub fn input_layer(&self, bound: &Bound, x: &Tensor) -> Result<Tensor> {
        two_layer(x, bound, "input")
    }

    /// Maps decoder states back to one value per sensor.
    pub fn output_layer(&self, bound: &Bound, x: &Tensor) -> Result<Tensor> {
        two_layer(x, bound, "output")
    }

    /// Spatial sub-layer over `z = [x ‖ ste]`, causal in time.
    fn spatial_self(&self, bound: &Bound, prefix: &str, z: &Tensor, trace: Option<(&mut Vec<LayerTrace>, String)>) -> Result<Tensor> {
        let cfg = self.attention()?;
        let (output, adjacency, temporal) = match self.config.variant {
            Variant::Cdgnet => {
                let r = cdgcn(z, &CdgcnParams::bind(bound, prefix)?, &cfg, true)?;
                (r.output, Some(r.adjacency), Some(r.temporal))
            }
            Variant::Dgcn => {
                let r = mhdgcn(z, z, &AttnParams::bind(bound, prefix)?, &cfg)?;
                (r.output, Some(r.weights), None)
            }
            Variant::Satt => {
                let r = spatial_self_attention(z, z, &AttnParams::bind(bound, prefix)?, &cfg)?;
                (r.output, Some(r.weights), None)
            }
            Variant::Basic => {
                let w = bound.get(&format!("{prefix}.w"))?;
                (self.transition()?.matmul(z)?.matmul(&w)?.relu(), None, None)
            }
        };
        if let Some((sink, name)) = trace {
            sink.push(LayerTrace {
                name,
                adjacency,
                temporal,
            });
        }
        Ok(output)
    }

    /// Decoder-to-encoder sub-layer.
    fn spatial_cross(
        &self,
        bound: &Bound,
        prefix: &str,
        x_de: &Tensor,
        enc_out: &Tensor,
        trace: Option<(&mut Vec<LayerTrace>, String)>,
    ) -> Result<Tensor> {
        let cfg = self.attention()?;
        let p = enc_out.shape()[1];
        let (output, adjacency, temporal) = match self.config.variant {
            Variant::Cdgnet => {
                let r = cdgcn_ed(x_de, enc_out, &CdgcnParams::bind(bound, prefix)?, &cfg)?;
                (r.output, Some(r.adjacency), Some(r.temporal))
            }
            Variant::Dgcn => {
                let last = enc_out.slice(1, p - 1, p)?;
                let r = mhdgcn(x_de, &last, &AttnParams::bind(bound, prefix)?, &cfg)?;
                (r.output, Some(r.weights), None)
            }
            Variant::Satt => {
                let last = enc_out.slice(1, p - 1, p)?;
                let r = spatial_self_attention(x_de, &last, &AttnParams::bind(bound, prefix)?, &cfg)?;
                (r.output, Some(r.weights), None)
            }
            Variant::Basic => {
                let last = enc_out.slice(1, p - 1, p)?;
                let mixed = x_de
                    .matmul(&bound.get(&format!("{prefix}.w_dec"))?)?
                    .add(&last.matmul(&bound.get(&format!("{prefix}.w_enc"))?)?)?;
                (self.transition()?.matmul(&mixed)?.relu(), None, None)
            }
        };
        if let Some((sink, name)) = trace {
            sink.push(LayerTrace {
                name,
                adjacency,
                temporal,
            });
        }
        Ok(output)
    }

    /// One encoder layer on `[B, P, N, d]`.
    pub fn encoder_layer(
        &self,
        bound: &Bound,
        layer: usize,
        x: &Tensor,
        ste: &Tensor,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Tensor> {
        let p = format!("enc.{layer}");
        let z = Tensor::concat_last(&[x.clone(), ste.clone()])?;
        let spatial = self.spatial_self(bound, &format!("{p}.spatial"), &z, trace.map(|t| (t, format!("encoder.{layer}"))))?;
        let d = self.layer_norm(&spatial.add(x)?, bound, &format!("{p}.ln1"))?;
        let ff = two_layer(&d, bound, &format!("{p}.ff"))?;
        self.layer_norm(&ff.add(&d)?, bound, &format!("{p}.ln2"))
    }

    /// One decoder layer on `[B, P/2+F, N, d]` against the final encoder output.
    pub fn decoder_layer(
        &self,
        bound: &Bound,
        layer: usize,
        x: &Tensor,
        ste_de: &Tensor,
        enc_out: &Tensor,
        mut trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<DecoderLayerOutput> {
        let p = format!("dec.{layer}");
        let z = Tensor::concat_last(&[x.clone(), ste_de.clone()])?;
        let self_trace = trace.as_deref_mut().map(|t| (t, format!("decoder.{layer}.self")));
        let spatial = self.spatial_self(bound, &format!("{p}.spatial"), &z, self_trace)?;
        let after_self = self.layer_norm(&spatial.add(x)?, bound, &format!("{p}.ln1"))?;
        let cross_trace = trace.map(|t| (t, format!("decoder.{layer}.cross")));
        let cross = self.spatial_cross(bound, &format!("{p}.cross"), &after_self, enc_out, cross_trace)?;
        let after_cross = self.layer_norm(&cross.add(&after_self)?, bound, &format!("{p}.ln2"))?;
        let ff = two_layer(&after_cross, bound, &format!("{p}.ff"))?;
        let output = self.layer_norm(&ff.add(&after_cross)?, bound, &format!("{p}.ln3"))?;
        Ok(DecoderLayerOutput {
            after_self,
            after_cross,
            output,
        })
    }

    /// Runs the encoder stack; returns its final output.
    pub fn encode(&self, bound: &Bound, x_en0: &Tensor, ste_en: &Tensor, mut trace: Option<&mut Vec<LayerTrace>>) -> Result<Tensor> {
        let mut h = x_en0.clone();
        for l in 0..self.config.layers {
            h = self.encoder_layer(bound, l, &h, ste_en, trace.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Forecast `[B, F, N, 1]` in normalized units.
    pub fn forward(&self, bound: &Bound, batch: &Batch, mut trace: Option<&mut Vec<LayerTrace>>) -> Result<Tensor> {
        let c = &self.config;
        let (p, f, n) = (c.history, c.horizon, c.num_nodes);
        let x = &batch.history;
        lead_len(x, "history", 1, p)?;
        lead_len(x, "history", 2, n)?;
        let b = x.shape()[0];
        if batch.times.len() != b {
            return Err(Error::Contract(format!(
                "{} time rows for a batch of {b}",
                batch.times.len()
            )));
        }
        if let Some(row) = batch.times.iter().find(|r| r.len() != p + f) {
            return Err(Error::Contract(format!(
                "window has {} time indices, expected P + F = {}",
                row.len(),
                p + f
            )));
        }
        let ste = spatio_temporal_embedding(bound, &batch.times, c.slots_per_day)?;
        let ste_en = ste.slice(1, 0, p)?;
        let ste_de = ste.slice(1, p / 2, p + f)?;

        let x_en0 = self.input_layer(bound, x)?;
        let enc_out = self.encode(bound, &x_en0, &ste_en, trace.as_deref_mut())?;

        let placeholders = Tensor::zeros(&[b, f, n, c.d_model]);
        let mut h = Tensor::concat(&[x_en0.slice(1, p / 2, p)?, placeholders], 1)?;
        for l in 0..c.layers {
            h = self
                .decoder_layer(bound, l, &h, &ste_de, &enc_out, trace.as_deref_mut())?
                .output;
        }
        let y = self.output_layer(bound, &h)?;
        y.slice(1, p / 2, p / 2 + f)
    }

    /// Forecast with frozen parameters (no gradient tracking).
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        self.forward(&self.params.bind_frozen(), batch, None)
    }
}
