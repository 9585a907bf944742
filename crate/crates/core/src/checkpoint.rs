//! Single-file model snapshots.
//!
//! ```text
//! CDGNET-CHECKPOINT v1
//! key=value            (model config and normalization stats)
//! …
//! <blank line>
//! param <name> <d0>x<d1>…\n<little-endian f64 payload>
//! buffer static_transition <N>x<N>\n<payload>      (basic variant only)
//! ```

use std::fs;
use std::path::Path;

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{Cdgnet, ModelConfig, ModelInputs};

const MAGIC: &str = "CDGNET-CHECKPOINT v1";
const STATIC_BUFFER: &str = "static_transition";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Cdgnet,
    pub stats: NormalizationStats,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn push_block(out: &mut Vec<u8>, kind: &str, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(format!("{kind} {name} {}\n", shape_text(shape)).as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = KeyValues::new();
        self.model.config.to_kv(&mut kv);
        kv.set("norm_mean", self.stats.mean);
        kv.set("norm_std", self.stats.std);
        let mut out = format!("{MAGIC}\n{}\n", kv.to_text()).into_bytes();
        for p in self.model.params.iter() {
            push_block(&mut out, "param", &p.name, &p.shape, &p.data);
        }
        if let Some(t) = &self.model.static_transition {
            let n = self.model.config.num_nodes;
            push_block(&mut out, "buffer", STATIC_BUFFER, &[n, n], t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let header_end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let (magic, body) = header.split_once('\n').unwrap_or((header, ""));
        if magic != MAGIC {
            return Err(bad(format!("unrecognized format {magic:?}")));
        }
        let kv = KeyValues::parse(body)?;
        let n: usize = kv.get("num_nodes")?.ok_or_else(|| bad("header lacks num_nodes".into()))?;
        let mut config = ModelConfig::with_nodes(n);
        config.apply_kv(&kv)?;
        let stats = NormalizationStats {
            mean: kv.get("norm_mean")?.ok_or_else(|| bad("header lacks norm_mean".into()))?,
            std: kv.get("norm_std")?.ok_or_else(|| bad("header lacks norm_std".into()))?,
        };

        // A fresh model fixes the expected parameter names and shapes; the
        // placeholder graph is replaced by the stored buffer below.
        let inputs = ModelInputs {
            static_adjacency: Some(vec![0.0; n * n]),
            spatial_embedding: None,
        };
        let mut model = Cdgnet::with_inputs(config, 0, inputs)?;
        model.static_transition = None;
        let mut seen = vec![false; model.params.len()];

        let mut pos = header_end + 2;
        while pos < bytes.len() {
            let line_end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| pos + i)
                .ok_or_else(|| bad("truncated block header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..line_end]).map_err(|_| bad("block header is not UTF-8".into()))?;
            let mut parts = line.split(' ');
            let (Some(kind), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("malformed block header {line:?}")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad shape in {line:?}")))?;
            let count: usize = shape.iter().product();
            let start = line_end + 1;
            let end = start + count * 8;
            if end > bytes.len() {
                return Err(bad(format!("payload of {name} is truncated")));
            }
            let data: Vec<f64> = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            match kind {
                "param" => {
                    let idx = model
                        .params
                        .iter()
                        .position(|p| p.name == name)
                        .ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
                    let p = model.params.get_mut(name).expect("index found above");
                    if p.shape != shape {
                        return Err(Error::Config(format!(
                            "parameter {name} has shape {shape:?}, config implies {:?}",
                            p.shape
                        )));
                    }
                    p.data = data;
                    seen[idx] = true;
                }
                "buffer" if name == STATIC_BUFFER && shape == [n, n] => model.static_transition = Some(data),
                _ => return Err(bad(format!("unexpected block {line:?}"))),
            }
            pos = end;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &model.params.iter().nth(i).expect("index in range").name;
            return Err(bad(format!("parameter {name} is missing")));
        }
        if model.config.variant == crate::model::Variant::Basic && model.static_transition.is_none() {
            return Err(bad("basic variant without a stored graph".into()));
        }
        Ok(Self { model, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
