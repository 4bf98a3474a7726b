//! Adapter checkpoints in the safetensors container.
//!
//! Each adapter pair is stored as `"{layer}.down"` and `"{layer}.up"` f64
//! matrices. The metadata record carries rank, scale, backbone id, config
//! hash, step index and the layer order.

use std::collections::HashMap;
use std::path::Path;

use imprint_core::adapters::{AdapterParams, LowRankPair};
use imprint_core::tensor::Tensor;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FORMAT: &str = "imprint-adapter/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone_id: String,
    pub config_hash: String,
    pub step_index: usize,
}

fn f64_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Re-emits the JSON header with sorted keys so equal checkpoints are equal
/// byte strings.
fn canonical(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = |m: &str| Error::Runtime(format!("safetensors header: {m}"));
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(|| bad("truncated"))?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|e| bad(&e.to_string()))?;
    let mut text = serde_json::to_string(&value).map_err(|e| bad(&e.to_string()))?.into_bytes();
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub fn to_bytes(adapters: &AdapterParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut buffers = Vec::new();
    for p in adapters.pairs() {
        buffers.push((format!("{}.down", p.layer), p.down.shape(), f64_bytes(&p.down)));
        buffers.push((format!("{}.up", p.layer), p.up.shape(), f64_bytes(&p.up)));
    }
    let views = buffers
        .iter()
        .map(|(name, (r, c), data)| {
            TensorView::new(Dtype::F64, vec![*r, *c], data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Runtime(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<&str> = adapters.layer_ids().collect();
    let info = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("rank".to_string(), adapters.rank().to_string()),
        ("scale".to_string(), serde_json::to_string(&adapters.scale()).expect("finite f64")),
        ("backbone_id".to_string(), meta.backbone_id.clone()),
        ("config_hash".to_string(), meta.config_hash.clone()),
        ("step_index".to_string(), meta.step_index.to_string()),
        ("layers".to_string(), serde_json::to_string(&layers).expect("strings")),
    ]);
    let raw = safetensors::serialize(views, Some(info)).map_err(|e| Error::Runtime(format!("safetensors: {e}")))?;
    canonical(raw)
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(AdapterParams, CheckpointMeta)> {
    let bad = |m: String| Error::format(origin, m);
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let info = header.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
    let get = |k: &str| info.get(k).cloned().ok_or_else(|| bad(format!("metadata lacks `{k}`")));
    if get("format")? != FORMAT {
        return Err(bad(format!("not an adapter checkpoint (format {:?})", info.get("format"))));
    }
    let rank: usize = get("rank")?.parse().map_err(|e| bad(format!("rank: {e}")))?;
    let scale: f64 = serde_json::from_str(&get("scale")?).map_err(|e| bad(format!("scale: {e}")))?;
    let step_index: usize = get("step_index")?.parse().map_err(|e| bad(format!("step_index: {e}")))?;
    let layers: Vec<String> = serde_json::from_str(&get("layers")?).map_err(|e| bad(format!("layers: {e}")))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let read = |name: String| -> Result<Tensor> {
        let v = st.tensor(&name).map_err(|e| bad(format!("{name}: {e}")))?;
        if v.dtype() != Dtype::F64 || v.shape().len() != 2 {
            return Err(bad(format!("{name}: expected a 2-d f64 matrix")));
        }
        let data = v.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Tensor::from_vec(v.shape()[0], v.shape()[1], data)?)
    };
    let mut pairs = Vec::with_capacity(layers.len());
    for layer in layers {
        let down = read(format!("{layer}.down"))?;
        let up = read(format!("{layer}.up"))?;
        pairs.push(LowRankPair { layer, down, up });
    }
    if st.len() != 2 * pairs.len() {
        return Err(bad("tensors not listed in the layer order".into()));
    }
    let params = AdapterParams::from_pairs(rank, scale, pairs)?;
    let meta = CheckpointMeta { backbone_id: get("backbone_id")?, config_hash: get("config_hash")?, step_index };
    Ok((params, meta))
}

pub fn save(adapters: &AdapterParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    crate::io::write_bytes(path, &to_bytes(adapters, meta)?)
}

pub fn load(path: &Path) -> Result<(AdapterParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
