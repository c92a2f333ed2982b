//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `AVSRCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian values of every listed tensor in header order. The
//! header holds the full [`ModelConfig`], the element type and, per tensor,
//! its name, shape and whether it is trainable.
//!
//! Frozen weights are a pure function of the config seed, so a
//! trainable-only checkpoint (projectors and adapters) restores the whole
//! model as well.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{AvsrModel, ModelConfig};
use crate::tensor::Float;

pub const MAGIC: &[u8; 8] = b"AVSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every parameter.
    Full,
    /// Projectors and adapters only.
    Trainable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    scope: Scope,
    tensors: Vec<Entry>,
}

pub fn to_bytes<F: Float>(model: &AvsrModel<F>, scope: Scope) -> Result<Vec<u8>> {
    if model.is_merged() {
        return Err(Error::State("unmerge adapters before saving a checkpoint".into()));
    }
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, p) in model.store.iter() {
        if scope == Scope::Trainable && !p.trainable() {
            continue;
        }
        tensors.push(Entry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable(),
        });
        for &x in p.tensor.data() {
            x.write_le(&mut payload);
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        dtype: F::NAME.to_string(),
        scope,
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<F: Float>(model: &AvsrModel<F>, path: &Path, scope: Scope) -> Result<()> {
    fs::write(path, to_bytes(model, scope)?)?;
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint format version {version} is not supported")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    Ok((header, &bytes[20 + hlen..]))
}

fn width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Format(format!("unknown element type {other}"))),
    }
}

fn read_value(dtype: &str, b: &[u8]) -> f64 {
    match dtype {
        "f32" => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
        _ => f64::from_le_bytes(b.try_into().expect("8 bytes")),
    }
}

/// Writes the tensors of `header` into `model`, converting the element type
/// if needed.
fn apply<F: Float>(model: &mut AvsrModel<F>, header: &Header, payload: &[u8], only_trainable: bool) -> Result<()> {
    let w = width(&header.dtype)?;
    let needed: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * w).sum();
    if payload.len() != needed {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header describes {needed}",
            payload.len()
        )));
    }
    let mut off = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let chunk = &payload[off..off + n * w];
        off += n * w;
        if only_trainable && !e.trainable {
            continue;
        }
        let t = model
            .store
            .get_mut(&e.name)
            .map_err(|_| Error::Format(format!("checkpoint tensor {} has no counterpart in the model", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(shape_err("checkpoint load", t.shape(), &e.shape));
        }
        for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(w)) {
            *dst = F::from_f64c(read_value(&header.dtype, src));
        }
    }
    Ok(())
}

pub fn from_bytes<F: Float>(bytes: &[u8]) -> Result<AvsrModel<F>> {
    let (header, payload) = parse(bytes)?;
    let mut model = AvsrModel::new(header.config.clone())?;
    apply(&mut model, &header, payload, false)?;
    Ok(model)
}

pub fn load<F: Float>(path: &Path) -> Result<AvsrModel<F>> {
    from_bytes(&fs::read(path)?)
}

/// Config stored in a checkpoint, without loading any tensors.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    Ok(parse(&fs::read(path)?)?.0.config)
}

/// Loads only the projectors and adapters of a checkpoint into `model`. The
/// decoder configs must agree.
pub fn load_adapters<F: Float>(model: &mut AvsrModel<F>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let (header, payload) = parse(&bytes)?;
    if header.config.decoder != model.cfg.decoder {
        return Err(Error::Config("checkpoint was trained against a different decoder".into()));
    }
    apply(model, &header, payload, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Task;
    use crate::lora::LoraConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::toy(Task::Avsr, 8, 6, 5);
        cfg.decoder.n_layers = 1;
        cfg.decoder.d_model = 16;
        cfg.decoder.n_heads = 2;
        for e in [&mut cfg.audio_encoder, &mut cfg.video_encoder] {
            e.d_model = 8;
            e.n_layers = 1;
            e.n_heads = 2;
        }
        cfg.llm_lora = LoraConfig::with_rank(2);
        cfg
    }

    fn perturbed() -> AvsrModel<f32> {
        let mut m = AvsrModel::<f32>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, p) in m.store.iter_mut() {
            if n.starts_with("lora.") || n.starts_with("proj.") {
                let fresh = Tensor::<f32>::randn(p.tensor.shape(), 0.5, &mut rng);
                p.tensor.data_mut().copy_from_slice(fresh.data());
            }
        }
        m
    }

    fn same(a: &AvsrModel<f32>, b: &AvsrModel<f32>) {
        for ((na, pa), (nb, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.tensor.data(), pb.tensor.data(), "{na}");
            assert_eq!(pa.trainable(), pb.trainable());
        }
    }

    #[test]
    fn round_trips() {
        let m = perturbed();
        for scope in [Scope::Full, Scope::Trainable] {
            let bytes = to_bytes(&m, scope).unwrap();
            same(&m, &from_bytes(&bytes).unwrap());
        }
        let full = to_bytes(&m, Scope::Full).unwrap();
        let wide: AvsrModel<f64> = from_bytes(&full).unwrap();
        assert_eq!(wide.store.get("lora.llm.block0.attn.q.A").unwrap().data()[0] as f32,
            m.store.get("lora.llm.block0.attn.q.A").unwrap().data()[0]);
    }

    #[test]
    fn adapters_transfer_independently() {
        let m = perturbed();
        let path = std::env::temp_dir().join(format!("avsr-ckpt-{}.bin", std::process::id()));
        save(&m, &path, Scope::Trainable).unwrap();
        let mut fresh = AvsrModel::<f32>::new(tiny()).unwrap();
        load_adapters(&mut fresh, &path).unwrap();
        same(&m, &fresh);
        assert_eq!(read_config(&path).unwrap(), m.cfg);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_corruption() {
        let m = perturbed();
        let mut bytes = to_bytes(&m, Scope::Trainable).unwrap();
        assert!(matches!(from_bytes::<f32>(&bytes[..10]), Err(Error::Format(_))));
        bytes.pop();
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Format(_))));
        let mut merged = perturbed();
        merged.merge_lora().unwrap();
        assert!(matches!(to_bytes(&merged, Scope::Full), Err(Error::State(_))));
    }
}
