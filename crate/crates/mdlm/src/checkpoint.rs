//! Binary checkpoint format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic    b"MDLM"
//! version  u32 (currently 1)
//! count    u32                      number of tensors
//! tensor*  name_len u16, name utf-8, rank u8, dims u64 x rank, f32 x prod(dims)
//! crc      u32                      CRC32 (IEEE) of all preceding bytes
//! ```
//!
//! Besides weights, a checkpoint stores small `meta.*` tensors carrying the
//! hyperparameters that shapes alone cannot recover (head counts, window
//! size, stack factor), so a model loads without a side-channel config.
//! Attached LoRA adapters are stored as `lora.<target>.{a,b}` plus
//! `lora.alpha` / `lora.dropout`.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{DecoderConfig, EncoderConfig, ModelConfig, ProjectorConfig};
use crate::decoder::DecoderParams;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::lora::{decoder_linear_maps, LoraAdapter, LoraConfig, LoraPair, LoraTarget};
use crate::model::Model;
use crate::nn::layers::{LayerNormParams, Linear};
use crate::nn::tensor::Tensor;
use crate::projector::ProjectorParams;

const MAGIC: &[u8; 4] = b"MDLM";
const VERSION: u32 = 1;

// ── Raw tensor container ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    fn scalar(name: &str, v: f32) -> RawTensor {
        RawTensor {
            name: name.to_string(),
            shape: vec![1],
            data: vec![v],
        }
    }

    fn from_tensor(name: &str, t: &Tensor<f32>) -> RawTensor {
        RawTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn encode(tensors: &[RawTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {}", t.name)));
        }
        if t.shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor rank too large: {}", t.name)));
        }
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} vs {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    if bytes.len() < 4 + 4 + 4 + 4 {
        return Err(Error::Checkpoint("file too short".to_string()));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an MDLM checkpoint)".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".to_string()));
    }
    Ok(tensors)
}

// ── Model <-> tensors ──────────────────────────────────────────────────

fn meta_tensors(m: &Model<f32>) -> Vec<RawTensor> {
    let mut out = vec![
        RawTensor::scalar("meta.encoder.n_heads", m.cfg.encoder.n_heads as f32),
        RawTensor::scalar(
            "meta.encoder.max_window_frames",
            m.cfg.encoder.max_window_frames as f32,
        ),
        RawTensor::scalar("meta.encoder.time_patch", m.cfg.encoder.time_patch as f32),
        RawTensor::scalar(
            "meta.projector.stack_factor",
            m.cfg.projector.stack_factor as f32,
        ),
        RawTensor::scalar("meta.decoder.n_heads", m.cfg.decoder.n_heads as f32),
        RawTensor::scalar("meta.decoder.max_seq", m.cfg.decoder.max_seq as f32),
    ];
    if let Some(adapter) = &m.decoder.adapter {
        out.push(RawTensor::scalar("lora.alpha", adapter.cfg.alpha as f32));
        out.push(RawTensor::scalar("lora.dropout", adapter.cfg.dropout as f32));
    }
    out
}

pub fn model_to_tensors(m: &Model<f32>) -> Vec<RawTensor> {
    let mut tensors = meta_tensors(m);
    m.visit_params(&mut |name, t| tensors.push(RawTensor::from_tensor(name, t)));
    tensors
}

pub fn save_bytes(m: &Model<f32>) -> Result<Vec<u8>> {
    encode(&model_to_tensors(m))
}

pub fn save(m: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, save_bytes(m)?)?;
    Ok(())
}

struct TensorMap {
    map: HashMap<String, RawTensor>,
}

impl TensorMap {
    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let raw = self
            .map
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Tensor::from_vec(&raw.shape, raw.data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    fn take_usize(&mut self, name: &str) -> Result<usize> {
        let t = self.take(name)?;
        if t.numel() != 1 {
            return Err(Error::Checkpoint(format!("{name} must hold one value")));
        }
        let v = t.data()[0];
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("{name} is not a whole number: {v}")));
        }
        Ok(v as usize)
    }

    fn take_f64(&mut self, name: &str) -> Result<f64> {
        let t = self.take(name)?;
        if t.numel() != 1 {
            return Err(Error::Checkpoint(format!("{name} must hold one value")));
        }
        Ok(t.data()[0] as f64)
    }

    fn shape(&self, name: &str) -> Result<&[usize]> {
        self.map
            .get(name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn take_linear(&mut self, name: &str) -> Result<Linear<f32>> {
        Ok(Linear {
            w: self.take(&format!("{name}.w"))?,
            b: self.take(&format!("{name}.b"))?,
        })
    }

    fn take_ln(&mut self, name: &str) -> Result<LayerNormParams<f32>> {
        Ok(LayerNormParams {
            gamma: self.take(&format!("{name}.gamma"))?,
            beta: self.take(&format!("{name}.beta"))?,
        })
    }

    fn take_block(
        &mut self,
        name: &str,
        n_heads: usize,
    ) -> Result<crate::nn::layers::BlockParams<f32>> {
        Ok(crate::nn::layers::BlockParams {
            ln1: self.take_ln(&format!("{name}.ln1"))?,
            attn: crate::nn::layers::AttentionParams {
                q: self.take_linear(&format!("{name}.attn.q"))?,
                k: self.take_linear(&format!("{name}.attn.k"))?,
                v: self.take_linear(&format!("{name}.attn.v"))?,
                o: self.take_linear(&format!("{name}.attn.o"))?,
                n_heads,
            },
            ln2: self.take_ln(&format!("{name}.ln2"))?,
            mlp: crate::nn::layers::MlpParams {
                fc1: self.take_linear(&format!("{name}.mlp.fc1"))?,
                fc2: self.take_linear(&format!("{name}.mlp.fc2"))?,
            },
        })
    }

    fn count_layers(&self, prefix: &str) -> usize {
        let mut n = 0;
        while self.map.contains_key(&format!("{prefix}.blocks.{n}.ln1.gamma")) {
            n += 1;
        }
        n
    }
}

pub fn model_from_tensors(tensors: Vec<RawTensor>) -> Result<Model<f32>> {
    let mut map = TensorMap {
        map: tensors.into_iter().map(|t| (t.name.clone(), t)).collect(),
    };

    // Encoder: dims come from shapes, the rest from meta.
    let enc_heads = map.take_usize("meta.encoder.n_heads")?;
    let max_window = map.take_usize("meta.encoder.max_window_frames")?;
    let time_patch = map.take_usize("meta.encoder.time_patch")?;
    let stack_factor = map.take_usize("meta.projector.stack_factor")?;
    let dec_heads = map.take_usize("meta.decoder.n_heads")?;
    let max_seq = map.take_usize("meta.decoder.max_seq")?;

    let patch_shape = map.shape("encoder.patch_embed.w")?.to_vec();
    let enc_d = *patch_shape
        .get(1)
        .ok_or_else(|| Error::Checkpoint("encoder.patch_embed.w must be rank 2".to_string()))?;
    let enc_layers = map.count_layers("encoder");
    if enc_layers == 0 {
        return Err(Error::Checkpoint("no encoder blocks found".to_string()));
    }
    let enc_ff = map.shape("encoder.blocks.0.mlp.fc1.w")?[1];
    let enc_cfg = EncoderConfig {
        d_model: enc_d,
        n_layers: enc_layers,
        n_heads: enc_heads,
        ff_dim: enc_ff,
        max_window_frames: max_window,
        time_patch,
    };

    let fc1_shape = map.shape("projector.fc1.w")?.to_vec();
    let hidden = fc1_shape[1];
    let dec_d = map.shape("projector.fc2.w")?[1];
    let proj_cfg = ProjectorConfig {
        stack_factor,
        hidden_dim: Some(hidden),
    };

    let embed_shape = map.shape("decoder.embed")?.to_vec();
    let vocab = embed_shape[0];
    let dec_layers = map.count_layers("decoder");
    if dec_layers == 0 {
        return Err(Error::Checkpoint("no decoder blocks found".to_string()));
    }
    let dec_ff = map.shape("decoder.blocks.0.mlp.fc1.w")?[1];
    let dec_cfg = DecoderConfig {
        d_model: dec_d,
        n_layers: dec_layers,
        n_heads: dec_heads,
        ff_dim: dec_ff,
        vocab,
        max_seq,
    };

    let cfg = ModelConfig {
        encoder: enc_cfg.clone(),
        projector: proj_cfg.clone(),
        decoder: dec_cfg.clone(),
    };
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let encoder = EncoderParams {
        cfg: enc_cfg,
        patch: map.take_linear("encoder.patch_embed")?,
        pos: map.take("encoder.pos_embed")?,
        blocks: (0..enc_layers)
            .map(|i| map.take_block(&format!("encoder.blocks.{i}"), enc_heads))
            .collect::<Result<_>>()?,
        ln_f: map.take_ln("encoder.ln_f")?,
    };
    let projector = ProjectorParams {
        cfg: proj_cfg,
        fc1: map.take_linear("projector.fc1")?,
        fc2: map.take_linear("projector.fc2")?,
    };
    let mut decoder = DecoderParams {
        cfg: dec_cfg.clone(),
        embed: map.take("decoder.embed")?,
        pos: map.take("decoder.pos_embed")?,
        blocks: (0..dec_layers)
            .map(|i| map.take_block(&format!("decoder.blocks.{i}"), dec_heads))
            .collect::<Result<_>>()?,
        ln_f: map.take_ln("decoder.ln_f")?,
        lm_head: map.take_linear("decoder.lm_head")?,
        adapter: None,
    };

    // Optional adapters: entries are recognized by name, in canonical order.
    if map.map.keys().any(|k| k.starts_with("lora.") && k != "lora.alpha" && k != "lora.dropout")
    {
        let alpha = map.take_f64("lora.alpha")?;
        let dropout = map.take_f64("lora.dropout")?;
        let mut entries = Vec::new();
        for (target, _, _) in decoder_linear_maps(&dec_cfg) {
            let a_name = format!("lora.{target}.a");
            if map.map.contains_key(&a_name) {
                let a = map.take(&a_name)?;
                let b = map.take(&format!("lora.{target}.b"))?;
                entries.push((target, LoraPair { a, b }));
            }
        }
        let rank = entries
            .first()
            .map(|(_, p)| p.a.shape()[0])
            .ok_or_else(|| Error::Checkpoint("adapter tensors present but unrecognized".to_string()))?;
        let all = decoder_linear_maps(&dec_cfg).len();
        let target = if entries.len() == all {
            LoraTarget::AllLinear
        } else if entries
            .iter()
            .all(|(n, _)| n.ends_with(".attn.q") || n.ends_with(".attn.v"))
            && entries.len() == 2 * dec_cfg.n_layers
        {
            LoraTarget::Qv
        } else {
            return Err(Error::Checkpoint(
                "adapter entries match neither the qv nor the all_linear target set".to_string(),
            ));
        };
        let adapter = LoraAdapter {
            cfg: LoraConfig {
                rank,
                alpha,
                dropout,
                target,
            },
            entries,
        };
        decoder.apply_lora(adapter).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }

    if let Some(stray) = map.map.keys().next() {
        return Err(Error::Checkpoint(format!("unrecognized tensor {stray}")));
    }

    Ok(Model {
        cfg,
        encoder,
        projector,
        decoder,
    })
}

pub fn load_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    model_from_tensors(decode(bytes)?)
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
    load_bytes(&bytes)
}

/// Tensor names stored in a checkpoint file, in order.
pub fn tensor_names(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
    Ok(decode(&bytes)?.into_iter().map(|t| t.name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{LoraAdapter, LoraConfig, LoraTarget};
    use crate::nn::ModelRng;

    #[test]
    fn roundtrip_is_byte_identical() {
        let m: Model<f32> = Model::init(&ModelConfig::default(), 42).unwrap();
        let bytes = save_bytes(&m).unwrap();
        let loaded = load_bytes(&bytes).unwrap();
        let again = save_bytes(&loaded).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(loaded.cfg.encoder, m.cfg.encoder);
        assert_eq!(loaded.cfg.decoder, m.cfg.decoder);
        assert_eq!(
            loaded.cfg.projector.hidden(m.cfg.decoder.d_model),
            m.cfg.projector.hidden(m.cfg.decoder.d_model)
        );
    }

    #[test]
    fn roundtrip_with_adapters() {
        let mut m: Model<f32> = Model::init(&ModelConfig::default(), 42).unwrap();
        let mut rng = ModelRng::seed_from_u64(9);
        let mut adapter =
            LoraAdapter::init(LoraConfig::new(LoraTarget::Qv), &m.cfg.decoder, &mut rng);
        for (_, pair) in adapter.entries.iter_mut() {
            pair.b = rng.normal(pair.b.shape(), 0.1);
        }
        m.decoder.apply_lora(adapter).unwrap();
        let bytes = save_bytes(&m).unwrap();
        let loaded = load_bytes(&bytes).unwrap();
        let a = loaded.decoder.adapter.as_ref().unwrap();
        assert_eq!(a.cfg.target, LoraTarget::Qv);
        assert_eq!(a.cfg.rank, 8);
        assert_eq!(a.cfg.alpha, 32.0);
        assert_eq!(save_bytes(&loaded).unwrap(), bytes);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let m: Model<f32> = Model::init(&ModelConfig::default(), 1).unwrap();
        let mut bytes = save_bytes(&m).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        let err = load_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m: Model<f32> = Model::init(&ModelConfig::default(), 1).unwrap();
        let bytes = save_bytes(&m).unwrap();
        assert!(load_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(load_bytes(&bytes[..7]).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let m: Model<f32> = Model::init(&ModelConfig::default(), 1).unwrap();
        let mut bytes = save_bytes(&m).unwrap();
        bytes[0] = b'X';
        // CRC still valid for the altered payload? No: recompute to isolate
        // the magic check.
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = load_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn loaded_model_behaves_identically() {
        let m: Model<f32> = Model::init(&ModelConfig::default(), 77).unwrap();
        let loaded = load_bytes(&save_bytes(&m).unwrap()).unwrap();
        let mut rng = ModelRng::seed_from_u64(3);
        let audio = crate::projector::AudioTokens::<f32> {
            tokens: rng.normal(&[4, 64], 1.0),
        };
        let a = m.decoder.generate(&audio, &[256, 99], 6).unwrap();
        let b = loaded.decoder.generate(&audio, &[256, 99], 6).unwrap();
        assert_eq!(a, b);
    }
}
