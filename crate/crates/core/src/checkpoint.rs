//! Flat binary checkpoints for both model families.
//!
//! Byte layout (all integers little-endian, all values 64-bit floats):
//!
//! ```text
//! offset  size        field
//! 0       8           magic b"MELTCKPT"
//! 8       4           format version, u32 (currently 1)
//! 12      1           model kind, u8: 0 per-loop baseline, 1 shared-cache
//! 13      1           gate variant, u8: 0 gated, 1 mean, 2 ema, 3 last,
//!                     4 single_gated, 5 fixed_gate (kind 1 only, else 0)
//! 14      2           reserved, zero
//! 16      24          model config, six u32: n_layers, hidden_dim,
//!                     n_heads, loops, vocab_size, max_seq_len
//! 40      8           variant scalar, f64 (ema decay / fixed gate value)
//! 48      4           directory entry count, u32
//! 52      ...         directory entries, each:
//!                       name_len u32, name bytes (UTF-8),
//!                       n_dims u32, dims u32 * n_dims,
//!                       offset u64 (elements, into the data section),
//!                       len u64 (element count)
//! ...     ...         data section: all parameter values, f64
//! ```
//!
//! Gate parameters carry the `gate.` name prefix and only appear for the
//! shared-cache kind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loop_lm::{LoopLmModel, StackParams};
use crate::melt::{GateParams, GateVariant, MeltModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MELTCKPT";
const VERSION: u32 = 1;

pub enum LoadedModel {
    LoopLm(LoopLmModel),
    Melt(MeltModel),
}

impl LoadedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LoadedModel::LoopLm(_) => "loop_lm",
            LoadedModel::Melt(_) => "melt",
        }
    }
}

fn variant_code(v: GateVariant) -> (u8, f64) {
    match v {
        GateVariant::Gated => (0, 0.0),
        GateVariant::Mean => (1, 0.0),
        GateVariant::Ema { decay } => (2, decay),
        GateVariant::Last => (3, 0.0),
        GateVariant::SingleGated => (4, 0.0),
        GateVariant::FixedGate { value } => (5, value),
    }
}

fn variant_from_code(code: u8, scalar: f64) -> Result<GateVariant> {
    Ok(match code {
        0 => GateVariant::Gated,
        1 => GateVariant::Mean,
        2 => GateVariant::Ema { decay: scalar },
        3 => GateVariant::Last,
        4 => GateVariant::SingleGated,
        5 => GateVariant::FixedGate { value: scalar },
        other => return Err(Error::Checkpoint(format!("unknown variant code {other}"))),
    })
}

fn encode(
    kind: u8,
    variant: u8,
    variant_scalar: f64,
    config: &ModelConfig,
    params: &[(String, Tensor)],
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind);
    buf.push(variant);
    buf.extend_from_slice(&[0u8; 2]);
    for v in [
        config.n_layers,
        config.hidden_dim,
        config.n_heads,
        config.loops,
        config.vocab_size,
        config.max_seq_len,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&variant_scalar.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        offset += t.numel() as u64;
    }
    for (_, t) in params {
        for v in t.to_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn save_loop_lm(path: &Path, model: &LoopLmModel) -> Result<()> {
    let bytes = encode(0, 0, 0.0, &model.config, &model.params.named_params());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_melt(path: &Path, model: &MeltModel) -> Result<()> {
    let (vc, vs) = variant_code(model.variant);
    let bytes = encode(1, vc, vs, &model.config, &model.named_params());
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint as a frozen model: plain tensors, no tape, no
/// gradients. Clone parameters onto a tape to continue training.
pub fn load(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a model checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let kind = r.u8()?;
    let variant_byte = r.u8()?;
    r.take(2)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        hidden_dim: dims[1],
        n_heads: dims[2],
        loops: dims[3],
        vocab_size: dims[4],
        max_seq_len: dims[5],
    };
    config.validate()?;
    let variant_scalar = r.f64()?;
    let n_entries = r.u32()? as usize;
    struct Entry {
        shape: Vec<usize>,
        offset: u64,
        len: u64,
    }
    let mut directory: BTreeMap<String, Entry> = BTreeMap::new();
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
        let n_dims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()?;
        let len = r.u64()?;
        directory.insert(name, Entry { shape, offset, len });
    }
    let data_start = r.pos;
    let mut fetch = |name: &str| -> Result<Tensor> {
        let e = directory
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
        let start = data_start + (e.offset as usize) * 8;
        let end = start + (e.len as usize) * 8;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("parameter {name:?} out of bounds")));
        }
        let values: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = e.shape.iter().product();
        if expected != values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?}: shape {:?} disagrees with length {}",
                e.shape,
                values.len()
            )));
        }
        Ok(Tensor::from_vec(e.shape.clone(), values))
    };
    let stack = StackParams::from_named(config.n_layers, &mut fetch)?;
    match kind {
        0 => Ok(LoadedModel::LoopLm(LoopLmModel::from_parts(config, stack))),
        1 => {
            let variant = variant_from_code(variant_byte, variant_scalar)?;
            let mut gates = Vec::with_capacity(config.n_layers);
            for l in 0..config.n_layers {
                gates.push(GateParams {
                    w_z: fetch(&format!("gate.layer{l}.w_z"))?,
                    u_z: fetch(&format!("gate.layer{l}.u_z"))?,
                    b_z: fetch(&format!("gate.layer{l}.b_z"))?,
                });
            }
            Ok(LoadedModel::Melt(
                MeltModel::from_parts(config, stack, gates).with_variant(variant),
            ))
        }
        other => Err(Error::Checkpoint(format!("unknown model kind {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn loop_lm_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("melt-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("loop.ckpt");
        let tape = Tape::new();
        let cfg = ModelConfig::desk();
        let model = LoopLmModel::new(cfg.clone(), 17, &tape).unwrap();
        save_loop_lm(&path, &model).unwrap();
        let loaded = match load(&path).unwrap() {
            LoadedModel::LoopLm(m) => m,
            _ => panic!("wrong kind"),
        };
        assert_eq!(loaded.config, cfg);
        for ((na, a), (nb, b)) in model
            .params
            .named_params()
            .iter()
            .zip(loaded.params.named_params().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(a.to_vec(), b.to_vec());
            assert!(!b.requires_grad());
        }
    }

    #[test]
    fn melt_round_trip_keeps_gates_and_variant() {
        let dir = std::env::temp_dir().join("melt-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("melt.ckpt");
        let tape = Tape::new();
        let model = MeltModel::new(ModelConfig::desk(), 23, &tape)
            .unwrap()
            .with_variant(GateVariant::Ema { decay: 0.2 });
        save_melt(&path, &model).unwrap();
        let loaded = match load(&path).unwrap() {
            LoadedModel::Melt(m) => m,
            _ => panic!("wrong kind"),
        };
        assert_eq!(loaded.variant, GateVariant::Ema { decay: 0.2 });
        assert_eq!(
            model.gates[0].b_z.to_vec(),
            loaded.gates[0].b_z.to_vec()
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("melt-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bogus.ckpt");
        fs::write(&path, b"NOTMAGIC whatever").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
