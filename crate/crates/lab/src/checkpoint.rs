//! Binary checkpoint container.
//!
//! Layout: magic `L2V1`, u32 version, u64 length of a UTF-8 JSON block
//! holding the model config and lineage, then records
//! `[u16 name len, name, u8 rank, u64 dims.., f32 LE data]`, a zero name
//! length, and a u32 CRC32 of every preceding byte. All integers are little
//! endian. Adapters are stored as ordinary records named `lora.<target>.A`
//! and `lora.<target>.B`.

use std::fs;
use std::io;
use std::path::Path;

use enclab_core::lora::{AdaptedModel, LoraAdapter, LoraConfig};
use enclab_core::transformer::{Encoder, Model, ModelConfig, StageRecord};
use enclab_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"L2V1";
pub const VERSION: u32 = 1;
const LORA_PREFIX: &str = "lora.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] enclab_core::Error),
}

fn corrupt(offset: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt { offset, reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub lineage: Vec<StageRecord>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Plain(Model),
    Adapted(AdaptedModel),
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        match self {
            Checkpoint::Plain(m) => CheckpointMeta { model: m.config().clone(), lineage: m.lineage.clone(), lora: None },
            Checkpoint::Adapted(a) => CheckpointMeta {
                model: a.config().clone(),
                lineage: a.base().lineage.clone(),
                lora: Some(a.lora_config().clone()),
            },
        }
    }

    pub fn encoder(&self) -> &dyn Encoder<f32> {
        match self {
            Checkpoint::Plain(m) => m,
            Checkpoint::Adapted(a) => a,
        }
    }

    pub fn lineage(&self) -> &[StageRecord] {
        match self {
            Checkpoint::Plain(m) => &m.lineage,
            Checkpoint::Adapted(a) => &a.base().lineage,
        }
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&ckpt.meta()).expect("checkpoint metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    let base = match ckpt {
        Checkpoint::Plain(m) => m,
        Checkpoint::Adapted(a) => a.base(),
    };
    for (name, t) in base.named() {
        put_record(&mut out, name, t);
    }
    if let Checkpoint::Adapted(a) = ckpt {
        for ad in a.adapters() {
            put_record(&mut out, &ad.a_name(), &ad.a);
            put_record(&mut out, &ad.b_name(), &ad.b);
        }
    }
    out.extend_from_slice(&0u16.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(c.array("metadata length")?);
    let meta_at = c.pos;
    let meta_len = usize::try_from(meta_len).map_err(|_| corrupt(8, "metadata length overflows"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(meta_len, "metadata")?).map_err(|e| corrupt(meta_at, format!("metadata: {e}")))?;

    let mut records: Vec<(String, Tensor<f32>)> = Vec::new();
    loop {
        let at = c.pos;
        let name_len = u16::from_le_bytes(c.array("name length")?) as usize;
        if name_len == 0 {
            break;
        }
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| corrupt(at + 2, "name is not UTF-8"))?
            .to_string();
        if records.iter().any(|(n, _)| *n == name) {
            return Err(corrupt(at, format!("duplicate record {name}")));
        }
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(c.array("dimension")?);
            shape.push(usize::try_from(d).map_err(|_| corrupt(c.pos - 8, "dimension overflows"))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| corrupt(at, format!("record {name} is too large")))?;
        let data_at = c.pos;
        let raw = c.take(count * 4, "tensor data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(data_at + 4 * i, format!("non-finite value in {name}")));
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    let body_end = c.pos;
    let stored = u32::from_le_bytes(c.array("checksum")?);
    if c.pos != buf.len() {
        return Err(corrupt(c.pos, "trailing bytes after checksum"));
    }
    let actual = crc32fast::hash(&buf[..body_end]);
    if stored != actual {
        return Err(corrupt(body_end, format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }

    let (lora_records, base_records): (Vec<_>, Vec<_>) = records.into_iter().partition(|(n, _)| n.starts_with(LORA_PREFIX));
    let base = Model::from_named(meta.model.clone(), base_records, meta.lineage)?;
    match meta.lora {
        None if lora_records.is_empty() => Ok(Checkpoint::Plain(base)),
        None => Err(corrupt(meta_at, "adapter records without a LoRA config")),
        Some(lora) => Ok(Checkpoint::Adapted(AdaptedModel::from_parts(base, lora, pair_adapters(lora_records)?)?)),
    }
}

fn pair_adapters(records: Vec<(String, Tensor<f32>)>) -> Result<Vec<LoraAdapter>, CheckpointError> {
    let mut a_parts = Vec::new();
    let mut b_parts = std::collections::BTreeMap::new();
    for (name, t) in records {
        let rest = &name[LORA_PREFIX.len()..];
        if let Some(target) = rest.strip_suffix(".A") {
            a_parts.push((target.to_string(), t));
        } else if let Some(target) = rest.strip_suffix(".B") {
            b_parts.insert(target.to_string(), t);
        } else {
            return Err(CheckpointError::Model(enclab_core::Error::UnknownParam(name)));
        }
    }
    let mut out = Vec::with_capacity(a_parts.len());
    for (target, a) in a_parts {
        let b = b_parts
            .remove(&target)
            .ok_or_else(|| enclab_core::Error::UnknownParam(format!("{LORA_PREFIX}{target}.B")))?;
        out.push(LoraAdapter { target, a, b });
    }
    if let Some(orphan) = b_parts.into_keys().next() {
        return Err(enclab_core::Error::UnknownParam(format!("{LORA_PREFIX}{orphan}.A")).into());
    }
    Ok(out)
}

/// Writes through a temporary sibling so a crash never leaves half a file.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(ckpt))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use enclab_core::lora::attach_lora;

    fn tiny() -> Model {
        let cfg = ModelConfig { vocab_size: 260, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_seq_len: 16, ..Default::default() };
        Model::init(cfg, 3).unwrap()
    }

    #[test]
    fn plain_round_trip() {
        let ck = Checkpoint::Plain(tiny());
        let bytes = to_bytes(&ck);
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn adapted_round_trip() {
        let lora = LoraConfig { r: 2, alpha: 4.0, targets: vec!["wq".into()] };
        let ck = Checkpoint::Adapted(attach_lora(tiny(), lora, 5).unwrap());
        let back = from_bytes(&to_bytes(&ck)).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = to_bytes(&Checkpoint::Plain(tiny()));
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            match from_bytes(&bytes[..cut]) {
                Err(CheckpointError::Corrupt { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = to_bytes(&Checkpoint::Plain(tiny()));
        let i = bytes.len() - 40;
        bytes[i] ^= 0x01;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
