//! PEFT-only and base checkpoints in a small self-describing container.
//!
//! Byte layout (all integers little-endian):
//!
//! | field            | encoding                                   |
//! |------------------|--------------------------------------------|
//! | magic            | `b"PFR1"`                                  |
//! | header length    | u32                                        |
//! | header           | UTF-8 `key=value` lines                    |
//! | tensor count     | u32                                        |
//! | per tensor       | u32 name length, UTF-8 name, u32 rank,     |
//! |                  | rank × u64 extents, numel × f64 values     |
//! | checksum         | u32 CRC-32 of every preceding byte         |
//!
//! Header keys: `technique`, `variant`, `descriptor`, `base_fingerprint`
//! (16 hex digits), `base_config` and `hyperparams`. Base checkpoints use
//! technique `BASE`; the descriptor and hyperparameters are empty.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use crate::model::{BaseConfig, BaseModel, ModelError};
use crate::peft::{build_variant, ComposedModel, PeftError, PeftHyperparams, PeftModule};
use crate::tensor::Tensor;
use crate::typology::{registry_lookup, PeftDescriptor, Technique, TypologyError};

pub const MAGIC: &[u8; 4] = b"PFR1";
pub const BASE_TECHNIQUE: &str = "BASE";
/// Technique name of the full-copy control checkpoint.
pub const FULL_COPY_TECHNIQUE: &str = "FULL-COPY";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint built for base `{checkpoint}` cannot attach to base `{base}`")]
    Compatibility { checkpoint: String, base: String },
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Typology(#[from] TypologyError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub technique: String,
    pub variant: String,
    /// Descriptor record text; empty for base checkpoints.
    pub descriptor: String,
    pub base_fingerprint: u64,
    pub base_config: String,
    pub hyperparams: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    fn header_text(&self) -> String {
        format!(
            "technique={}\nvariant={}\ndescriptor={}\nbase_fingerprint={:016x}\nbase_config={}\nhyperparams={}\n",
            self.technique, self.variant, self.descriptor, self.base_fingerprint, self.base_config, self.hyperparams
        )
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        let tensors: usize = self
            .tensors
            .iter()
            .map(|(name, t)| 4 + name.len() + 4 + 8 * t.rank() + 8 * t.numel())
            .sum();
        MAGIC.len() + 4 + self.header_text().len() + 4 + tensors + 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = self.header_text();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
            return Err(StoreError::Format("missing PFR1 magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(StoreError::Integrity(format!(
                "checksum {stored:08x} does not match contents {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let header_len = r.u32()? as usize;
        let header =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| StoreError::Format("header is not UTF-8".into()))?;
        let mut fields = std::collections::BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StoreError::Format(format!("bad header line `{line}`")))?;
            fields.insert(k, v);
        }
        let field = |k: &str| {
            fields
                .get(k)
                .map(|v| v.to_string())
                .ok_or_else(|| StoreError::Format(format!("header lacks `{k}`")))
        };
        let fp = field("base_fingerprint")?;
        let base_fingerprint =
            u64::from_str_radix(&fp, 16).map_err(|_| StoreError::Format(format!("bad fingerprint `{fp}`")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| StoreError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| StoreError::Format(format!("tensor `{name}` extents {shape:?} exceed file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| StoreError::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(StoreError::Format(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        Ok(Self {
            technique: field("technique")?,
            variant: field("variant")?,
            descriptor: field("descriptor")?,
            base_fingerprint,
            base_config: field("base_config")?,
            hyperparams: field("hyperparams")?,
            tensors,
        })
    }

    /// Rebuilds the PEFT module this checkpoint holds, for `base`.
    pub fn into_module(self, base: &BaseConfig) -> Result<Box<dyn PeftModule>, StoreError> {
        if self.technique == BASE_TECHNIQUE || self.technique == FULL_COPY_TECHNIQUE {
            return Err(StoreError::Format(format!(
                "`{}` checkpoint holds no PEFT module",
                self.technique
            )));
        }
        if self.base_fingerprint != base.fingerprint() {
            return Err(StoreError::Compatibility {
                checkpoint: self.base_config,
                base: base.canonical_text(),
            });
        }
        let technique: Technique = registry_lookup(&self.technique)?.technique.parse()?;
        let hp = PeftHyperparams::parse_canonical(&self.hyperparams)?;
        let mut module = build_variant(technique, &self.variant, &hp, base)?;
        let expected: Vec<&str> = module.params().iter().map(|p| p.name.as_str()).collect();
        let found: Vec<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        if expected != found {
            return Err(StoreError::Format(format!(
                "tensor set {found:?} does not match the module's {expected:?}"
            )));
        }
        for (name, t) in &self.tensors {
            module.params_mut().assign(name, t)?;
        }
        Ok(module)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if n > self.remaining() {
            return Err(StoreError::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn peft_checkpoint(module: &dyn PeftModule) -> Checkpoint {
    let base = module.base_config();
    let descriptor: PeftDescriptor = module.descriptor();
    Checkpoint {
        technique: descriptor.technique.clone(),
        variant: module.variant().to_string(),
        descriptor: descriptor.to_record(),
        base_fingerprint: base.fingerprint(),
        base_config: base.canonical_text(),
        hyperparams: module.hyperparams().canonical_text(),
        tensors: module
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.detached()))
            .collect(),
    }
}

fn base_like(model: &BaseModel, technique: &str) -> Checkpoint {
    let cfg = model.config();
    Checkpoint {
        technique: technique.to_string(),
        variant: "full".into(),
        descriptor: String::new(),
        base_fingerprint: cfg.fingerprint(),
        base_config: cfg.canonical_text(),
        hyperparams: String::new(),
        tensors: model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.detached()))
            .collect(),
    }
}

pub fn base_checkpoint(model: &BaseModel) -> Checkpoint {
    base_like(model, BASE_TECHNIQUE)
}

/// Control: a finetuned model saved as a complete copy of every weight.
pub fn full_copy_checkpoint(model: &BaseModel) -> Checkpoint {
    base_like(model, FULL_COPY_TECHNIQUE)
}

/// Writes `bytes` via a temporary file in the target directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Checkpoint, StoreError> {
    Checkpoint::decode(&fs::read(path).map_err(io_err(path))?)
}

/// Saves the module's trainable tensors; returns the bytes written.
pub fn save_peft(module: &dyn PeftModule, path: &Path) -> Result<u64, StoreError> {
    let bytes = peft_checkpoint(module).encode();
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_peft(path: &Path) -> Result<Checkpoint, StoreError> {
    let ck = read(path)?;
    if ck.technique == BASE_TECHNIQUE {
        return Err(StoreError::Format(format!("{} is a base checkpoint", path.display())));
    }
    Ok(ck)
}

/// Loads a PEFT checkpoint and attaches it to `base`.
pub fn load_and_attach(base: Arc<BaseModel>, path: &Path) -> Result<ComposedModel, StoreError> {
    let module = load_peft(path)?.into_module(base.config())?;
    let mut composed = ComposedModel::new(base);
    composed.attach(module)?;
    Ok(composed)
}

pub fn save_base(model: &BaseModel, path: &Path) -> Result<u64, StoreError> {
    let bytes = base_checkpoint(model).encode();
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_base(path: &Path) -> Result<BaseModel, StoreError> {
    let ck = read(path)?;
    if ck.technique != BASE_TECHNIQUE {
        return Err(StoreError::Format(format!(
            "{} holds a `{}` checkpoint, not a base",
            path.display(),
            ck.technique
        )));
    }
    let cfg = BaseConfig::parse_canonical(&ck.base_config)?;
    if cfg.fingerprint() != ck.base_fingerprint {
        return Err(StoreError::Integrity(
            "base fingerprint does not match its config".into(),
        ));
    }
    Ok(BaseModel::from_named(cfg, ck.tensors)?)
}
