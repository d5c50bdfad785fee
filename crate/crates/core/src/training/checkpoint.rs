//! Binary checkpoint files.
//!
//! Layout (little-endian throughout):
//!
//! | field | type |
//! |---|---|
//! | magic `TMAXCKPT` | 8 bytes |
//! | format version | `u32` |
//! | input_dim, max_seq_len, num_classes, layer count | `u32` each |
//! | per layer: cell size, projection size (0 = none) | `u32` each |
//! | parameter arrays in canonical order | `f64` each |
//! | step | `u64` |
//! | running training loss | `f64` |

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters, RecurrentSpec};

pub const MAGIC: &[u8; 8] = b"TMAXCKPT";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = c.params.config();
    let mut buf = Vec::with_capacity(64 + 8 * c.params.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, cfg.input_dim)?;
    put_u32(&mut buf, cfg.max_seq_len)?;
    put_u32(&mut buf, cfg.num_classes)?;
    put_u32(&mut buf, cfg.layers.len())?;
    for l in &cfg.layers {
        put_u32(&mut buf, l.cell_size)?;
        put_u32(&mut buf, l.projection_size.unwrap_or(0))?;
    }
    for t in c.params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(c.step as u64).to_le_bytes());
    buf.extend_from_slice(&c.train_loss.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::CorruptCheckpoint("file is truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version > VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    if version == 0 {
        return Err(Error::CorruptCheckpoint(
            "version 0 is not a valid format".into(),
        ));
    }
    let input_dim = cur.u32()? as usize;
    let max_seq_len = cur.u32()? as usize;
    let num_classes = cur.u32()? as usize;
    let num_layers = cur.u32()? as usize;
    if num_layers > 1024 {
        return Err(Error::CorruptCheckpoint(format!(
            "implausible layer count {num_layers}"
        )));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let cell = cur.u32()? as usize;
        let proj = cur.u32()? as usize;
        layers.push(RecurrentSpec::new(cell, (proj > 0).then_some(proj)));
    }
    let config = ModelConfig {
        input_dim,
        max_seq_len,
        layers,
        num_classes,
    };
    let shape = ModelParameters::zeros(&config)
        .map_err(|e| Error::CorruptCheckpoint(format!("stored model config is invalid: {e}")))?;
    let mut tensors = Vec::new();
    for t in shape.tensors() {
        let mut values = Vec::with_capacity(t.len());
        for _ in 0..t.len() {
            values.push(cur.f64()?);
        }
        tensors.push(values);
    }
    let step = cur.u64()? as usize;
    let train_loss = cur.f64()?;
    if !cur.bytes.is_empty() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} unexpected trailing bytes",
            cur.bytes.len()
        )));
    }
    let params = ModelParameters::from_tensors(&config, tensors)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        step,
        params,
        train_loss,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_checkpoint(c)?)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
