//! Binary checkpoints: magic, schema version, JSON config and vocabulary,
//! free-form training metadata,
//! then every parameter tensor as little-endian f32 in registration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig, ModelError};
use crate::autograd::{cst, Real};
use crate::corpus::Vocab;

const MAGIC: &[u8; 8] = b"BPTMODEL";
pub const SCHEMA_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_blob(r: &mut impl Read) -> Result<Vec<u8>, ModelError> {
    let n = read_u64(r)? as usize;
    if n > 1 << 32 {
        return Err(bad("implausible field length"));
    }
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

impl<F: Real> Model<F> {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&SCHEMA_VERSION.to_le_bytes())?;
        write_blob(w, serde_json::to_string(&self.cfg).map_err(|e| bad(e.to_string()))?.as_bytes())?;
        write_blob(w, serde_json::to_string(self.vocab.tokens()).map_err(|e| bad(e.to_string()))?.as_bytes())?;
        write_blob(w, self.vocab.hash().as_bytes())?;
        write_blob(w, self.meta.as_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            write_blob(w, name.as_bytes())?;
            w.write_all(&(t.nrows() as u64).to_le_bytes())?;
            w.write_all(&(t.ncols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            for x in t.iter() {
                buf.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != SCHEMA_VERSION {
            return Err(bad(format!("schema version {version}, expected {SCHEMA_VERSION}")));
        }
        let cfg: ModelConfig = serde_json::from_slice(&read_blob(r)?).map_err(|e| bad(e.to_string()))?;
        let tokens: Vec<String> = serde_json::from_slice(&read_blob(r)?).map_err(|e| bad(e.to_string()))?;
        let vocab = Vocab::from_tokens(tokens);
        let hash = String::from_utf8(read_blob(r)?).map_err(|e| bad(e.to_string()))?;
        if hash != vocab.hash() {
            return Err(bad("vocabulary hash mismatch"));
        }
        let meta = String::from_utf8(read_blob(r)?).map_err(|e| bad(e.to_string()))?;
        let mut model = Model::<F>::new(cfg, vocab, 0)?;
        model.meta = meta;
        let count = read_u64(r)? as usize;
        if count != model.params.len() {
            return Err(bad(format!("{count} tensors, architecture has {}", model.params.len())));
        }
        for id in 0..count {
            let name = String::from_utf8(read_blob(r)?).map_err(|e| bad(e.to_string()))?;
            if name != model.params.name(id) {
                return Err(bad(format!("tensor {id} is {name}, expected {}", model.params.name(id))));
            }
            let (rows, cols) = (read_u64(r)? as usize, read_u64(r)? as usize);
            let target = model.params.get_mut(id);
            if target.dim() != (rows, cols) {
                return Err(bad(format!("{name} has shape {rows}x{cols}, expected {:?}", target.dim())));
            }
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)?;
            let vals = buf.chunks_exact(4).map(|c| cst::<F>(f32::from_le_bytes(c.try_into().unwrap()) as f64));
            *target = Array2::from_shape_vec((rows, cols), vals.collect()).unwrap();
        }
        if !model.params.all_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}
