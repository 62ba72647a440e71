//! Binary model checkpoints.
//!
//! Layout (all integers little-endian): an 8-byte magic, the configuration,
//! the hash of the vocabulary the model was trained with, then every tensor
//! as a length-prefixed run of f32 values, in the fixed enumeration order of
//! [`ModelParams::flat_tensors_mut`]. The vocabulary hash lets a loader
//! reject a checkpoint paired with the wrong token inventory before any
//! embedding row is misread.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::{ConfigError, ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"KGRMODL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("tensor {index} holds {got} values, expected {expected}")]
    TensorSize {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("tensor count {got} does not match the configuration's {expected}")]
    TensorCount { expected: usize, got: usize },
    #[error("checkpoint was written for a different vocabulary (hash {got:#018x}, expected {expected:#018x})")]
    VocabMismatch { expected: u64, got: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Write `params` plus the owning vocabulary's content hash.
pub fn save_checkpoint(
    params: &ModelParams<f32>,
    vocab_hash: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let err = io_err(path);
    w.write_all(MAGIC).map_err(&err)?;
    let c = &params.config;
    for v in [
        c.dim,
        c.blocks,
        c.heads,
        c.max_len,
        c.maxout_pieces,
        c.vocab_size,
    ] {
        write_u64(&mut w, v as u64).map_err(&err)?;
    }
    write_u64(
        &mut w,
        c.classify_entities.map(|n| n as u64 + 1).unwrap_or(0),
    )
    .map_err(&err)?;
    write_u64(&mut w, vocab_hash).map_err(&err)?;

    let mut p = params.clone();
    let tensors = p.flat_tensors_mut();
    write_u64(&mut w, tensors.len() as u64).map_err(&err)?;
    for t in tensors {
        write_u64(&mut w, t.len() as u64).map_err(&err)?;
        for &v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)?;
    Ok(())
}

/// Read a checkpoint; returns the parameters and the stored vocabulary
/// hash. When `expected_vocab_hash` is given, a mismatch is an error.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: Option<u64>,
) -> Result<(ModelParams<f32>, u64), CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let err = io_err(path);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut fields = [0u64; 6];
    for f in fields.iter_mut() {
        *f = read_u64(&mut r).map_err(&err)?;
    }
    let classify = read_u64(&mut r).map_err(&err)?;
    let config = ModelConfig {
        dim: fields[0] as usize,
        blocks: fields[1] as usize,
        heads: fields[2] as usize,
        max_len: fields[3] as usize,
        maxout_pieces: fields[4] as usize,
        vocab_size: fields[5] as usize,
        classify_entities: (classify > 0).then(|| classify as usize - 1),
    };
    let vocab_hash = read_u64(&mut r).map_err(&err)?;
    if let Some(expected) = expected_vocab_hash {
        if expected != vocab_hash {
            return Err(CheckpointError::VocabMismatch {
                expected,
                got: vocab_hash,
            });
        }
    }

    let mut params = ModelParams::<f32>::zeros(&config)?;
    let tensors = params.flat_tensors_mut();
    let count = read_u64(&mut r).map_err(&err)? as usize;
    if count != tensors.len() {
        return Err(CheckpointError::TensorCount {
            expected: tensors.len(),
            got: count,
        });
    }
    for (index, t) in tensors.into_iter().enumerate() {
        let len = read_u64(&mut r).map_err(&err)? as usize;
        if len != t.len() {
            return Err(CheckpointError::TensorSize {
                index,
                expected: t.len(),
                got: len,
            });
        }
        let mut buf = [0u8; 4];
        for v in t.iter_mut() {
            r.read_exact(&mut buf).map_err(&err)?;
            *v = f32::from_le_bytes(buf);
        }
    }
    Ok((params, vocab_hash))
}
