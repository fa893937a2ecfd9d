//! Binary checkpoint: magic `ASMD`, a version byte, V/W/E/H as u32 LE, then
//! every parameter as an f32 LE in layout order.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::model::{ModelShape, StudentModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ASMD";
const VERSION: u8 = 1;

pub fn write_checkpoint(model: &StudentModel, mut w: impl Write) -> Result<()> {
    let shape = model.shape();
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for dim in [model.vocab().len(), shape.window, shape.embed, shape.hidden] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(model.param_count() * 4);
    for &p in model.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read, vocab: Arc<Vocabulary>) -> Result<StudentModel> {
    let mut header = [0u8; 21];
    r.read_exact(&mut header)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(header[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (v, window, embed, hidden) = (dim(0), dim(1), dim(2), dim(3));
    if v != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary size {v} does not match {}",
            vocab.len()
        )));
    }
    let shape = ModelShape {
        window,
        embed,
        hidden,
    };
    let model = StudentModel::zeros(vocab, shape);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != model.param_count() * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            model.param_count() * 4,
            bytes.len()
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    model.with_params(params)
}

pub fn save(model: &StudentModel, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocabulary>) -> Result<StudentModel> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f), vocab)
}
