//! Self-describing checkpoint file: magic and version, a JSON header with
//! the model config, vocabulary digest and tensor specs, then raw
//! little-endian f64 tensor data in storage order. Loading verifies the
//! magic, version, vocabulary digest and every tensor shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PATHLMCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_digest: String,
    tensors: Vec<TensorSpec>,
}

pub fn save(model: &Model, vocab_digest: &str, path: &Path) -> Result<()> {
    let views = model.p.views();
    let header = Header {
        config: model.cfg.clone(),
        vocab_digest: vocab_digest.to_string(),
        tensors: views
            .iter()
            .map(|(name, _, v)| TensorSpec {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, v) in &views {
        for &x in v.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, expected_vocab_digest: &str) -> Result<Model> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::MissingArtifact {
        path: path.display().to_string(),
        hint: format!("no readable checkpoint ({e}); run `train` first"),
    })?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4, "version")?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut buf8 = [0u8; 8];
    read_exact(&mut r, &mut buf8, "header length")?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.vocab_digest != expected_vocab_digest {
        return Err(Error::VocabularyMismatch {
            expected: expected_vocab_digest.to_string(),
            found: header.vocab_digest,
        });
    }
    header.config.validate()?;

    let mut model = Model {
        cfg: header.config.clone(),
        p: Params::zeros(&header.config),
    };
    let mut views = model.p.views_mut();
    if views.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: file has {}, model needs {}",
            header.tensors.len(),
            views.len()
        )));
    }
    for (spec, (name, _, view)) in header.tensors.iter().zip(views.iter_mut()) {
        if &spec.name != name || spec.shape != view.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{}` {:?}",
                spec.name,
                spec.shape,
                name,
                view.shape()
            )));
        }
        let slice = view.as_slice_mut().expect("standard layout");
        let mut bytes = vec![0u8; slice.len() * 8];
        read_exact(&mut r, &mut bytes, name)?;
        for (i, x) in slice.iter_mut().enumerate() {
            *x = f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))
}
