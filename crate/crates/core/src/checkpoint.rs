//! Self-describing binary checkpoints.
//!
//! Layout: magic `BLRM`, format version, a JSON model-config header, then
//! named parameter blobs (name, shape, little-endian f64 data) in visitor
//! order. No timestamps or environment data — saving the same weights
//! twice produces byte-identical files, and load→save round-trips exactly.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderWeights, ModelConfig};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"BLRM";
const VERSION: u32 = 1;

pub fn save(weights: &EncoderWeights, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&weights.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;

    let mut count = 0u64;
    weights.visit(&mut |_, _| count += 1);
    out.write_all(&count.to_le_bytes())?;

    let mut failure: Option<std::io::Error> = None;
    weights.visit(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let mut write = || -> std::io::Result<()> {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    out.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<EncoderWeights> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let config: ModelConfig = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("config header: {e}")))?;
    config.validate()?;

    let count = read_u64(&mut r)?;
    let mut blobs: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndims = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(data, shape)
            .map_err(|_| Error::Checkpoint(format!("bad shape for '{name}'")))?;
        blobs.push((name, t));
    }

    // materialize a skeleton with the right bank sizes, then fill by name
    let mut weights = EncoderWeights::init(config, 0)?;
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    weights.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some((blob_name, blob)) = blobs.get(idx) else {
            failure = Some(Error::Checkpoint(format!("missing parameter '{name}'")));
            return;
        };
        if blob_name != name {
            failure = Some(Error::Checkpoint(format!(
                "parameter order mismatch: expected '{name}', found '{blob_name}'"
            )));
            return;
        }
        if blob.shape() != t.shape() {
            failure = Some(Error::Checkpoint(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                blob.shape(),
                t.shape()
            )));
            return;
        }
        *t = blob.clone();
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != blobs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} extra parameter blobs",
            blobs.len() - idx
        )));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Frontend, RouterKind};
    use crate::model::MoeModule;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            num_shared: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 12,
            languages: vec!["zh".into(), "en".into()],
            moe_modules: [MoeModule::V, MoeModule::F].into_iter().collect(),
            router: RouterKind::Tdnn { channels: 6 },
            vocab_size: 5,
            feature_dim: 4,
            frontend: Frontend::Linear,
        }
    }

    #[test]
    fn save_load_save_is_bit_exact() {
        let w = EncoderWeights::init(cfg(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.blrm");
        let p2 = dir.path().join("b.blrm");
        save(&w, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded.config, w.config);
        // values survive exactly
        let mut same = true;
        w.visit(&mut |name, t| {
            loaded.visit(&mut |n2, t2| {
                if n2 == name && t.data() != t2.data() {
                    same = false;
                }
            });
        });
        assert!(same);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load(&p).is_err());
    }
}
