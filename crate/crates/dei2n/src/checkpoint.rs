//! Versioned binary checkpoints: a JSON header carrying the model
//! configuration followed by named parameter tensors as little-endian f64,
//! so a round trip restores every bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::Hyper;
use crate::model::{AblationConfig, ModelParams};
use crate::params::ParamSet;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DEIN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    hyper: Hyper,
    ablation: AblationConfig,
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| truncated())?;
    Ok(u64::from_le_bytes(buf))
}

fn truncated() -> Error {
    Error::Checkpoint("file ends before the declared contents".into())
}

/// Writes the model configuration and every parameter tensor to `path`.
pub fn save_checkpoint(path: &Path, model: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&CheckpointMeta {
        hyper: model.hyper.clone(),
        ablation: model.ablation,
    })?;
    write_u64(&mut w, meta.len() as u64)?;
    w.write_all(&meta)?;
    write_u64(&mut w, model.set.tensors().len() as u64)?;
    for t in model.set.tensors() {
        write_u64(&mut w, t.name.len() as u64)?;
        w.write_all(t.name.as_bytes())?;
        write_u64(&mut w, t.shape.len() as u64)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        write_u64(&mut w, t.data.len() as u64)?;
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a model, verifying the format and that the
/// stored tensors match what the stored configuration would register.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}; not a model checkpoint",
            magic
        )));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver).map_err(|_| truncated())?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}; this build reads version {VERSION}"
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(|_| truncated())?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    meta.hyper.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    meta.ablation.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;

    let n_tensors = read_u64(&mut r)? as usize;
    let mut set = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|_| truncated())?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let declared = read_u64(&mut r)? as usize;
        if declared != numel {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: {declared} values declared for shape {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| truncated())?;
            data.push(f64::from_le_bytes(buf));
        }
        set.push(name, shape, data);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the declared contents".into()));
    }

    // The stored tensor list must be exactly what this configuration
    // registers, in the same order.
    let reference = ModelParams::init(meta.hyper.clone(), meta.ablation, 0)?;
    let expect: Vec<(&str, &[usize])> =
        reference.set.tensors().iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
    let got: Vec<(&str, &[usize])> =
        set.tensors().iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
    if expect != got {
        return Err(Error::Checkpoint(
            "stored tensors do not match the stored configuration".into(),
        ));
    }
    Ok(ModelParams { hyper: meta.hyper, ablation: meta.ablation, set })
}

// ── tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 3).unwrap();
        // Worst-case payload values must survive exactly.
        m.set.tensors_mut()[0].data[0] = f64::MIN_POSITIVE;
        m.set.tensors_mut()[0].data[1] = -0.0;
        m.set.tensors_mut()[1].data[0] = 1.0 + f64::EPSILON;
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.hyper, m.hyper);
        assert_eq!(back.ablation, m.ablation);
        assert_eq!(back.set.tensors().len(), m.set.tensors().len());
        for (a, b) in m.set.tensors().iter().zip(back.set.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {}", a.name);
        }
    }

    #[test]
    fn saved_files_are_byte_identical_for_equal_models() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelParams::init(Hyper::tiny(), Variant::NoTim.config(), 5).unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&p1, &m).unwrap();
        save_checkpoint(&p2, &m).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn ablation_config_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        for v in Variant::ALL {
            let m = ModelParams::init(Hyper::tiny(), v.config(), 1).unwrap();
            save_checkpoint(&path, &m).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.ablation, v.config(), "{v}");
            assert_eq!(back.set.total_len(), m.set.total_len(), "{v}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 3).unwrap();
        save_checkpoint(&path, &m).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ckpt");
        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad_magic), Err(Error::Checkpoint(_))));

        let bad_version = dir.path().join("bad_version.ckpt");
        let mut bytes = good.clone();
        bytes[4] = 99;
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad_version), Err(Error::Checkpoint(_))));

        let short = dir.path().join("short.ckpt");
        std::fs::write(&short, &good[..good.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&short), Err(Error::Checkpoint(_))));

        let long = dir.path().join("long.ckpt");
        let mut bytes = good.clone();
        bytes.push(0);
        std::fs::write(&long, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&long), Err(Error::Checkpoint(_))));
    }
}
