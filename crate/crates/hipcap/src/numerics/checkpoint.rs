//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  b"HIPCAPCK"
//! version   u32      currently 1
//! mlen      u64      manifest byte length
//! manifest  mlen     UTF-8 JSON (model configuration, vocab, flags)
//! count     u64      number of parameter entries
//! entry*:
//!   nlen    u64      name byte length
//!   name    nlen     UTF-8
//!   ndim    u32      1 or 2
//!   dims    ndim*u32
//!   values  prod(dims) * f64
//! ```
//!
//! Entries appear in parameter-store insertion order and are restored in
//! that order, so save → load → save is byte-identical. Optimizer moments
//! are deliberately not persisted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{HipError, Result};
use crate::numerics::tensor::{ParamStore, Shape, Tensor};

const MAGIC: &[u8; 8] = b"HIPCAPCK";
const VERSION: u32 = 1;

/// Serializes a manifest string plus every parameter to `path`.
pub fn save_checkpoint(path: &Path, manifest: &str, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| HipError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let mbytes = manifest.as_bytes();
        w.write_all(&(mbytes.len() as u64).to_le_bytes())?;
        w.write_all(mbytes)?;
        w.write_all(&(store.len() as u64).to_le_bytes())?;
        for (name, tensor) in store.iter() {
            let nbytes = name.as_bytes();
            w.write_all(&(nbytes.len() as u64).to_le_bytes())?;
            w.write_all(nbytes)?;
            let dims = tensor.shape().dims();
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in &dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in tensor.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    run(&mut w).map_err(|e| HipError::io(path, e))
}

/// Reads a checkpoint back as `(manifest, store)`.
pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
    let file = File::open(path).map_err(|e| HipError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(HipError::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(HipError::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let mlen = read_u64(&mut r, path)? as usize;
    let mut mbytes = vec![0u8; mlen];
    read_exact(&mut r, &mut mbytes, path)?;
    let manifest = String::from_utf8(mbytes)
        .map_err(|e| HipError::Checkpoint(format!("{}: manifest is not UTF-8: {e}", path.display())))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = read_u64(&mut r, path)? as usize;
        let mut nbytes = vec![0u8; nlen];
        read_exact(&mut r, &mut nbytes, path)?;
        let name = String::from_utf8(nbytes)
            .map_err(|e| HipError::Checkpoint(format!("{}: entry name is not UTF-8: {e}", path.display())))?;
        let ndim = read_u32(&mut r, path)? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(HipError::Checkpoint(format!(
                "{}: entry `{name}` has unsupported rank {ndim}",
                path.display()
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r, path)? as usize);
        }
        let shape = Shape::from_dims(&dims)?;
        let mut values = vec![0.0f64; shape.len()];
        let mut buf = [0u8; 8];
        for v in &mut values {
            read_exact(&mut r, &mut buf, path)?;
            *v = f64::from_le_bytes(buf);
        }
        store.insert(&name, Tensor::from_values(shape, values)?)?;
    }
    // anything left over means a truncated write elsewhere or wrong file
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => {
            return Err(HipError::Checkpoint(format!(
                "{}: trailing bytes after {} entries",
                path.display(),
                count
            )))
        }
        Err(e) => return Err(HipError::io(path, e)),
    }
    Ok((manifest, store))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            HipError::Checkpoint(format!("{}: truncated file", path.display()))
        } else {
            HipError::io(path, e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(2, 2, vec![1.5, -2.25, 1e-300, f64::MAX]).unwrap())
            .unwrap();
        store.insert("b", Tensor::vector(vec![0.0, -0.0, 3.125])).unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save_checkpoint(&path, "{\"kind\":\"test\"}", &store).unwrap();
        let (manifest, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest, "{\"kind\":\"test\"}");
        assert_eq!(loaded.len(), store.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.values().iter().zip(t2.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // saving the loaded store reproduces the file byte for byte
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &manifest, &loaded).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "{}", &sample_store()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_checkpoint(Path::new("/nonexistent/nope.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/nope.ckpt"));
    }
}
