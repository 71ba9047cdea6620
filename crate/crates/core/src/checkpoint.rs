//! Binary parameter checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  b"PNCKPT01"            8 bytes
//! n_entries                     u32
//! entry: name_len u32, name utf-8, n_dims u32, dims [u32], values [f64]
//! ```
//!
//! Entries are the named tensors of [`ModelParams::tensors`], written in
//! their stable order; the loader validates every name and shape against the
//! model built from the target configuration, so a checkpoint cannot be
//! loaded under a mismatching config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{ModelParams, PipelineConfig};

const MAGIC: &[u8; 8] = b"PNCKPT01";

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors = params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, values) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_u32(path: &Path, r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::malformed(path, "truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

/// Load a checkpoint into the parameter shapes implied by `config`.
pub fn load_params(path: &Path, config: &PipelineConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::malformed(path, "truncated magic"))?;
    if &magic != MAGIC {
        return Err(Error::malformed(path, "bad magic / unsupported version"));
    }
    let n_entries = read_u32(path, &mut r)? as usize;
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_entries {
        let name_len = read_u32(path, &mut r)? as usize;
        if r.len() < name_len {
            return Err(Error::malformed(path, "truncated name"));
        }
        let name = String::from_utf8(r[..name_len].to_vec())
            .map_err(|_| Error::malformed(path, "name not utf-8"))?;
        r = &r[name_len..];
        let n_dims = read_u32(path, &mut r)? as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(read_u32(path, &mut r)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::malformed(path, "truncated tensor data"))?;
            values.push(f64::from_le_bytes(b));
        }
        if entries.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::malformed(path, format!("duplicate tensor {name}")));
        }
    }
    if !r.is_empty() {
        return Err(Error::malformed(path, "trailing bytes"));
    }

    // Rebuild against the expected layout.
    let mut params = ModelParams::init(config, 0)?;
    let expected = params.tensors();
    if expected.len() != entries.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} tensors, config expects {}",
            entries.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::new();
    for (name, dims, _) in &expected {
        let (got_dims, values) = entries.get(name).ok_or_else(|| {
            Error::ShapeMismatch(format!("checkpoint is missing tensor {name}"))
        })?;
        if got_dims != dims {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: checkpoint has {got_dims:?}, config expects {dims:?}"
            )));
        }
        flat.extend_from_slice(values);
    }
    params.unflatten(&flat)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{ModelDims, Variant};

    #[test]
    fn round_trip_is_bit_exact() {
        let config = PipelineConfig::for_variant(Variant::Pic04, ModelDims::tiny());
        let params = ModelParams::init(&config, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path, &config).unwrap();
        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let config = PipelineConfig::for_variant(Variant::Pic04, ModelDims::tiny());
        let params = ModelParams::init(&config, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&params, &path).unwrap();

        // Different variant: different tensor set.
        let other = PipelineConfig::for_variant(Variant::Pic01, ModelDims::tiny());
        assert!(matches!(
            load_params(&path, &other),
            Err(Error::ShapeMismatch(_))
        ));

        // Same variant, different dims: shape mismatch.
        let mut dims = ModelDims::tiny();
        dims.clusters = 3;
        let bigger = PipelineConfig::for_variant(Variant::Pic04, dims);
        assert!(matches!(
            load_params(&path, &bigger),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let config = PipelineConfig::for_variant(Variant::Pic02, ModelDims::tiny());
        let params = ModelParams::init(&config, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&params, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_params(&path, &config),
            Err(Error::Malformed { .. })
        ));
    }
}
