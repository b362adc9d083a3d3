//! Model checkpoint format.
//!
//! Layout: magic `"FSSL"`, version (u32 LE), layer-width count (u32 LE),
//! the widths (u32 LE each), then the flat parameter vector as f64 LE in
//! flatten order (per layer: row-major weights, then bias).

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use fedssl_core::nn::{Architecture, ModelParams};

pub const MAGIC: [u8; 4] = *b"FSSL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected \"FSSL\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("{extra} trailing bytes after the parameter vector")]
    TrailingBytes { extra: usize },
    #[error("invalid layer shape: {0}")]
    BadShape(String),
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let sizes = params.arch().sizes();
    let mut out = Vec::with_capacity(12 + sizes.len() * 4 + params.param_count() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for &v in params.as_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut offset = 0usize;
    let take = |offset: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if bytes.len() - *offset < n {
            return Err(CheckpointError::Truncated { offset: *offset });
        }
        let out = &bytes[*offset..*offset + n];
        *offset += n;
        Ok(out)
    };

    let magic = take(&mut offset, 4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let n_sizes = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize);
    }
    let arch = Architecture::new(sizes).map_err(|e| CheckpointError::BadShape(e.to_string()))?;
    let mut flat = Vec::with_capacity(arch.param_count());
    for _ in 0..arch.param_count() {
        flat.push(f64::from_le_bytes(take(&mut offset, 8)?.try_into().unwrap()));
    }
    if offset != bytes.len() {
        return Err(CheckpointError::TrailingBytes { extra: bytes.len() - offset });
    }
    ModelParams::from_flat(arch, flat).map_err(|e| CheckpointError::BadShape(e.to_string()))
}

pub fn save(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params))
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedssl_core::rng::{self, stream};

    fn model() -> ModelParams {
        let arch = Architecture::new(vec![5, 8, 3]).unwrap();
        ModelParams::init(arch, &mut stream(77, &[rng::INIT]))
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(m.arch().sizes(), back.arch().sizes());
        for (a, b) in m.as_flat().iter().zip(back.as_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_stable() {
        let m = model();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"FSSL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let m = model();
        let bytes = encode(&m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(CheckpointError::UnsupportedVersion(9))));

        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(CheckpointError::TrailingBytes { extra: 1 })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fssl");
        let m = model();
        save(&path, &m).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(m.as_flat(), back.as_flat());
    }
}
