//! Artifact writing: every file goes through a temp file in the target
//! directory and is renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stagevar_core::varengine::Raster;

use crate::CliError;

pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.join(name).display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.flush().map_err(io)?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| io(e.error))?;
    Ok(path)
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

/// Binary PPM with the config hash as a header comment.
pub fn ppm_with_hash(raster: &Raster, hash: &str) -> Vec<u8> {
    let mut out = format!("P6\n# config_hash {hash}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

/// SHA-256 of the tokens as little-endian `u32`s.
pub fn token_hash(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.txt", b"one").unwrap();
        let p = write_atomic(dir.path(), "a.txt", b"two").unwrap();
        assert_eq!(std::fs::read(p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn ppm_header_carries_hash() {
        let r = Raster {
            height: 1,
            width: 1,
            pixels: vec![1, 2, 3],
        };
        let bytes = ppm_with_hash(&r, "ab");
        assert_eq!(bytes, b"P6\n# config_hash ab\n1 1\n255\n\x01\x02\x03".to_vec());
    }
}
