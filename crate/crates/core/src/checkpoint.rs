//! Checkpoint files: one JSON header line, then the parameters as a
//! little-endian `f32` blob. The header records the architecture, the blob
//! digest, and whether the weights are frozen.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, DetectorArch};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::recognizer::{Recognizer, RecognizerConfig};

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHeader {
    pub kind: String,
    pub version: u32,
    pub input_size: usize,
    pub params: usize,
    pub frozen: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizerHeader {
    pub kind: String,
    pub version: u32,
    pub config: RecognizerConfig,
    pub g_params: usize,
    pub e_params: usize,
    pub g_frozen: bool,
    pub e_frozen: bool,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode<H: Serialize>(header: &H, blob: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(blob);
    Ok(out)
}

fn split(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Corrupted {
        path: path.to_path_buf(),
        detail: "missing header line".into(),
    })?;
    Ok((bytes[..nl].to_vec(), bytes[nl + 1..].to_vec()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `odapt train-source` first".into(),
        },
        _ => Error::io(path, e),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_blob(path: &Path, blob: &[u8], expected: usize, digest: &str) -> Result<()> {
    let corrupted = |detail: String| Error::Corrupted {
        path: path.to_path_buf(),
        detail,
    };
    if blob.len() != expected * 4 {
        return Err(corrupted(format!("blob holds {} bytes, header says {} params", blob.len(), expected)));
    }
    if sha256_hex(blob) != digest {
        return Err(corrupted("blob digest mismatch".into()));
    }
    Ok(())
}

pub fn detector_bytes(det: &Detector, frozen: bool) -> Result<Vec<u8>> {
    let blob = det.params.to_le_bytes();
    let header = DetectorHeader {
        kind: "detector".into(),
        version: VERSION,
        input_size: det.arch_size,
        params: det.params.len(),
        frozen,
        sha256: sha256_hex(&blob),
    };
    encode(&header, &blob)
}

pub fn save_detector(path: &Path, det: &Detector, frozen: bool) -> Result<()> {
    write(path, &detector_bytes(det, frozen)?)
}

pub fn load_detector(path: &Path) -> Result<(Detector, DetectorHeader)> {
    let (head, blob) = split(&read(path)?, path)?;
    let header: DetectorHeader = serde_json::from_slice(&head)?;
    if header.kind != "detector" || header.version != VERSION {
        return Err(Error::Corrupted {
            path: path.to_path_buf(),
            detail: format!("expected detector checkpoint v{VERSION}, found {} v{}", header.kind, header.version),
        });
    }
    check_blob(path, &blob, header.params, &header.sha256)?;
    let arch = DetectorArch::new(header.input_size)?;
    let params = Params::from_le_bytes(arch.layout().clone(), &blob)?;
    Ok((Detector::from_params(header.input_size, params)?, header))
}

pub fn recognizer_bytes(rec: &Recognizer, frozen: bool) -> Result<Vec<u8>> {
    let mut blob = rec.g.to_le_bytes();
    if let Some(e) = &rec.e {
        blob.extend(e.to_le_bytes());
    }
    let header = RecognizerHeader {
        kind: "recognizer".into(),
        version: VERSION,
        config: rec.cfg,
        g_params: rec.g.len(),
        e_params: rec.e.as_ref().map_or(0, |e| e.len()),
        g_frozen: frozen,
        e_frozen: frozen,
        sha256: sha256_hex(&blob),
    };
    encode(&header, &blob)
}

pub fn save_recognizer(path: &Path, rec: &Recognizer, frozen: bool) -> Result<()> {
    write(path, &recognizer_bytes(rec, frozen)?)
}

pub fn load_recognizer(path: &Path) -> Result<(Recognizer, RecognizerHeader)> {
    let (head, blob) = split(&read(path)?, path)?;
    let header: RecognizerHeader = serde_json::from_slice(&head)?;
    if header.kind != "recognizer" || header.version != VERSION {
        return Err(Error::Corrupted {
            path: path.to_path_buf(),
            detail: format!("expected recognizer checkpoint v{VERSION}, found {} v{}", header.kind, header.version),
        });
    }
    check_blob(path, &blob, header.g_params + header.e_params, &header.sha256)?;
    let proto = Recognizer::new(header.config, 0)?;
    let gl = header.g_params * 4;
    let g = Params::from_le_bytes(proto.g.layout().clone(), &blob[..gl])?;
    let e = match &proto.e {
        Some(pe) => Some(Params::from_le_bytes(pe.layout().clone(), &blob[gl..])?),
        None => None,
    };
    Ok((Recognizer::from_params(header.config, g, e)?, header))
}

/// Content hash of a checkpoint file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detector.ckpt");
        let det = Detector::new(16, 3).unwrap();
        save_detector(&path, &det, true).unwrap();
        let (back, header) = load_detector(&path).unwrap();
        assert_eq!(back.params.data(), det.params.data());
        assert!(header.frozen);
        let mut bytes = fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_detector(&path), Err(Error::Corrupted { .. })));
        assert!(matches!(load_detector(&dir.path().join("none")), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn recognizer_round_trip_keeps_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recognizer.ckpt");
        let cfg = RecognizerConfig {
            frames: 2,
            size: 16,
            patch: 8,
            dim: 8,
            depth: 1,
            heads: 2,
            ..RecognizerConfig::default()
        };
        for encoder in [true, false] {
            let rec = Recognizer::new(RecognizerConfig { encoder, ..cfg }, 1).unwrap();
            save_recognizer(&path, &rec, true).unwrap();
            let (back, header) = load_recognizer(&path).unwrap();
            assert_eq!(back.fingerprint(), rec.fingerprint());
            assert!(header.g_frozen && header.e_frozen);
        }
    }
}
