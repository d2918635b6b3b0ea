//! Dataset manifests (JSON) and raw tensor payloads (FSRT).
//!
//! FSRT layout: `"FSRT"`, u16 version (= 1), u64 value count, then that many
//! little-endian f32 values.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::episodes::{DatasetIndex, SampleRecord};
use crate::error::{Error, FormatError, Result};
use crate::io::bin::ByteReader;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RAW_MAGIC: &[u8; 4] = b"FSRT";
pub const RAW_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub classes: Vec<String>,
    /// Shape of one sample's raw features, e.g. `[16]` or `[28, 28, 1]`.
    pub sample_shape: Vec<usize>,
    pub samples: Vec<SampleRecord>,
    /// FSRT file holding the features, relative to the manifest. `None` when
    /// samples are resolved through a frozen embedding store.
    pub payload: Option<String>,
    /// Whether features were standardized before being written.
    pub normalized: bool,
}

impl DatasetManifest {
    /// Checks id uniqueness, class references and payload ranges.
    pub fn validate(&self, payload_len: usize) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(FormatError::UnsupportedVersion(self.schema_version as u16).into());
        }
        let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(self.samples.len());
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(&s.id) {
                return Err(FormatError::DuplicateId(s.id.clone()).into());
            }
            if s.class >= self.classes.len() {
                return Err(Error::Invalid(format!(
                    "sample `{}` references unknown class {}",
                    s.id, s.class
                )));
            }
            let end = s
                .offset
                .checked_add(s.len)
                .filter(|&e| e <= payload_len)
                .ok_or_else(|| FormatError::Malformed(format!("sample `{}` range out of bounds", s.id)))?;
            if s.len > 0 {
                ranges.push((s.offset, end));
            }
        }
        ranges.sort_unstable();
        if ranges.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(FormatError::Malformed("overlapping sample ranges".into()).into());
        }
        Ok(())
    }

    pub fn into_index(self, payload: Vec<f32>) -> Result<DatasetIndex> {
        self.validate(payload.len())?;
        DatasetIndex::new(self.classes, self.samples, Arc::new(payload))
    }
}

pub fn encode_raw(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + values.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> std::result::Result<Vec<f32>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(RAW_MAGIC)?;
    let version = r.u16()?;
    if version != RAW_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.u64()? as usize;
    if n.checked_mul(4).is_none_or(|b| b > r.remaining()) {
        return Err(FormatError::Truncated);
    }
    let values = (0..n).map(|_| r.f32()).collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(values)
}

/// Writes `manifest.json` and, when a payload is given, `payload.fsrt` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, manifest: &DatasetManifest, payload: &[f32]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    if let Some(name) = &manifest.payload {
        std::fs::write(dir.join(name), encode_raw(payload))?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<f32>)> {
    let path = path.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(path)?)?;
    let payload = match &manifest.payload {
        Some(name) => {
            let base = path.parent().unwrap_or(Path::new("."));
            decode_raw(&std::fs::read(base.join(name))?)?
        }
        None => Vec::new(),
    };
    manifest.validate(payload.len())?;
    Ok((manifest, payload))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let (manifest, payload) = read_manifest(path)?;
    manifest.into_index(payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(samples: Vec<SampleRecord>) -> DatasetManifest {
        DatasetManifest {
            schema_version: 1,
            classes: vec!["a".into(), "b".into()],
            sample_shape: vec![2],
            samples,
            payload: Some("payload.fsrt".into()),
            normalized: false,
        }
    }

    fn rec(id: &str, class: usize, offset: usize) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            class,
            offset,
            len: 2,
        }
    }

    #[test]
    fn raw_round_trip() {
        let v = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e7];
        let bytes = encode_raw(&v);
        let back = decode_raw(&bytes).unwrap();
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(decode_raw(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(decode_raw(&bad), Err(FormatError::UnsupportedVersion(9)));
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let m = manifest(vec![rec("x", 0, 0), rec("y", 1, 1)]);
        assert!(m.validate(4).is_err());
        let ok = manifest(vec![rec("x", 0, 0), rec("y", 1, 2)]);
        ok.validate(4).unwrap();
        assert!(ok.validate(3).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = manifest(vec![rec("x", 0, 0), rec("x", 1, 2)]);
        assert!(m.validate(4).is_err());
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(vec![rec("x", 0, 0), rec("y", 1, 2)]);
        let payload = [0.5, 1.0, -2.0, 4.0];
        let path = write_dataset(dir.path(), &m, &payload).unwrap();
        let (m2, p2) = read_manifest(&path).unwrap();
        assert_eq!(m2, m);
        assert_eq!(p2, payload);
        let idx = load_dataset(&path).unwrap();
        assert_eq!(idx.sample(1).features, &[-2.0, 4.0]);
    }
}
