//! Self-describing checkpoint container.
//!
//! A checkpoint is one JSON header line (format tag, version, backbone spec,
//! training position, arbitrary metadata, and a section directory) followed
//! by the sections' raw little-endian `f64` payloads in directory order.
//! Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BackboneSpec;
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "elseg-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: BackboneSpec,
    epoch: usize,
    global_step: usize,
    meta: serde_json::Value,
    sections: Vec<(String, usize)>,
}

/// Model spec plus named parameter vectors and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: BackboneSpec,
    pub epoch: usize,
    pub global_step: usize,
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Vec<f64>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .map(|(n, v)| (n.clone(), v.len()))
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
        bytes.push(b'\n');
        for (_, values) in &self.sections {
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing header line", path.display())))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if header.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint (format tag `{}`)",
                path.display(),
                header.format
            )));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {}",
                path.display(),
                header.version
            )));
        }

        let mut offset = newline + 1;
        let mut sections = Vec::with_capacity(header.sections.len());
        for (name, len) in header.sections {
            let end = offset + len * 8;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: truncated section `{name}`",
                    path.display()
                )));
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            sections.push((name, values));
            offset = end;
        }
        Ok(Checkpoint {
            spec: header.spec,
            epoch: header.epoch,
            global_step: header.global_step,
            meta: header.meta,
            sections,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            spec: BackboneSpec::tiny(4),
            epoch: 5,
            global_step: 123,
            meta: serde_json::json!({"ema_alpha": 0.99}),
            sections: vec![
                ("student".into(), vec![0.1, -2.5e-300, f64::MAX, 0.0]),
                ("teacher".into(), vec![1.0, 2.0]),
            ],
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 5);
        assert_eq!(back.global_step, 123);
        assert_eq!(back.meta["ema_alpha"], 0.99);
        for ((n1, v1), (n2, v2)) in ckpt.sections.iter().zip(back.sections.iter()) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = v1.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = v2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn junk_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"{\"format\":\"something-else\"}\n").unwrap();
        assert!(Checkpoint::load(&path).is_err());
        std::fs::write(&path, b"no newline at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
