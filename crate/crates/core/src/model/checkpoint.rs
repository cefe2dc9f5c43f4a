//! Binary checkpoint: magic, version, JSON header, little-endian f64 parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{digest, Architecture, VoxelClassifier};
use crate::error::{Error, Result};
use crate::labelspace::Class;

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    heads: Vec<Vec<Class>>,
    epoch: usize,
    val_dsc: f64,
    temperature: Option<f64>,
    n_params: usize,
    sha256: String,
    config: serde_json::Value,
}

/// A model snapshot with the bookkeeping needed to reproduce and select it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VoxelClassifier,
    pub epoch: usize,
    /// Validation mean DSC at the time of the snapshot.
    pub val_dsc: f64,
    /// Post-hoc logit temperature, when calibrated.
    pub temperature: Option<f64>,
    /// Echo of the configuration that produced the model.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            architecture: self.model.architecture().clone(),
            heads: self.model.head_classes(),
            epoch: self.epoch,
            val_dsc: self.val_dsc,
            temperature: self.temperature,
            n_params: params.len(),
            sha256: digest(params),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        bytes.read_exact(&mut b4).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        bytes.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if bytes.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[..hlen])?;
        let body = &bytes[hlen..];
        if body.len() != header.n_params * 8 {
            return Err(bad("parameter block has the wrong length"));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if digest(&params) != header.sha256 {
            return Err(bad("parameter digest mismatch"));
        }
        let mut model = VoxelClassifier::new(&header.architecture, &header.heads, 0)?;
        model.set_params(params)?;
        Ok(Self {
            model,
            epoch: header.epoch,
            val_dsc: header.val_dsc,
            temperature: header.temperature,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let m = VoxelClassifier::new(
            &Architecture::default(),
            &[vec![Class::Bg, Class::Wmh], vec![Class::Bg, Class::Isl]],
            11,
        )
        .unwrap();
        let ck = Checkpoint {
            model: m,
            epoch: 3,
            val_dsc: 0.25,
            temperature: Some(1.5),
            config: serde_json::json!({"seed": 11}),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let mut broken = bytes.clone();
        *broken.last_mut().unwrap() ^= 1;
        assert!(Checkpoint::from_bytes(&broken).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
