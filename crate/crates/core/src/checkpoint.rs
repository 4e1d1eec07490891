//! Model checkpoints: a versioned binary format that stores parameters
//! bit-exactly, and a JSON format with the same layout header.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, LayeredParams};
use crate::toymodel::{Architecture, EnergyClassifier, GaussianDenoiser, ToyGenerator};

pub const MAGIC: &[u8; 8] = b"WMCERTCK";
pub const FORMAT_NAME: &str = "wmcert-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// What the parameters belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Generator { arch: Architecture },
    Classifier { num_labels: usize, sigmas: Vec<f64>, mc_draws: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Binary,
    Json,
}

impl Encoding {
    /// `.json` files use JSON, everything else binary.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Encoding::Json,
            _ => Encoding::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: Header,
    pub params: LayeredParams,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    fn new(model: ModelKind, params: LayeredParams) -> Self {
        let header = Header { format: FORMAT_NAME.into(), version: FORMAT_VERSION, model, layout: params.layout() };
        Self { header, params }
    }

    pub fn from_generator(g: &ToyGenerator) -> Self {
        Self::new(ModelKind::Generator { arch: g.arch.clone() }, g.params.clone())
    }

    pub fn from_classifier(c: &EnergyClassifier) -> Self {
        Self::new(
            ModelKind::Classifier {
                num_labels: c.predictor.num_labels,
                sigmas: c.sigmas.clone(),
                mc_draws: c.mc_draws,
            },
            c.predictor.params.clone(),
        )
    }

    pub fn into_generator(self) -> Result<ToyGenerator> {
        match self.header.model {
            ModelKind::Generator { arch } => ToyGenerator::from_params(arch, self.params),
            other => Err(format_err(format!("expected a generator checkpoint, found {other:?}"))),
        }
    }

    pub fn into_classifier(self) -> Result<EnergyClassifier> {
        match self.header.model {
            ModelKind::Classifier { num_labels, sigmas, mc_draws } => {
                EnergyClassifier::new(GaussianDenoiser::from_params(self.params, num_labels)?, sigmas, mc_draws)
            }
            other => Err(format_err(format!("expected a classifier checkpoint, found {other:?}"))),
        }
    }

    fn check_header(&self) -> Result<()> {
        if self.header.format != FORMAT_NAME {
            return Err(format_err(format!("unknown format {:?}", self.header.format)));
        }
        if self.header.version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {}", self.header.version)));
        }
        if self.header.layout != self.params.layout() {
            return Err(format_err("header layout does not match the parameters"));
        }
        Ok(())
    }

    pub fn to_bytes(&self, encoding: Encoding) -> Result<Vec<u8>> {
        match encoding {
            Encoding::Json => Ok(serde_json::to_vec_pretty(self)?),
            Encoding::Binary => {
                let header = serde_json::to_vec(&self.header)?;
                let mut out = Vec::with_capacity(24 + header.len() + 8 * self.params.total_dim());
                out.extend_from_slice(MAGIC);
                out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
                out.extend_from_slice(&(header.len() as u64).to_le_bytes());
                out.extend_from_slice(&header);
                for block in self.params.blocks() {
                    for v in block {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Ok(out)
            }
        }
    }

    /// Parses either encoding, detected from the leading bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = if bytes.starts_with(MAGIC) { Self::parse_binary(bytes)? } else { serde_json::from_slice(bytes)? };
        ck.check_header()?;
        Ok(ck)
    }

    fn parse_binary(bytes: &[u8]) -> Result<Self> {
        let mut rest = &bytes[MAGIC.len()..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(format_err("truncated checkpoint"));
            }
            let (a, b) = rest.split_at(n);
            rest = b;
            Ok(a)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(len)?)?;
        let total: usize = header.layout.iter().sum();
        let raw = take(total * 8)?;
        if !rest.is_empty() {
            return Err(format_err("trailing bytes after parameters"));
        }
        let flat: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let params = LayeredParams::from_flat(&header.layout, &flat)?;
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes(Encoding::for_path(path))?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
