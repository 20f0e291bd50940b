//! Checkpoint container: a plain-text header followed by a little-endian
//! `f64` payload.
//!
//! ```text
//! db2transf-checkpoint
//! format_version = 1
//! rng_seed = 7
//! config.lookback = 96
//! ...
//! meta.<key> = <value>
//! param <name> shape=<d0>x<d1>.. offset=<byte offset> len=<count>
//! ...
//! payload_bytes = <n>
//! payload_sha256 = <hex>
//! end_header
//! <n bytes of payload>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Db2TransF, ModelConfig, ModelParams};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "db2transf-checkpoint";
const END: &str = "end_header";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub rng_seed: u64,
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Free-form single-line annotations (e.g. data scaler statistics).
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: &Db2TransF, rng_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            rng_seed,
            config: model.config.clone(),
            params: model.params.clone(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn into_model(self) -> Result<Db2TransF> {
        Db2TransF::from_params(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut header = format!("{MAGIC}\nformat_version = {}\nrng_seed = {}\n", self.format_version, self.rng_seed);
        for (k, v) in config_fields(c) {
            header.push_str(&format!("config.{k} = {v}\n"));
        }
        for (k, v) in &self.metadata {
            header.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut payload = Vec::with_capacity(self.params.param_count() * 8);
        for t in self.params.tensors() {
            let shape = t.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            header.push_str(&format!(
                "param {} shape={} offset={} len={}\n",
                t.name,
                shape,
                payload.len(),
                t.data.len()
            ));
            for v in t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.push_str(&format!("payload_bytes = {}\n", payload.len()));
        header.push_str(&format!("payload_sha256 = {}\n{END}\n", hex(&Sha256::digest(&payload))));
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = format!("\n{END}\n");
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| Error::Checkpoint("header terminator not found".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
        let payload = &bytes[split + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("missing magic line".into()));
        }
        let mut scalars = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut manifest = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("param ") {
                manifest.push(parse_param_line(rest)?);
            } else if let Some((k, v)) = line.split_once(" = ") {
                if let Some(meta) = k.strip_prefix("meta.") {
                    metadata.insert(meta.to_string(), v.to_string());
                } else {
                    scalars.insert(k.to_string(), v.to_string());
                }
            } else {
                return Err(Error::Checkpoint(format!("unrecognised header line `{line}`")));
            }
        }

        let format_version: u32 = field(&scalars, "format_version")?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {format_version} (expected {FORMAT_VERSION})"
            )));
        }
        let declared: usize = field(&scalars, "payload_bytes")?;
        if payload.len() != declared {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes but header declares {declared} (truncated or padded file)",
                payload.len()
            )));
        }
        let digest: String = field(&scalars, "payload_sha256")?;
        if hex(&Sha256::digest(payload)) != digest {
            return Err(Error::Checkpoint("payload checksum mismatch".into()));
        }

        let config = ModelConfig {
            lookback: field(&scalars, "config.lookback")?,
            horizon: field(&scalars, "config.horizon")?,
            channels: field(&scalars, "config.channels")?,
            model_dim: field(&scalars, "config.model_dim")?,
            heads: field(&scalars, "config.heads")?,
            levels: field(&scalars, "config.levels")?,
            depth: field(&scalars, "config.depth")?,
            ffn_dim: field(&scalars, "config.ffn_dim")?,
            init_sigma: field(&scalars, "config.init_sigma")?,
            instance_norm: field(&scalars, "config.instance_norm")?,
        };
        let mut params = ModelParams::zeros(&config)
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        let expected = params.tensors().len();
        if manifest.len() != expected {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, config implies {expected}",
                manifest.len()
            )));
        }
        let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|t| t.shape).collect();
        for (((name, dst), shape), entry) in params.tensors_mut().into_iter().zip(shapes).zip(&manifest) {
            if entry.name != name || entry.shape != shape || entry.len != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "manifest entry `{}` {:?} does not match expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let end = entry.offset + 8 * entry.len;
            let raw = payload
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past the payload")))?;
            for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            }
        }

        Ok(Self {
            format_version,
            rng_seed: field(&scalars, "rng_seed")?,
            config,
            params,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn config_fields(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("lookback", c.lookback.to_string()),
        ("horizon", c.horizon.to_string()),
        ("channels", c.channels.to_string()),
        ("model_dim", c.model_dim.to_string()),
        ("heads", c.heads.to_string()),
        ("levels", c.levels.to_string()),
        ("depth", c.depth.to_string()),
        ("ffn_dim", c.ffn_dim.to_string()),
        // Debug formatting of f64 round-trips exactly
        ("init_sigma", format!("{:?}", c.init_sigma)),
        ("instance_norm", c.instance_norm.to_string()),
    ]
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_param_line(rest: &str) -> Result<ManifestEntry> {
    let bad = || Error::Checkpoint(format!("malformed manifest line `param {rest}`"));
    let mut parts = rest.split_whitespace();
    let name = parts.next().ok_or_else(bad)?.to_string();
    let mut kv = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(bad)?;
        kv.insert(k, v);
    }
    let shape = kv
        .get("shape")
        .ok_or_else(bad)?
        .split('x')
        .map(|d| d.parse().map_err(|_| bad()))
        .collect::<Result<Vec<usize>>>()?;
    let num = |k: &str| -> Result<usize> { kv.get(k).ok_or_else(bad)?.parse().map_err(|_| bad()) };
    Ok(ManifestEntry {
        name,
        shape,
        offset: num("offset")?,
        len: num("len")?,
    })
}

fn field<T: std::str::FromStr>(scalars: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = scalars
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("header field `{key}` missing")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("header field `{key}` has invalid value `{raw}`")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
