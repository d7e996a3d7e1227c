//! Single-file checkpoint: a text header followed by a little-endian `f32`
//! payload.
//!
//! ```text
//! UMEC
//! version = 1
//! model.d_model = 64
//! ...
//! moe.n_experts = 8            (MoE models only)
//! tensor = <name> <d0>x<d1> <offset> <nbytes>
//! trainable = <name>
//! payload = <total bytes>
//! end
//! <payload bytes>
//! ```
//!
//! Offsets are relative to the first payload byte. Tensors are stored in
//! parameter order with no gaps.

use std::path::Path;

use thiserror::Error;

use crate::config::KvConfig;
use crate::model::{Model, ModelConfig, Params};
use crate::moe::MoeConfig;
use crate::tensor::Tensor;
use crate::upcycle::FreezeMask;

pub const MAGIC: &str = "UMEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header at line {line}: {reason}")]
    CorruptHeader { line: usize, reason: String },
    #[error("payload truncated inside tensor `{tensor}`")]
    Truncated { tensor: String },
    #[error("tensor `{tensor}` is inconsistent: {reason}")]
    Inconsistent { tensor: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A model plus the names of its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub trainable: FreezeMask,
}

impl Checkpoint {
    pub fn new(model: Model, trainable: FreezeMask) -> Self {
        Self { model, trainable }
    }

    /// Dense models default to fully trainable.
    pub fn dense(model: Model) -> Self {
        let trainable = FreezeMask::all(&model);
        Self { model, trainable }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nversion = {VERSION}\n");
        let mut kv = KvConfig::new();
        kv.extend_prefixed("model", &self.model.config.to_kv());
        if let Some(m) = &self.model.moe {
            kv.extend_prefixed("moe", &m.to_kv());
        }
        header.push_str(&kv.to_text());
        let mut offset = 0usize;
        for (name, t) in self.model.params.iter() {
            let nbytes = 4 * t.numel();
            header.push_str(&format!(
                "tensor = {name} {} {offset} {nbytes}\n",
                format_shape(t.shape())
            ));
            offset += nbytes;
        }
        // Stored in parameter order for reproducible bytes.
        for name in self.model.params.names().filter(|n| self.trainable.contains(n)) {
            header.push_str(&format!("trainable = {name}\n"));
        }
        header.push_str(&format!("payload = {offset}\nend\n"));
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let magic = format!("{MAGIC}\n");
        if !bytes.starts_with(magic.as_bytes()) {
            return Err(CheckpointError::BadMagic);
        }
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .map(|p| p + end_marker.len())
            .ok_or_else(|| corrupt(0, "missing `end` line"))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| corrupt(0, "header is not UTF-8"))?;
        let payload = &bytes[header_end..];

        let mut kv = KvConfig::new();
        let mut tensors: Vec<(String, Vec<usize>, usize, usize, usize)> = Vec::new();
        let mut trainable = Vec::new();
        let mut version = None;
        let mut declared_payload = None;
        for (i, line) in header.lines().enumerate().skip(1) {
            let lineno = i + 1;
            if line == "end" {
                break;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| corrupt(lineno, "expected `key = value`"))?;
            match key {
                "version" => {
                    let v: u32 = value.parse().map_err(|_| corrupt(lineno, "bad version"))?;
                    if v != VERSION {
                        return Err(CheckpointError::UnsupportedVersion(v));
                    }
                    version = Some(v);
                }
                "tensor" => {
                    let fields: Vec<&str> = value.split(' ').collect();
                    let [name, shape, offset, nbytes] = fields[..] else {
                        return Err(corrupt(lineno, "tensor entry needs 4 fields"));
                    };
                    let shape = parse_shape(shape).ok_or_else(|| corrupt(lineno, "bad shape"))?;
                    let offset = offset.parse().map_err(|_| corrupt(lineno, "bad offset"))?;
                    let nbytes = nbytes.parse().map_err(|_| corrupt(lineno, "bad byte count"))?;
                    tensors.push((name.to_string(), shape, offset, nbytes, lineno));
                }
                "trainable" => trainable.push(value.to_string()),
                "payload" => {
                    declared_payload =
                        Some(value.parse::<usize>().map_err(|_| corrupt(lineno, "bad payload size"))?)
                }
                k if k.starts_with("model.") || k.starts_with("moe.") => kv.set(k, value),
                other => return Err(corrupt(lineno, &format!("unknown key `{other}`"))),
            }
        }
        if version.is_none() {
            return Err(corrupt(2, "missing version"));
        }
        let config = ModelConfig::from_kv(&kv.section("model"), &ModelConfig::default())
            .map_err(|e| corrupt(0, &e.to_string()))?;
        let moe_kv = kv.section("moe");
        let moe = if moe_kv.keys().next().is_some() {
            let base = MoeConfig::new(1, 1).expect("valid");
            for key in ["n_experts", "top_k"] {
                if !moe_kv.contains(key) {
                    return Err(corrupt(0, &format!("missing moe.{key}")));
                }
            }
            Some(MoeConfig::from_kv(&moe_kv, &base).map_err(|e| corrupt(0, &e.to_string()))?)
        } else {
            None
        };

        let mut params = Params::new();
        let mut expected_offset = 0usize;
        for (name, shape, offset, nbytes, lineno) in tensors {
            let numel: usize = shape.iter().product();
            if nbytes != 4 * numel {
                return Err(CheckpointError::Inconsistent {
                    tensor: name,
                    reason: format!("shape {shape:?} needs {} bytes, header says {nbytes}", 4 * numel),
                });
            }
            if offset != expected_offset {
                return Err(CheckpointError::Inconsistent {
                    tensor: name,
                    reason: format!("offset {offset}, expected {expected_offset}"),
                });
            }
            if offset + nbytes > payload.len() {
                return Err(CheckpointError::Truncated { tensor: name });
            }
            let data = payload[offset..offset + nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).expect("sized by construction");
            params
                .insert(name, t)
                .map_err(|e| corrupt(lineno, &e.to_string()))?;
            expected_offset += nbytes;
        }
        match declared_payload {
            Some(n) if n == expected_offset && n == payload.len() => {}
            Some(n) => {
                return Err(corrupt(
                    0,
                    &format!(
                        "payload size {n} disagrees with tensors ({expected_offset}) or file ({})",
                        payload.len()
                    ),
                ))
            }
            None => return Err(corrupt(0, "missing payload size")),
        }
        for name in &trainable {
            if !params.contains(name) {
                return Err(CheckpointError::Inconsistent {
                    tensor: name.clone(),
                    reason: "listed as trainable but not stored".into(),
                });
            }
        }
        let model = Model {
            config,
            moe,
            params,
        };
        model
            .validate()
            .map_err(|e| corrupt(0, &format!("architecture mismatch: {e}")))?;
        Ok(Self {
            model,
            trainable: FreezeMask::from_names(trainable),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(line: usize, reason: &str) -> CheckpointError {
    CheckpointError::CorruptHeader {
        line,
        reason: reason.to_string(),
    }
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(vec![]);
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}
