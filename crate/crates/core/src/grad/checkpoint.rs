use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &str = "MTP-CHECKPOINT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint has no entry `{0}`")]
    Missing(String),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Named tensors plus string metadata.
///
/// On disk: a text header (`meta <key> <value>` and `tensor <name> <dims>` lines,
/// closed by `end`), the tensors as little-endian f64 in header order, then a
/// CRC-32 of everything before it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| format_err(format!("meta `{key}` has unparsable value `{raw}`")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(format_err(format!("meta key `{k}` not storable")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(format_err(format!("tensor name `{name}` not storable")));
            }
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("tensor {name} {dims}\n"));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(format_err("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut pos = 0;
        let mut next_line = || -> Result<&str, CheckpointError> {
            let rest = &body[pos..];
            let nl = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| format_err("unterminated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| format_err("header is not utf-8"))
        };
        if next_line()? != MAGIC {
            return Err(format_err("bad magic line"));
        }
        let mut ck = Checkpoint::new();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    ck.meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>().map_err(|_| format_err(format!("bad dims `{dims}`"))))
                            .collect::<Result<Vec<_>, _>>()?
                    };
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(format_err(format!("unrecognised header line `{line}`"))),
            }
        }
        let mut payload = &body[pos..];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if payload.len() < n * 8 {
                return Err(format_err(format!("payload truncated in `{name}`")));
            }
            let (chunk, rest) = payload.split_at(n * 8);
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.push((name, Tensor { shape, data }));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(format_err(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
