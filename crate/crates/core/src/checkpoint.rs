//! Line-oriented text checkpoints.
//!
//! ```text
//! bdil-checkpoint 1
//! meta <key> <value>
//! tensor <name> <dim,dim,...>
//! <values separated by spaces>
//! end
//! ```
//!
//! Values are written in Rust's shortest round-trip form, so parsing restores
//! every `f64` bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const HEADER: &str = "bdil-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

impl Checkpoint {
    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(","));
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => return Err(bad(n, format!("expected {HEADER:?}, found {other:?}"))),
            None => return Err(bad(1, "empty checkpoint")),
        }
        let mut ck = Checkpoint::default();
        while let Some((n, line)) = lines.next() {
            if line == "end" {
                return Ok(ck);
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), Some(v)) => ck.push_meta(k, v),
                (Some("tensor"), Some(name), Some(dims)) => {
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>().map_err(|e| bad(n, format!("bad dim {d:?}: {e}"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    let (vn, vals) = lines.next().ok_or_else(|| bad(n + 1, "missing tensor values"))?;
                    let data = vals
                        .split_ascii_whitespace()
                        .map(|v| v.parse::<f64>().map_err(|e| bad(vn, format!("bad value {v:?}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let t = Tensor::new(shape, data).map_err(|e| bad(vn, e))?;
                    ck.tensors.push((name.to_string(), t));
                }
                _ => return Err(bad(n, format!("unrecognized line {line:?}"))),
            }
        }
        Err(Error::Checkpoint("missing end marker".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
