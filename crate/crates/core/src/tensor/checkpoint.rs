//! Text checkpoint format.
//!
//! ```text
//! REVAL-CHECKPOINT v1
//! meta <key> <value>
//! tensor <name> <rows> <cols> <v0> <v1> ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting,
//! so a save/load cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "REVAL-CHECKPOINT v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            assert!(
                !k.contains(char::is_whitespace),
                "meta key {k:?} contains whitespace"
            );
            assert!(!v.contains('\n'), "meta value for {k} contains a newline");
            out.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            out.push_str(&format!("tensor {name} {} {}", t.rows(), t.cols()));
            for v in t.data() {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.trim_end() == CHECKPOINT_MAGIC => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "missing header {CHECKPOINT_MAGIC:?}"
                )))
            }
        }
        let mut ck = Checkpoint::default();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                line: lineno,
                msg: msg.to_string(),
            };
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_ascii_whitespace();
                let name = parts.next().ok_or_else(|| bad("tensor without a name"))?;
                let rows: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad row count"))?;
                let cols: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad column count"))?;
                let data = parts
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| bad(&format!("bad value {s:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let t = Tensor::matrix(rows, cols, data).map_err(|e| bad(&e.to_string()))?;
                ck.tensors.push((name.to_string(), t));
            } else {
                return Err(bad("expected a meta or tensor record"));
            }
        }
        Ok(ck)
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(ck.to_text().as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::parse(&fs::read_to_string(path)?)
}
