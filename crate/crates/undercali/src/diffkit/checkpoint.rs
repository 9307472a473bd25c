//! JSON checkpoints for parameter sets. Values round-trip bit-exactly
//! (shortest-representation float encoding); optimizer state is not
//! persisted. `meta` carries whatever the owning component needs to rebuild
//! its architecture before restoring.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::mat::Mat;

const FORMAT: &str = "undercali-ckpt";
const VERSION: u32 = 1;

/// Largest checkpoint file accepted, as a guard against hostile inputs.
const MAX_BYTES: u64 = 256 << 20;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("meta key {key} missing or not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint(format!("meta key {key} missing or not a number")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("meta key {key} missing or not a string")))
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unrecognized format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                self.version
            )));
        }
        for t in &self.tensors {
            let want = t
                .rows
                .checked_mul(t.cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {}: shape overflow", t.name)))?;
            if t.data.len() != want {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: {}x{} declared but {} values present",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor {}: non-finite value", t.name)));
            }
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if self.tensors[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {}", t.name)));
            }
        }
        Ok(())
    }

    /// Copy tensor values into `set`. The set must expose exactly the
    /// checkpoint's tensors, same names, same order, same shapes.
    pub fn restore<S: ParamSet + ?Sized>(&self, set: &mut S) -> Result<()> {
        let mut err = None;
        let mut i = 0;
        set.for_each_param_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(i) {
                Some(t) if t.name == name => {
                    if (t.rows, t.cols) != p.value.shape() {
                        err = Some(format!(
                            "tensor {name}: checkpoint has {}x{}, model expects {}x{}",
                            t.rows,
                            t.cols,
                            p.value.rows(),
                            p.value.cols()
                        ));
                        return;
                    }
                    match Mat::from_vec(t.rows, t.cols, t.data.clone()) {
                        Ok(m) => p.reset_to(m),
                        Err(e) => err = Some(e.to_string()),
                    }
                }
                Some(t) => err = Some(format!("expected tensor {name}, found {}", t.name)),
                None => err = Some(format!("checkpoint ends before tensor {name}")),
            }
            i += 1;
        });
        if let Some(msg) = err {
            return Err(Error::Checkpoint(msg));
        }
        if i != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors the model does not expect",
                self.tensors.len() - i
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint<S: ParamSet + ?Sized>(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    set: &S,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut bad = None;
    set.for_each_param(&mut |name, p| {
        if !p.value.all_finite() && bad.is_none() {
            bad = Some(name.to_string());
        }
        tensors.push(Tensor {
            name: name.to_string(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            data: p.value.as_slice().to_vec(),
        });
    });
    if let Some(name) = bad {
        return Err(Error::Checkpoint(format!("refusing to save non-finite tensor {name}")));
    }
    let ckpt = Checkpoint {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        meta,
        tensors,
    };
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(f, &ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

/// Parse and validate checkpoint bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let ckpt: Checkpoint =
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    if len > MAX_BYTES {
        return Err(Error::Checkpoint(format!("file is {len} bytes, limit {MAX_BYTES}")));
    }
    let mut bytes = Vec::with_capacity(len as usize);
    BufReader::new(f).read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}
