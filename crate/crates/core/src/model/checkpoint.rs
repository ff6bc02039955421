//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian. Layout, version 1:
//!
//! ```text
//! magic        8 bytes  "E2VCKPT\0"
//! version      u32
//! model_cfg    str      (u32 byte length + UTF-8, `key = value` lines)
//! run_cfg      str      free-form run configuration text
//! step         u64      optimizer steps taken
//! total_steps  u64      length of the schedule (tau and learning rate)
//! adam_t       u64      bias-correction counter of the optimizer
//! n_sets       u32      parameter sets, in order: student, teacher[, adam_m, adam_v]
//! per set:     u32 array count, then per array:
//!              str name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! checksum     u64      FNV-1a of every preceding byte
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"E2VCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Parameters,
    pub v: Parameters,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub run_config: String,
    pub step: u64,
    pub total_steps: u64,
    pub student: Parameters,
    pub teacher: Parameters,
    pub optimizer: Option<OptimizerState>,
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &Parameters) {
        let named = p.named();
        self.u32(named.len() as u32);
        for (name, _, t) in named {
            self.str(&name);
            self.u32(t.shape.len() as u32);
            for &d in &t.shape {
                self.u64(d as u64);
            }
            for v in &t.data {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
    /// Fills `template` (which fixes names and shapes) from the stream.
    fn params_into(&mut self, template: &mut Parameters) -> std::result::Result<(), String> {
        let count = self.u32()? as usize;
        let slots = template.named_mut();
        if count != slots.len() {
            return Err(format!("{count} arrays, expected {}", slots.len()));
        }
        for (name, _, t) in slots {
            let got = self.str()?;
            if got != name {
                return Err(format!("array `{got}`, expected `{name}`"));
            }
            let ndim = self.u32()? as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<std::result::Result<_, _>>()?;
            if shape != t.shape {
                return Err(format!("`{name}` has shape {shape:?}, expected {:?}", t.shape));
            }
            let raw = self.take(8 * t.data.len())?;
            for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.model.to_text());
        w.str(&self.run_config);
        w.u64(self.step);
        w.u64(self.total_steps);
        w.u64(self.optimizer.as_ref().map_or(0, |o| o.t));
        let n_sets = if self.optimizer.is_some() { 4 } else { 2 };
        w.u32(n_sets);
        w.params(&self.student);
        w.params(&self.teacher);
        if let Some(o) = &self.optimizer {
            w.params(&o.m);
            w.params(&o.v);
        }
        let sum = fnv(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 + 4 + 8 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv(body) != stored {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let model = ModelConfig::from_text(&r.str()?).map_err(|e| e.to_string())?;
        let run_config = r.str()?;
        let step = r.u64()?;
        let total_steps = r.u64()?;
        let adam_t = r.u64()?;
        let n_sets = r.u32()?;
        if n_sets != 2 && n_sets != 4 {
            return Err(format!("{n_sets} parameter sets, expected 2 or 4"));
        }
        let template = Parameters::init(&model, 0).map_err(|e| e.to_string())?;
        let mut student = template.clone();
        r.params_into(&mut student)?;
        let mut teacher = template.clone();
        r.params_into(&mut teacher)?;
        let optimizer = if n_sets == 4 {
            let mut m = template.clone();
            r.params_into(&mut m)?;
            let mut v = template;
            r.params_into(&mut v)?;
            Some(OptimizerState { t: adam_t, m, v })
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Self {
            model,
            run_config,
            step,
            total_steps,
            student,
            teacher,
            optimizer,
        })
    }

    /// Writes via a temporary file and rename, so readers never observe a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}
