//! Binary checkpoints: `DLCK`, version, entry count, then per entry the
//! name, rank, dims, dtype tag and raw little-endian values.

use std::path::Path;

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Dtype, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, dtype: Dtype) -> Self {
        let entries = model
            .named_state()
            .into_iter()
            .map(|(name, t)| {
                let t = match dtype {
                    Dtype::F64 => t.clone(),
                    Dtype::F32 => t.map(|v| v as f32 as f64),
                };
                (name, dtype, t)
            })
            .collect();
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, ..)| n == name).map(|(_, _, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, dtype, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(dtype.tag());
            for &v in t.data() {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, not a DLCK checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = match r.take(1)?[0] {
                0 => Dtype::F64,
                1 => Dtype::F32,
                tag => return Err(Error::format(path, format!("entry {name}: unknown dtype tag {tag}"))),
            };
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len())
                .ok_or_else(|| Error::format(path, format!("entry {name}: implausible shape {shape:?}")))?;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("entry {name}: {e}")))?;
            entries.push((name, dtype, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Model {
    /// Copies checkpoint tensors into the model. Layers listed in `replace`
    /// keep their fresh initialization and their entries are ignored; every
    /// other tensor must be present with a matching shape.
    pub fn load_state(&mut self, ckpt: &Checkpoint, replace: &[usize]) -> Result<()> {
        if let Some(&i) = replace.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "replaced layer {i} out of range (model has {} layers)",
                self.len()
            )));
        }
        let expected: Vec<String> = self.named_state().into_iter().map(|(n, _)| n).collect();
        for (name, ..) in &ckpt.entries {
            let layer: Option<usize> = name.split('.').next().and_then(|s| s.parse().ok());
            if !expected.contains(name) && !layer.is_some_and(|l| replace.contains(&l)) {
                return Err(Error::State(format!("checkpoint entry {name} has no counterpart in the model")));
            }
        }
        for i in (0..self.len()).filter(|i| !replace.contains(i)) {
            let roles: Vec<&'static str> = self.layers[i].state().into_iter().map(|(r, _)| r).collect();
            for role in roles {
                let name = format!("{i}.{role}");
                let src = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::State(format!("checkpoint lacks {name} ({})", self.layers[i].kind_name())))?;
                let kind = self.layers[i].kind_name();
                let dst = self.layers[i].state_mut(role).expect("role listed by state()");
                if dst.shape() != src.shape() {
                    return Err(Error::State(format!(
                        "checkpoint {name} has shape {:?} but layer {i} ({}) needs {:?}",
                        src.shape(),
                        kind,
                        dst.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, dtype: Dtype) -> Result<()> {
        Checkpoint::from_model(self, dtype).save(path)
    }
}
