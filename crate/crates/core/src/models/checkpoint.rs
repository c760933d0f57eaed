//! `.ckpt` files.
//!
//! ```text
//! "CKP1" | u32 version | u32 header length | header (UTF-8 key=value lines:
//! spec.*, meta.*, norm.vars) | u32 tensor count | per tensor: u32 name
//! length, name, u32 rank, rank × u64 dims, little-endian f64 values
//! ```
//!
//! Normalisation statistics travel as the tensors `norm.mean` / `norm.std`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::fields::{NormStats, VariableId};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{Model, ModelError, ModelSpec, ParamStore};

pub const CKPT_MAGIC: [u8; 4] = *b"CKP1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore<f64>,
    pub norm: Option<NormStats>,
    /// Training metadata (epochs, seed, losses, loss convention, grid size).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model<R: Real>(
        model: &Model<R>,
        norm: Option<NormStats>,
        meta: BTreeMap<String, String>,
    ) -> Self {
        Self {
            spec: model.spec().clone(),
            params: model.params().cast(),
            norm,
            meta,
        }
    }

    pub fn model<R: Real>(&self) -> Result<Model<R>, ModelError> {
        Model::new(self.spec.clone(), self.params.cast())
    }

    pub fn encode(&self) -> Result<Vec<u8>, ModelError> {
        let mut header = String::new();
        for (k, v) in self.spec.to_kv() {
            header.push_str(&format!("spec.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            if k.contains(['\n', '=']) || v.contains('\n') {
                return Err(ModelError::MalformedHeader(format!("metadata entry {k:?}")));
            }
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let mut tensors: Vec<(String, Tensor<f64>)> = self.params.entries().to_vec();
        if let Some(norm) = &self.norm {
            let names: Vec<String> = norm.variables().iter().map(|v| v.name()).collect();
            header.push_str(&format!("norm.vars={}\n", names.join(",")));
            let n = names.len();
            tensors.push(("norm.mean".into(), Tensor::new(&[n], norm.means().to_vec())?));
            tensors.push(("norm.std".into(), Tensor::new(&[n], norm.stds().to_vec())?));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CKPT_MAGIC {
            return Err(ModelError::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(ModelError::VersionMismatch {
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| ModelError::MalformedHeader("header is not UTF-8".into()))?;
        let mut spec_kv = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut norm_vars = None;
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::MalformedHeader(line.to_string()))?;
            if let Some(k) = k.strip_prefix("spec.") {
                spec_kv.insert(k.to_string(), v.to_string());
            } else if let Some(k) = k.strip_prefix("meta.") {
                meta.insert(k.to_string(), v.to_string());
            } else if k == "norm.vars" {
                let vars = v
                    .split(',')
                    .map(|s| s.parse::<VariableId>())
                    .collect::<Result<Vec<_>, _>>()?;
                norm_vars = Some(vars);
            } else {
                return Err(ModelError::MalformedHeader(format!("unknown key {k}")));
            }
        }
        let spec = ModelSpec::from_kv(&spec_kv)?;

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut norm_mean = None;
        let mut norm_std = None;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| ModelError::MalformedHeader("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| ModelError::MalformedHeader(format!("{name}: shape overflow")))?;
            let data = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            match name.as_str() {
                "norm.mean" => norm_mean = Some(t.into_data()),
                "norm.std" => norm_std = Some(t.into_data()),
                _ => entries.push((name, t)),
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::MalformedHeader("trailing bytes".into()));
        }
        let params = ParamStore::new(entries);
        params.check_against(&spec.param_specs())?;
        let norm = match (norm_vars, norm_mean, norm_std) {
            (Some(vars), Some(mean), Some(std)) => Some(NormStats::new(vars, mean, std)?),
            (None, None, None) => None,
            _ => return Err(ModelError::MalformedHeader("incomplete norm stats".into())),
        };
        Ok(Self {
            spec,
            params,
            norm,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Truncated {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
