use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::AdamState;
use crate::corpus::SegmentConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic_with;
use crate::losses::LossConvention;
use crate::model::{MentalPerceiver, ModelConfig};
use crate::numerics::{DType, ParamStore, Real};
use crate::priors::{CategoryPriors, PRIOR_DISORDER, PRIOR_NORMAL};

pub const MAGIC: &[u8; 6] = b"MPCKPT";
pub const VERSION: &[u8; 2] = b"01";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// Position of the shuffling generator when the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub segment: SegmentConfig,
    pub loss_convention: LossConvention,
    /// Zero-based epoch whose parameters are stored.
    pub epoch: usize,
    /// Validation UAR at that epoch.
    pub best_metric: f64,
    pub prior_counts: [usize; 2],
    pub adam_step: u64,
    pub rng: Option<RngState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: MentalPerceiver,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

fn write_tensor<F: Real>(w: &mut dyn Write, name: &str, value: &Array2<F>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(name.len() + 32 + value.len() * F::DTYPE.size());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(F::DTYPE as u8);
    buf.extend_from_slice(&2u32.to_le_bytes());
    for d in value.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for &v in value.iter() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| fmt_err(format!("truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().expect("8 bytes")))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Array2<f32>)> {
    let len = read_u32(r, "tensor name length")? as usize;
    let name = String::from_utf8(read_exact(r, len, "tensor name")?)
        .map_err(|_| fmt_err("tensor name is not UTF-8"))?;
    let tag = read_exact(r, 1, "dtype tag")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| fmt_err(format!("`{name}`: unknown dtype tag {tag}")))?;
    let rank = read_u32(r, "rank")?;
    if rank != 2 {
        return Err(fmt_err(format!("`{name}`: rank {rank}, expected 2")));
    }
    let rows = read_u64(r, "dims")? as usize;
    let cols = read_u64(r, "dims")? as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|n| *n <= (1 << 34))
        .ok_or_else(|| fmt_err(format!("`{name}`: implausible shape {rows}x{cols}")))?;
    let bytes = read_exact(r, count * dtype.size(), "tensor payload")?;
    let values: Vec<f32> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(f32::read_le).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| f64::read_le(b) as f32).collect(),
    };
    let arr = Array2::from_shape_vec((rows, cols), values).map_err(|e| fmt_err(e.to_string()))?;
    Ok((name, arr))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        write_atomic_with(path, |w| {
            let mut head = Vec::with_capacity(16 + meta.len());
            head.extend_from_slice(MAGIC);
            head.extend_from_slice(VERSION);
            head.extend_from_slice(&(meta.len() as u64).to_le_bytes());
            head.extend_from_slice(&meta);
            w.write_all(&head).map_err(|e| Error::io(path, e))?;
            for (name, p) in self.params.iter() {
                write_tensor(w, name, &p.value, path)?;
            }
            if let Some(adam) = &self.adam {
                for (name, m) in &adam.m {
                    write_tensor(w, &format!("{MOMENT1}{name}"), m, path)?;
                }
                for (name, v) in &adam.v {
                    write_tensor(w, &format!("{MOMENT2}{name}"), v, path)?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut head = [0u8; 8];
        if r.read_exact(&mut head).is_err() || &head[..6] != MAGIC {
            return Err(Error::CheckpointMagic);
        }
        if &head[6..] != VERSION {
            return Err(Error::CheckpointVersion(String::from_utf8_lossy(&head[6..]).into_owned()));
        }
        let meta_len = read_u64(&mut r, "metadata length")? as usize;
        if meta_len > 1 << 24 {
            return Err(fmt_err(format!("metadata block of {meta_len} bytes")));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&read_exact(&mut r, meta_len, "metadata")?)
            .map_err(|e| fmt_err(format!("metadata: {e}")))?;

        let mut tensors = IndexMap::new();
        while !r.fill_buf().map_err(|e| Error::io(path, e))?.is_empty() {
            let (name, arr) = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), arr).is_some() {
                return Err(fmt_err(format!("duplicate tensor `{name}`")));
            }
        }

        let prior_row = |name: &str| -> Result<Vec<f64>> {
            let t = tensors.get(name).ok_or_else(|| fmt_err(format!("missing tensor `{name}`")))?;
            Ok(t.iter().map(|&v| v as f64).collect())
        };
        let priors = CategoryPriors {
            normal: prior_row(PRIOR_NORMAL)?,
            disorder: prior_row(PRIOR_DISORDER)?,
            counts: meta.prior_counts,
        };
        let (model, mut params) =
            MentalPerceiver::build::<f32>(&meta.model, &priors).map_err(|e| fmt_err(e.to_string()))?;
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
        for name in &names {
            let t = tensors
                .shift_remove(name)
                .ok_or_else(|| fmt_err(format!("missing tensor `{name}`")))?;
            params.set(name, t).map_err(|e| fmt_err(e.to_string()))?;
        }

        let mut adam = AdamState::new(&params);
        adam.step = meta.adam_step;
        let mut moments = 0;
        for (name, t) in tensors {
            let (slot, base) = if let Some(base) = name.strip_prefix(MOMENT1) {
                (&mut adam.m, base)
            } else if let Some(base) = name.strip_prefix(MOMENT2) {
                (&mut adam.v, base)
            } else {
                return Err(fmt_err(format!("unexpected tensor `{name}`")));
            };
            match slot.get_mut(base) {
                Some(dst) if dst.dim() == t.dim() => *dst = t,
                _ => return Err(fmt_err(format!("optimizer tensor `{name}` does not match a parameter"))),
            }
            moments += 1;
        }
        let adam = match moments {
            0 => None,
            n if n == adam.m.len() + adam.v.len() => Some(adam),
            _ => return Err(fmt_err("incomplete optimizer state")),
        };
        Ok(Self {
            meta,
            model,
            params,
            adam,
        })
    }

    pub fn priors(&self) -> Result<CategoryPriors> {
        let row = |n: &str| -> Result<Vec<f64>> { Ok(self.params.value(n)?.iter().map(|&v| v as f64).collect()) };
        Ok(CategoryPriors {
            normal: row(PRIOR_NORMAL)?,
            disorder: row(PRIOR_DISORDER)?,
            counts: self.meta.prior_counts,
        })
    }
}
