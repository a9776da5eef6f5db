//! Flat little-endian binary container for masks, probabilities and weights.
//!
//! ```text
//! "SSAM"  version:u32  layer_count:u32
//! per layer:
//!   name_len:u32  name:[u8; name_len]  rank:u32  dims:[u64; rank]
//!   dtype:u8 (0 = u8, 1 = f64)  values:[dtype; product(dims)]
//! ```
//!
//! A mask file holds `u8` layers. A probability file holds the `f64`
//! probability layers followed by the `u8` terminal layers under the same
//! names. A weight file holds `f64` tensors named after network parameters.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::{LayerMask, LayerProbs, MaskSet, ProbabilitySet};
use crate::nn::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSAM";
pub const VERSION: u32 = 1;

const DTYPE_U8: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.values {
            Values::U8(v) => {
                out.push(DTYPE_U8);
                out.extend_from_slice(v);
            }
            Values::F64(v) => {
                out.push(DTYPE_F64);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.to_path_buf(),
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected \"SSAM\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err("layer name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err("shape overflows"))?;
        let dtype = r.take(1, "dtype")?[0];
        let values = match dtype {
            DTYPE_U8 => Values::U8(r.take(n, "u8 values")?.to_vec()),
            DTYPE_F64 => {
                let raw = r.take(
                    n.checked_mul(8).ok_or_else(|| r.err("shape overflows"))?,
                    "f64 values",
                )?;
                Values::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            }
            other => {
                r.pos -= 1;
                return Err(r.err(format!("unknown dtype tag {other}")));
            }
        };
        records.push(Record {
            name,
            shape,
            values,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last layer"));
    }
    Ok(records)
}

pub fn mask_records(mask: &MaskSet) -> Vec<Record> {
    mask.layers
        .iter()
        .map(|l| Record {
            name: l.name.clone(),
            shape: l.shape.clone(),
            values: Values::U8(l.bits.clone()),
        })
        .collect()
}

pub fn encode_masks(mask: &MaskSet) -> Vec<u8> {
    encode(&mask_records(mask))
}

pub fn encode_probabilities(probs: &ProbabilitySet) -> Vec<u8> {
    let mut records: Vec<Record> = probs
        .layers
        .iter()
        .map(|l| Record {
            name: l.name.clone(),
            shape: l.shape.clone(),
            values: Values::F64(l.to_vec()),
        })
        .collect();
    records.extend(mask_records(&probs.terminal));
    encode(&records)
}

fn masks_from(records: Vec<Record>, path: &Path) -> Result<MaskSet> {
    let layers = records
        .into_iter()
        .map(|r| match r.values {
            Values::U8(bits) => LayerMask::new(r.name, r.shape, bits),
            Values::F64(_) => Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("layer '{}' holds f64 values, expected a u8 mask", r.name),
            }),
        })
        .collect::<Result<_>>()?;
    Ok(MaskSet { layers })
}

pub fn decode_masks(bytes: &[u8], path: &Path) -> Result<MaskSet> {
    masks_from(decode(bytes, path)?, path)
}

pub fn decode_probabilities(bytes: &[u8], path: &Path) -> Result<ProbabilitySet> {
    let mut probs = Vec::new();
    let mut terminal = Vec::new();
    for r in decode(bytes, path)? {
        match r.values {
            Values::F64(p) => probs.push(LayerProbs::new(r.name, r.shape, p)),
            Values::U8(_) => terminal.push(r),
        }
    }
    ProbabilitySet::new(probs, masks_from(terminal, path)?)
}

/// Weight and bias tensors of a network, named `layers.<i>.weight|bias`.
pub fn network_records(net: &Network) -> Vec<Record> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for (kind, t) in [("weight", layer.weight()), ("bias", layer.bias())] {
            if let Some(t) = t {
                out.push(Record {
                    name: format!("layers.{i}.{kind}"),
                    shape: t.shape().to_vec(),
                    values: Values::F64(t.data().to_vec()),
                });
            }
        }
    }
    out
}

/// Loads parameters written by [`network_records`] into `net`, which must
/// have the same architecture.
pub fn load_network_params(net: &mut Network, records: &[Record]) -> Result<()> {
    let expected = network_records(net);
    if expected.len() != records.len() {
        return Err(Error::invalid(format!(
            "weight file has {} tensors, network expects {}",
            records.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(records) {
        if want.name != got.name || want.shape != got.shape {
            return Err(Error::invalid(format!(
                "weight file tensor '{}' {:?} does not match network tensor '{}' {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }
    for (param, rec) in net.params_mut().into_iter().zip(records) {
        let Values::F64(values) = &rec.values else {
            return Err(Error::invalid(format!("tensor '{}' is not f64", rec.name)));
        };
        *param = Tensor::new(rec.shape.clone(), values.clone())?;
    }
    Ok(())
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
