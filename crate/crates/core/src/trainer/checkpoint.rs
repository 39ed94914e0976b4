//! Binary checkpoint container.
//!
//! Layout: magic `SDMAE\0`, format version (u32 LE), SHA-256 of the payload,
//! payload length (u64 LE), payload. The payload holds the schedule position,
//! config hash and generator state, then a count-prefixed list of tensors,
//! each as name length (u32), name, dtype tag (u8, 1 = f64), rank (u8), dims
//! (u64 each) and little-endian values.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use super::EpochMetrics;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SDMAE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 6 + 4 + 32 + 8;
const DTYPE_F64: u8 = 1;
const PARAM: &str = "param/";
const MOMENT1: &str = "optim.m/";
const MOMENT2: &str = "optim.v/";
const HYPER: &str = "optim.hyper";
const HISTORY: &str = "meta.history";

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub config_hash: [u8; 32],
    pub params: ParamStore,
    pub optim: AdamW,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.step == other.step
            && self.config_hash == other.config_hash
            && self.params == other.params
            && self.optim == other.optim
            && self.rng == other.rng
            && self.history.len() == other.history.len()
            && self
                .history
                .iter()
                .zip(&other.history)
                .all(|(a, b)| a.to_row().iter().zip(b.to_row()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Matrix) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    buf.push(2);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(c.epoch as u64).to_le_bytes());
    payload.extend_from_slice(&c.step.to_le_bytes());
    payload.extend_from_slice(&c.config_hash);
    payload.extend_from_slice(&c.rng.get_seed());
    payload.extend_from_slice(&c.rng.get_stream().to_le_bytes());
    payload.extend_from_slice(&c.rng.get_word_pos().to_le_bytes());
    payload.extend_from_slice(&c.optim.t.to_le_bytes());

    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for (name, m) in c.params.iter() {
        tensors.push((format!("{PARAM}{name}"), m));
    }
    for (name, m) in &c.optim.m {
        tensors.push((format!("{MOMENT1}{name}"), m));
    }
    for (name, m) in &c.optim.v {
        tensors.push((format!("{MOMENT2}{name}"), m));
    }
    let o = &c.optim;
    let hyper = Matrix::from_vec(1, 4, vec![o.beta1, o.beta2, o.eps, o.weight_decay]).unwrap();
    let rows: Vec<f64> = c.history.iter().flat_map(|h| h.to_row()).collect();
    let history = Matrix::from_vec(c.history.len(), EpochMetrics::WIDTH, rows).unwrap();
    tensors.push((HYPER.to_string(), &hyper));
    tensors.push((HISTORY.to_string(), &history));

    payload.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, m) in tensors {
        put_tensor(&mut payload, &name, m);
    }

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: (self.base + self.pos) as u64,
                message: format!("need {n} more bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let offset = self.base + self.pos;
        usize::try_from(self.u64()?).map_err(|_| Error::Format {
            offset: offset as u64,
            message: format!("{what} does not fit in memory"),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Integrity(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing checkpoint magic".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let checksum = &bytes[10..42];
    let declared = u64::from_le_bytes(bytes[42..50].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != declared {
        return Err(Error::Integrity(format!(
            "payload is {} bytes, header declares {declared}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }

    let mut r = Reader {
        buf: payload,
        pos: 0,
        base: HEADER_LEN,
    };
    let epoch = r.len("epoch")?;
    let step = r.u64()?;
    let config_hash: [u8; 32] = r.array()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let t = r.u64()?;

    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut params = ParamStore::new();
    let mut optim = AdamW::new(0.0);
    optim.t = t;
    let mut hyper = None;
    let mut history = None;
    let count = r.len("tensor count")?;
    for _ in 0..count {
        let name_len = u32::from_le_bytes(r.array()?) as usize;
        let at = (HEADER_LEN + r.pos) as u64;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let [dtype, rank] = r.array()?;
        if dtype != DTYPE_F64 || rank != 2 {
            return Err(Error::Format {
                offset: at,
                message: format!("tensor `{name}` has dtype {dtype} rank {rank}, expected f64 rank 2"),
            });
        }
        let rows = r.len("rows")?;
        let cols = r.len("cols")?;
        let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some()).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("tensor `{name}` is too large"),
        })?;
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let m = Matrix::from_vec(rows, cols, data)?;
        if let Some(rest) = name.strip_prefix(PARAM) {
            params.insert(rest, m);
        } else if let Some(rest) = name.strip_prefix(MOMENT1) {
            optim.m.insert(rest.to_string(), m);
        } else if let Some(rest) = name.strip_prefix(MOMENT2) {
            optim.v.insert(rest.to_string(), m);
        } else if name == HYPER {
            hyper = Some(m);
        } else if name == HISTORY {
            history = Some(m);
        } else {
            return Err(Error::Format {
                offset: at,
                message: format!("unknown tensor `{name}`"),
            });
        }
    }
    let hyper = hyper.filter(|h| h.len() == 4).ok_or_else(|| Error::Integrity("optimizer settings missing".into()))?;
    let h = hyper.as_slice();
    (optim.beta1, optim.beta2, optim.eps, optim.weight_decay) = (h[0], h[1], h[2], h[3]);
    let history = history
        .filter(|m| m.is_empty() || m.cols() == EpochMetrics::WIDTH)
        .ok_or_else(|| Error::Integrity("metrics history missing".into()))?;
    let history = (0..history.rows()).map(|i| EpochMetrics::from_row(history.row(i))).collect();
    Ok(Checkpoint {
        epoch,
        step,
        config_hash,
        params,
        optim,
        rng,
        history,
    })
}

/// Writes to a sibling temporary file first, then renames over `path`.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, encode_checkpoint(c)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
