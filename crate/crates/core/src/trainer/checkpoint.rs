//! Binary checkpoint format.
//!
//! ```text
//! "DMSV" | u32 version | u32 N | u32 D
//! banks pk, ek, tv, sv            (N·D f64 each, row-major)
//! u64 optimizer step | first moments ×4 | second moments ×4
//! EMA shadow ×4
//! u64 training step
//! u32 config length | config JSON (UTF-8)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::optim::OptimizerState;
use super::{TrainConfig, TrainError};
use crate::numkernel::Tensor2;

pub const MAGIC: &[u8; 4] = b"DMSV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// `pk, ek, tv, sv`.
    pub banks: [Tensor2; 4],
    pub optimizer: OptimizerState,
    pub ema: [Tensor2; 4],
    pub config: TrainConfig,
    pub step: u64,
}

impl Checkpoint {
    pub fn slot_count(&self) -> usize {
        self.banks[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.banks[0].cols()
    }

    pub fn encode(&self) -> Vec<u8> {
        let (n, d) = (self.slot_count(), self.dim());
        let mut out = Vec::with_capacity(16 + 8 * n * d * 16 + 512);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        let put = |t: &Tensor2, out: &mut Vec<u8>| {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        self.banks.iter().for_each(|t| put(t, &mut out));
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        self.optimizer.first.iter().for_each(|t| put(t, &mut out));
        self.optimizer.second.iter().for_each(|t| put(t, &mut out));
        self.ema.iter().for_each(|t| put(t, &mut out));
        out.extend_from_slice(&self.step.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |why: &str| TrainError::CorruptFile(why.to_string());
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing DMSV header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TrainError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let tensors = |k: usize, r: &mut Reader| -> Result<Vec<Tensor2>, TrainError> {
            (0..k).map(|_| r.tensor(n, d)).collect()
        };
        let banks = tensors(4, &mut r)?;
        let opt_step = r.u64()?;
        let first = tensors(4, &mut r)?;
        let second = tensors(4, &mut r)?;
        let ema = tensors(4, &mut r)?;
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config: TrainConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| TrainError::CorruptFile(format!("config: {e}")))?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            version,
            banks: banks.try_into().expect("four banks"),
            optimizer: OptimizerState { step: opt_step, first, second },
            ema: ema.try_into().expect("four shadows"),
            config,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::CorruptFile("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor2, TrainError> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Tensor2::from_vec(rows, cols, data).expect("sized by take"))
    }
}
