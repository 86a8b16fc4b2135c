//! Versioned binary checkpoint for GNN weights and optimizer state.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "QPGN"
//!      4     2  format version (u16, currently 1)
//!      6     2  flags (u16); bit 0 set when optimizer state follows
//!      8     4  M (u32)
//!     12     4  K (u32)
//!     16     4  DAC bits b (u32)
//!     20     4  hidden width d_h (u32)
//!     24     4  hidden layer count N_h (u32)
//!     28     4  reserved, zero
//!     32     8  leaky slope (f64)
//!     40     8  seed (u64)
//!     48     4  matrix count n (u32)
//!     52     4  metadata length j (u32)
//!     56     j  training metadata, UTF-8 JSON
//! then n matrix records, in layer order and within a layer in the order
//! edge, bs, ue, self_bs, neigh_bs, self_ue, neigh_ue (the last two absent
//! in the output layer):
//!            4  layer index (u32)
//!            1  family code 0..=6 in the order above
//!            3  zero padding
//!            4  rows (u32)
//!            4  cols (u32)
//!   4·rows·cols  entries, row-major f32
//! if flag bit 0:
//!            8  optimizer step count (u64)
//!               first-moment entries for every matrix, same order, f32
//!               second-moment entries for every matrix, same order, f32
//! ```
//!
//! Entries are stored at 32-bit precision. Weights that are already
//! f32-representable (the trainer keeps them so) round-trip exactly.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{Family, GnnConfig, GnnError, GnnWeights, RMatrix};

pub const MAGIC: [u8; 4] = *b"QPGN";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 56;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Config(#[from] GnnError),
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: GnnWeights,
    pub v: GnnWeights,
}

impl OptimizerState {
    pub fn new(cfg: &GnnConfig) -> Self {
        OptimizerState {
            step: 0,
            m: GnnWeights::zeros(cfg),
            v: GnnWeights::zeros(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: GnnConfig,
    pub seed: u64,
    pub weights: GnnWeights,
    pub metadata: serde_json::Value,
    pub optimizer: Option<OptimizerState>,
}

fn family_code(f: Family) -> u8 {
    Family::ALL.iter().position(|&g| g == f).unwrap() as u8
}

fn u32_of(x: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(x).map_err(|_| CheckpointError::Format(format!("{what} {x} does not fit in u32")))
}

fn put_entries(out: &mut Vec<u8>, m: &RMatrix) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.weights.check(&self.config)?;
        let meta = serde_json::to_vec(&self.metadata)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let entries = self.weights.entries();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.optimizer.is_some() as u16).to_le_bytes());
        let c = &self.config;
        for (x, what) in [
            (c.m, "M"),
            (c.k, "K"),
            (c.bits as usize, "bits"),
            (c.d_h, "d_h"),
            (c.n_h, "N_h"),
        ] {
            out.extend_from_slice(&u32_of(x, what)?.to_le_bytes());
        }
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&c.leaky_slope.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&u32_of(entries.len(), "matrix count")?.to_le_bytes());
        out.extend_from_slice(&u32_of(meta.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(&meta);
        for (layer, fam, m) in &entries {
            out.extend_from_slice(&u32_of(*layer, "layer")?.to_le_bytes());
            out.extend_from_slice(&[family_code(*fam), 0, 0, 0]);
            out.extend_from_slice(&u32_of(m.nrows(), "rows")?.to_le_bytes());
            out.extend_from_slice(&u32_of(m.ncols(), "cols")?.to_le_bytes());
            put_entries(&mut out, m);
        }
        if let Some(opt) = &self.optimizer {
            opt.m.check(&self.config)?;
            opt.v.check(&self.config)?;
            out.extend_from_slice(&opt.step.to_le_bytes());
            for w in [&opt.m, &opt.v] {
                for (_, _, m) in w.entries() {
                    put_entries(&mut out, m);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let flags = r.u16()?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let bits = r.u32()?;
        let d_h = r.u32()? as usize;
        let n_h = r.u32()? as usize;
        let _reserved = r.u32()?;
        let leaky_slope = r.f64()?;
        let config = GnnConfig {
            m,
            k,
            bits,
            d_h,
            n_h,
            leaky_slope,
        };
        config.validate()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        debug_assert_eq!(r.pos, HEADER_LEN);
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        let mut weights = GnnWeights::zeros(&config);
        {
            let slots = weights.entries_mut();
            if slots.len() != n {
                return Err(CheckpointError::Format(format!(
                    "{n} matrices stored, config needs {}",
                    slots.len()
                )));
            }
            for (layer, fam, mat) in slots {
                let (sl, code) = (r.u32()? as usize, r.take(4)?[0]);
                let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
                if sl != layer || code != family_code(fam) || (rows, cols) != mat.shape() {
                    return Err(CheckpointError::Format(format!(
                        "record for layer {layer} {} has layer {sl}, family {code}, shape {rows}x{cols}, expected {:?}",
                        fam.name(),
                        mat.shape()
                    )));
                }
                r.fill(mat)?;
            }
        }
        let optimizer = if flags & 1 == 1 {
            let step = r.u64()?;
            let mut opt = OptimizerState {
                step,
                m: GnnWeights::zeros(&config),
                v: GnnWeights::zeros(&config),
            };
            for w in [&mut opt.m, &mut opt.v] {
                for (_, _, mat) in w.entries_mut() {
                    r.fill(mat)?;
                }
            }
            Some(opt)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        weights.check(&config)?;
        Ok(Checkpoint {
            config,
            seed,
            weights,
            metadata,
            optimizer,
        })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CheckpointError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn fill(&mut self, m: &mut RMatrix) -> Result<(), CheckpointError> {
        let (rows, cols) = m.shape();
        let raw = self.take(4 * rows * cols)?;
        for i in 0..rows {
            for j in 0..cols {
                let o = 4 * (i * cols + j);
                m[(i, j)] = f32::from_le_bytes(raw[o..o + 4].try_into().unwrap()) as f64;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = GnnConfig::new(4, 2, 1, 6, 2).unwrap();
        let mut opt = OptimizerState::new(&cfg);
        opt.step = 17;
        opt.m = GnnWeights::init(&cfg, 2);
        opt.v = GnnWeights::init(&cfg, 3);
        Checkpoint {
            config: cfg,
            seed: 99,
            weights: GnnWeights::init(&cfg, 1),
            metadata: serde_json::json!({"epoch": 3, "best_val_rate": 2.5}),
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        let mut plain = c.clone();
        plain.optimizer = None;
        assert_eq!(
            Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(),
            plain
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(!dir.path().join("w.ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic)
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Version(9))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(CheckpointError::Format(_))
        ));
    }
}
