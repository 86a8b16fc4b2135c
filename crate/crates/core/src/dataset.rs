//! Binary channel datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic  b"QPCH"
//!      4     2  format version (currently 1)
//!      6     1  dtype  (1 = complex128, interleaved re/im f64)
//!      7     1  channel model (0 = rayleigh, 1 = los_ula)
//!      8     4  M
//!     12     4  K
//!     16     8  count
//!     24     8  seed
//!     32     .  count * M * K * 16 bytes, each matrix row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{self, CMatrix, ChannelError, ChannelMatrix, ChannelModel};
use crate::rng::{self, Stream};

pub const MAGIC: [u8; 4] = *b"QPCH";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_C128: u8 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported dataset header: {0}")]
    VersionMismatch(String),
    #[error("truncated dataset: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub model: ChannelModel,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub channels: Vec<CMatrix>,
}

impl ChannelDataset {
    pub fn empty(model: ChannelModel, m: usize, k: usize, seed: u64) -> Self {
        Self {
            model,
            m,
            k,
            seed,
            channels: Vec::new(),
        }
    }

    /// `count` channels, channel `i` drawn from sub-stream `i` of `seed`.
    /// LOS channels use integer user angles from U{0, ..., 180}.
    pub fn generate(
        model: ChannelModel,
        m: usize,
        k: usize,
        count: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        if m == 0 || k == 0 {
            return Err(ChannelError::EmptyDimension { m, k }.into());
        }
        let channels = (0..count as u64)
            .map(|i| -> Result<CMatrix, ChannelError> {
                match model {
                    ChannelModel::Rayleigh => {
                        let mut r = rng::substream(seed, Stream::Channel, i);
                        Ok(channel::rayleigh_from_rng(m, k, &mut r)?.into_entries())
                    }
                    ChannelModel::LosUla => {
                        let mut r = rng::substream(seed, Stream::Angle, i);
                        let angles = channel::random_los_angles(k, &mut r);
                        Ok(channel::gen_los_ula(m, &angles)?.into_entries())
                    }
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model,
            m,
            k,
            seed,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channel(&self, i: usize) -> ChannelMatrix {
        ChannelMatrix::new(self.channels[i].clone(), self.model)
            .expect("dataset dims are validated")
    }

    pub fn expect_dims(&self, m: usize, k: usize) -> Result<(), DatasetError> {
        if self.m != m || self.k != k {
            return Err(DatasetError::DimensionMismatch(format!(
                "dataset is M={}, K={} but M={m}, K={k} was requested",
                self.m, self.k
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(&MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.push(DTYPE_C128);
        header.push(self.model.tag());
        header.extend_from_slice(&(self.m as u32).to_le_bytes());
        header.extend_from_slice(&(self.k as u32).to_le_bytes());
        header.extend_from_slice(&(self.channels.len() as u64).to_le_bytes());
        header.extend_from_slice(&self.seed.to_le_bytes());
        w.write_all(&header)?;
        for h in &self.channels {
            if h.shape() != (self.m, self.k) {
                return Err(DatasetError::DimensionMismatch(format!(
                    "channel of shape {:?} in a {}x{} dataset",
                    h.shape(),
                    self.m,
                    self.k
                )));
            }
            for i in 0..self.m {
                for j in 0..self.k {
                    let z = h[(i, j)];
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(DatasetError::VersionMismatch("bad magic".into()));
            }
            return Err(DatasetError::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if bytes[..4] != MAGIC {
            return Err(DatasetError::VersionMismatch("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if bytes[6] != DTYPE_C128 {
            return Err(DatasetError::VersionMismatch(format!(
                "unknown dtype {}",
                bytes[6]
            )));
        }
        let model = ChannelModel::from_tag(bytes[7]).ok_or_else(|| {
            DatasetError::VersionMismatch(format!("unknown channel model {}", bytes[7]))
        })?;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (m, k, count, seed) = (u32_at(8), u32_at(12), u64_at(16), u64_at(24));
        if m == 0 || k == 0 {
            return Err(DatasetError::DimensionMismatch(format!(
                "header declares M={m}, K={k}"
            )));
        }
        let per = (m as u64) * (k as u64) * 16;
        let expected = count
            .checked_mul(per)
            .and_then(|p| p.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| DatasetError::DimensionMismatch("payload size overflows".into()))?;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(DatasetError::Truncated { expected, found });
        }
        if found > expected {
            return Err(DatasetError::DimensionMismatch(format!(
                "{} trailing bytes after {count} channels of {m}x{k}",
                found - expected
            )));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let mut channels = Vec::with_capacity(count as usize);
        let mut off = HEADER_LEN;
        for _ in 0..count {
            let mut h = CMatrix::zeros(m, k);
            for i in 0..m {
                for j in 0..k {
                    h[(i, j)] = Complex64::new(f64_at(off), f64_at(off + 8));
                    off += 16;
                }
            }
            channels.push(h);
        }
        Ok(Self {
            model,
            m,
            k,
            seed,
            channels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(ds: &ChannelDataset) -> Vec<u8> {
        let mut v = Vec::new();
        ds.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = ChannelDataset::generate(ChannelModel::Rayleigh, 8, 3, 100, 42).unwrap();
        let back = ChannelDataset::from_bytes(&bytes(&ds)).unwrap();
        assert_eq!(ds.channels.len(), back.channels.len());
        for (a, b) in ds.channels.iter().zip(&back.channels) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_loads() {
        let ds = ChannelDataset::empty(ChannelModel::LosUla, 4, 2, 0);
        let back = ChannelDataset::from_bytes(&bytes(&ds)).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!((back.m, back.k, back.model), (4, 2, ChannelModel::LosUla));
    }

    #[test]
    fn corrupted_header_is_a_version_error() {
        let ds = ChannelDataset::generate(ChannelModel::Rayleigh, 2, 1, 3, 1).unwrap();
        let mut b = bytes(&ds);
        b[4] = 9;
        assert!(matches!(
            ChannelDataset::from_bytes(&b),
            Err(DatasetError::VersionMismatch(_))
        ));
        let mut b = bytes(&ds);
        b[0] = b'X';
        assert!(matches!(
            ChannelDataset::from_bytes(&b),
            Err(DatasetError::VersionMismatch(_))
        ));
    }

    #[test]
    fn truncation_and_dimension_errors_are_distinct() {
        let ds = ChannelDataset::generate(ChannelModel::Rayleigh, 2, 2, 3, 1).unwrap();
        let b = bytes(&ds);
        assert!(matches!(
            ChannelDataset::from_bytes(&b[..b.len() - 5]),
            Err(DatasetError::Truncated { .. })
        ));
        assert!(matches!(
            ChannelDataset::from_bytes(&b[..10]),
            Err(DatasetError::Truncated { .. })
        ));
        let mut longer = b.clone();
        longer.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            ChannelDataset::from_bytes(&longer),
            Err(DatasetError::DimensionMismatch(_))
        ));
        let back = ChannelDataset::from_bytes(&b).unwrap();
        assert!(matches!(
            back.expect_dims(3, 2),
            Err(DatasetError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn los_dataset_is_unit_modulus() {
        let ds = ChannelDataset::generate(ChannelModel::LosUla, 16, 2, 20, 5).unwrap();
        for h in &ds.channels {
            assert!(h.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        }
    }
}
