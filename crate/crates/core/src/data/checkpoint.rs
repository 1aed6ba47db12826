//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "KCMCKPT1"
//! version      u32       1
//! layers       u32
//! per layer:   rows u32, cols u32, rows·cols f64 weights (row-major), rows f64 bias
//! seeds        4 × u64   init, shuffle, mixup, kernel
//! norm_len     u32       0 when the inputs were not normalized
//! mean         norm_len × f64
//! scale        norm_len × f64
//! ```

use std::path::Path;

use super::{io::write_atomic, DataError, Normalization};
use crate::model::{Layer, MlpParams};
use crate::rng::SeedBundle;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KCMCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub seeds: SeedBundle,
    pub normalization: Option<Normalization>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let layers = self.params.layers();
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for l in layers {
            let (rows, cols) = l.weight.dims2("checkpoint").expect("2-d weight");
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in l.weight.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let s = &self.seeds;
        for v in [s.init, s.shuffle, s.mixup, s.kernel] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.normalization {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(n) => {
                out.extend_from_slice(&(n.dim() as u32).to_le_bytes());
                for v in n.mean.iter().chain(&n.scale) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(DataError::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(DataError::Format {
                offset: 8,
                reason: format!("unsupported version {version}"),
            });
        }
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 {
            return Err(r.error("zero layers"));
        }
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let weight = r.f64s(rows * cols, "weights")?;
            let bias = r.f64s(rows, "bias")?;
            layers.push(Layer {
                weight: Tensor::matrix(rows, cols, weight).expect("sized read"),
                bias: Tensor::vector(bias),
            });
        }
        let params = MlpParams::new(layers).map_err(|e| r.error(&e.to_string()))?;
        let seeds = SeedBundle {
            init: r.u64("seed")?,
            shuffle: r.u64("seed")?,
            mixup: r.u64("seed")?,
            kernel: r.u64("seed")?,
        };
        let norm_len = r.u32("normalization length")? as usize;
        let normalization = if norm_len == 0 {
            None
        } else {
            Some(Normalization {
                mean: r.f64s(norm_len, "normalization mean")?,
                scale: r.f64s(norm_len, "normalization scale")?,
            })
        };
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self {
            params,
            seeds,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> DataError {
        DataError::Format {
            offset: self.pos as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(&format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, DataError> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.error(&format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: MlpParams::he_init(&[2, 5, 3, 1], &mut stream(4)).unwrap(),
            seeds: SeedBundle::from_master(12),
            normalization: Some(Normalization {
                mean: vec![0.5, -0.25],
                scale: vec![2.0, 0.1],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        sample().save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupted_header_rejected() {
        let mut bytes = sample().encode();
        bytes[3] ^= 0xff;
        assert!(matches!(Checkpoint::decode(&bytes), Err(DataError::Format { offset: 0, .. })));
        let mut bytes = sample().encode();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(DataError::Format { offset: 8, .. })));
    }

    #[test]
    fn truncation_rejected_at_every_length() {
        let bytes = sample().encode();
        for len in 0..bytes.len() {
            assert!(
                matches!(Checkpoint::decode(&bytes[..len]), Err(DataError::Format { .. })),
                "len {len}"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::decode(&longer).is_err());
    }

    #[test]
    fn absent_normalization_round_trips() {
        let mut ck = sample();
        ck.normalization = None;
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }
}
