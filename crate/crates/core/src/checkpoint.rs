//! Binary checkpoint for encoder parameters and prototype groups.
//!
//! Layout, all integers `u32` and all reals `f64`, little-endian:
//!
//! ```text
//! "OTL1" | n_dims | dims[n_dims] | params[..]
//! n_groups | per group: group_id | mode | k | dim | tau | centers[k*dim]
//! ```
//!
//! A file that ends right after the encoder parameters holds no groups.
//! `mode` is 0 nonparametric, 1 parametric, 2 hybrid.

use std::fs;
use std::path::Path;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::prototypes::{PrototypeGroup, PrototypeMode};

pub const MAGIC: &[u8; 4] = b"OTL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub groups: Vec<PrototypeGroup>,
}

fn mode_code(mode: PrototypeMode) -> u32 {
    match mode {
        PrototypeMode::Nonparametric => 0,
        PrototypeMode::Parametric => 1,
        PrototypeMode::Hybrid => 2,
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(8 * self.encoder.len() + 64);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, self.encoder.dims().len())?;
        for &d in self.encoder.dims() {
            put_u32(&mut buf, d)?;
        }
        put_f64s(&mut buf, self.encoder.values());
        if self.groups.is_empty() {
            return Ok(buf);
        }
        put_u32(&mut buf, self.groups.len())?;
        for g in &self.groups {
            put_u32(&mut buf, g.group_id)?;
            put_u32(&mut buf, mode_code(g.mode) as usize)?;
            put_u32(&mut buf, g.k())?;
            put_u32(&mut buf, g.dim())?;
            put_f64s(&mut buf, &[g.tau]);
            put_f64s(&mut buf, g.centers.as_slice());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::ParseError {
                line: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let n_dims = r.u32()?;
        let dims = (0..n_dims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let values = r.f64s(n_params)?;
        let encoder = EncoderParams::from_values(&dims, values)?;
        let mut groups = Vec::new();
        if !r.done() {
            let n_groups = r.u32()?;
            for _ in 0..n_groups {
                let group_id = r.u32()?;
                let mode = match r.u32()? {
                    0 => PrototypeMode::Nonparametric,
                    1 => PrototypeMode::Parametric,
                    2 => PrototypeMode::Hybrid,
                    m => return Err(r.err(format!("unknown prototype mode {m}"))),
                };
                let k = r.u32()?;
                let dim = r.u32()?;
                let tau = r.f64s(1)?[0];
                let centers = Matrix::from_vec(k, dim, r.f64s(k * dim)?)?;
                groups.push(PrototypeGroup::new(centers, tau, mode, group_id)?);
            }
        }
        if !r.done() {
            return Err(r.err("trailing bytes".into()));
        }
        Ok(Self { encoder, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, msg: String) -> Error {
        Error::ParseError {
            line: 0,
            msg: format!("checkpoint offset {}: {msg}", self.pos),
        }
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.err("size overflow".into()))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let encoder = EncoderParams::xavier(&[5, 4, 3], &mut rng).unwrap();
        let centers = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]]).unwrap();
        let g = PrototypeGroup::new(centers, 0.05, PrototypeMode::Hybrid, 1).unwrap();
        Checkpoint {
            encoder,
            groups: vec![g],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn encoder_only_layout() {
        let mut ck = sample();
        ck.groups.clear();
        let bytes = ck.encode().unwrap();
        // magic + n_dims + 3 dims + (5*4+4 + 4*3+3) params
        assert_eq!(bytes.len(), 4 + 4 + 12 + 8 * 39);
        assert_eq!(&bytes[..4], b"OTL1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::ParseError { .. })));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = sample().encode().unwrap();
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
