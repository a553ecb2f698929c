//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "JEM1"                      magic
//! u32                         format version
//! u32 × 6                     D_img, d_w, d, N, N_q, vocab_size
//! 11 × (u64 len, f64 × len)   parameters in PARAM_NAMES order, row-major
//! u8                          bank quantized flag
//! u32                         bank rows
//! u64 len, f64 × len          bank centers, row-major
//! f64 × 4                     m_x, m_y, c_mult, r
//! u32 × 2                     q, acc_count
//! u64 × 3                     acc_violations_x, acc_violations_y, acc_triplets
//! u8                          invert_ratio
//! ```

use super::{CenterBank, ModelDims, ModelParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::training::MarginState;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"JEM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub bank: CenterBank,
    pub margins: MarginState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let d = self.params.dims();
        for v in [d.feat_dim, d.word_dim, d.embed_dim, d.n_classes, d.n_quant, d.vocab_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (_, t) in self.params.tensors() {
            put_array(&mut out, t.as_slice());
        }
        out.push(self.bank.quantized as u8);
        out.extend_from_slice(&(self.bank.len() as u32).to_le_bytes());
        put_array(&mut out, self.bank.centers.as_slice());
        let m = &self.margins;
        for v in [m.m_x, m.m_y, m.c_mult, m.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [m.q, m.acc_count] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [m.acc_violations_x, m.acc_violations_y, m.acc_triplets] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(m.invert_ratio as u8);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut h = [0usize; 6];
        for v in h.iter_mut() {
            *v = r.u32()? as usize;
        }
        let dims = ModelDims {
            feat_dim: h[0],
            word_dim: h[1],
            embed_dim: h[2],
            n_classes: h[3],
            n_quant: h[4],
            vocab_size: h[5],
        };
        let mut params = ModelParams::zeros(&dims);
        for ((name, t), expect) in params.tensors_mut().into_iter().zip(PARAM_NAMES) {
            debug_assert_eq!(name, expect);
            let data = r.array()?;
            if data.len() != t.as_slice().len() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.shape(),
                    got: (data.len(), 1),
                });
            }
            t.as_mut_slice().copy_from_slice(&data);
        }
        let quantized = r.u8()? != 0;
        let rows = r.u32()? as usize;
        let data = r.array()?;
        if rows == 0 || data.len() != rows * dims.embed_dim {
            return Err(Error::ShapeMismatch {
                name: "centers".into(),
                expected: (rows, dims.embed_dim),
                got: (data.len(), 1),
            });
        }
        let bank = CenterBank {
            centers: Matrix::from_vec(rows, dims.embed_dim, data)?,
            quantized,
        };
        let m_x = r.f64()?;
        let m_y = r.f64()?;
        let c_mult = r.f64()?;
        let rr = r.f64()?;
        let q = r.u32()?;
        let acc_count = r.u32()?;
        let margins = MarginState {
            m_x,
            m_y,
            c_mult,
            r: rr,
            q,
            acc_count,
            acc_violations_x: r.u64()?,
            acc_violations_y: r.u64()?,
            acc_triplets: r.u64()?,
            invert_ratio: r.u8()? != 0,
        };
        if r.pos != bytes.len() {
            return Err(Error::TruncatedFile(format!(
                "{origin}: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if !params.is_finite() || !bank.centers.is_finite() {
            return Err(Error::NonFiniteValue(0));
        }
        Ok(Self { params, bank, margins })
    }
}

fn put_array(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedFile(format!(
                "{}: wanted {n} bytes at offset {}",
                self.origin, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn array(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::TruncatedFile(format!(
                "{}: array of {n} values at offset {}",
                self.origin, self.pos
            )));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Writes the checkpoint to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let dims = ModelDims {
            feat_dim: 5,
            word_dim: 3,
            embed_dim: 4,
            n_classes: 6,
            n_quant: 2,
            vocab_size: 9,
        };
        let params = init_params(&dims, 11).unwrap();
        let bank = CenterBank::quantized(Matrix::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let mut margins = MarginState::default();
        margins.m_x = 0.206;
        margins.acc_count = 7;
        margins.acc_triplets = 224;
        margins.acc_violations_y = 100;
        Checkpoint { params, bank, margins }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), "mem").unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(!dir.path().join("a.ckpt.tmp").exists());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "m"),
            Err(Error::TruncatedFile(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long, "m"), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn header_is_documented_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"JEM1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let dims: Vec<u32> = (0..6)
            .map(|i| u32::from_le_bytes(b[8 + 4 * i..12 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![5, 3, 4, 6, 2, 9]);
        // first array is w_img, 5×4
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 20);
    }
}
