//! Little-endian checkpoint files.
//!
//! ```text
//! magic    b"GLCK"
//! version  u32            (1)
//! dtype    u8             (1 = f32, 2 = f64)
//! spec     u64            network spec hash
//! meta     u32 len, UTF-8 text
//! count    u32
//! count x  name: u16 len, UTF-8 | rank: u8 | dims: u32 x rank | values: dtype x prod(dims)
//! ```

use std::path::Path;

use super::model::ParameterSet;
use super::tensor::{Scalar, Tensor};
use super::NnError;

pub const MAGIC: &[u8; 4] = b"GLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub spec_hash: u64,
    /// Free-form text (the trainer stores resume state here).
    pub meta: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(spec_hash: u64, meta: String) -> Self {
        Self { spec_hash, meta, tensors: Vec::new() }
    }

    /// Appends every parameter as `prefix/name`.
    pub fn add_params(&mut self, prefix: &str, p: &ParameterSet<T>) {
        for (n, t) in p.names().iter().zip(p.values()) {
            self.tensors.push((format!("{prefix}/{n}"), t.clone()));
        }
    }

    pub fn add_tensors(&mut self, prefix: &str, names: &[String], ts: &[Tensor<T>]) {
        for (n, t) in names.iter().zip(ts) {
            self.tensors.push((format!("{prefix}/{n}"), t.clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites `p` from `prefix/name` entries; shapes must match.
    pub fn load_params(&self, prefix: &str, p: &mut ParameterSet<T>) -> Result<(), NnError> {
        let names: Vec<String> = p.names().to_vec();
        for (i, n) in names.iter().enumerate() {
            let key = format!("{prefix}/{n}");
            let t = self.tensor(&key).ok_or_else(|| NnError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape != p.values()[i].shape {
                return Err(NnError::Checkpoint(format!("{key}: shape {:?} vs {:?}", t.shape, p.values()[i].shape)));
            }
            p.values_mut()[i] = t.clone();
        }
        Ok(())
    }

    pub fn load_tensors(&self, prefix: &str, names: &[String], out: &mut [Tensor<T>]) -> Result<(), NnError> {
        for (n, slot) in names.iter().zip(out.iter_mut()) {
            let key = format!("{prefix}/{n}");
            let t = self.tensor(&key).ok_or_else(|| NnError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape != slot.shape {
                return Err(NnError::Checkpoint(format!("{key}: shape mismatch")));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(NnError::Checkpoint(format!("dtype tag {dtype}, expected {}", T::DTYPE)));
        }
        let spec_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| NnError::Checkpoint("meta not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| NnError::Checkpoint("name not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES)?;
            let data = raw.chunks(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { spec_hash, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.b.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::init_params;
    use crate::nn::spec::arch_preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = arch_preset(32, 1).unwrap();
        let p: ParameterSet<f32> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ck = Checkpoint::new(spec.hash(), "step = 7\n".into());
        ck.add_params("policy", &p);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut q: ParameterSet<f32> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        back.load_params("policy", &mut q).unwrap();
        assert_eq!(q.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::<f32>::new(1, String::new());
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        let ok = Checkpoint::<f32>::new(1, String::new()).to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&ok[..ok.len() - 1]).is_err());
    }

    #[test]
    fn header_layout() {
        let b = Checkpoint::<f32>::new(0x0102_0304_0506_0708, "m".into()).to_bytes();
        assert_eq!(&b[0..4], b"GLCK");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(&b[9..17], &[8, 7, 6, 5, 4, 3, 2, 1]);
    }
}
