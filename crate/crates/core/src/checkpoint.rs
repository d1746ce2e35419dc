//! Binary checkpoint format.
//!
//! ```text
//! "FOCK1"
//! u32 entry count
//! per entry: u32 name length, name bytes, u32 rank, rank x u32 dims, f32 data
//! 32-byte config hash
//! ```
//!
//! Integers and floats are little-endian. The optimizer step is stored as the
//! entry `meta.step`: two f32 slots carrying the raw bits of its low and high
//! 32-bit halves.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 5] = b"FOCK1";
const STEP_ENTRY: &str = "meta.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub config_hash: [u8; 32],
    pub step: u64,
}

impl Checkpoint {
    pub fn from_store<F: Real>(store: &ParamStore<F>, config_hash: [u8; 32], step: u64) -> Self {
        let entries = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                Entry {
                    name: store.name(id).to_string(),
                    dims: vec![t.rows(), t.cols()],
                    data: t.data().iter().map(|x| x.f64() as f32).collect(),
                }
            })
            .collect();
        Self { entries, config_hash, step }
    }

    /// Copy every entry into the matching parameter; names and shapes must
    /// agree exactly.
    pub fn apply_to<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store
                .find(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{}`", e.name)))?;
            let shape = store.get(id).shape();
            if e.dims != [shape.0, shape.1] {
                return Err(Error::Checkpoint(format!("`{}` has dims {:?}, model expects {:?}", e.name, e.dims, shape)));
            }
            let data = e.data.iter().map(|&x| F::of(f64::from(x))).collect();
            store.set(id, Tensor::from_vec(shape.0, shape.1, data));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let u32le = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u32).to_le_bytes());
        u32le(&mut out, self.entries.len() + 1);
        let step = Entry {
            name: STEP_ENTRY.into(),
            dims: vec![2],
            data: vec![f32::from_bits(self.step as u32), f32::from_bits((self.step >> 32) as u32)],
        };
        for e in self.entries.iter().chain(std::iter::once(&step)) {
            u32le(&mut out, e.name.len());
            out.extend_from_slice(e.name.as_bytes());
            u32le(&mut out, e.dims.len());
            for &d in &e.dims {
                u32le(&mut out, d);
            }
            for x in &e.data {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        let mut step = None;
        for _ in 0..count {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("dims overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("dims overflow".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
            if name == STEP_ENTRY {
                if data.len() != 2 {
                    return Err(Error::Checkpoint("malformed step entry".into()));
                }
                step = Some(u64::from(data[0].to_bits()) | (u64::from(data[1].to_bits()) << 32));
            } else {
                entries.push(Entry { name, dims, data });
            }
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after config hash".into()));
        }
        let step = step.ok_or_else(|| Error::Checkpoint("missing step entry".into()))?;
        Ok(Self { entries, config_hash, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Load and check the config hash. A mismatch is an error unless `force`.
    pub fn load(path: &Path, expected_hash: Option<[u8; 32]>, force: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        if let Some(h) = expected_hash {
            if h != ckpt.config_hash {
                if !force {
                    return Err(Error::Checkpoint(format!("{} was trained with a different config", path.display())));
                }
                log::warn!("config hash mismatch for {}, loading anyway", path.display());
            }
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::from_vec(2, 3, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]));
        store.add("b", Tensor::from_vec(1, 1, vec![0.1]));
        Checkpoint::from_store(&store, [7; 32], (1u64 << 40) + 12345)
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..5], b"FOCK1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, c.step);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_or_mismatched_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load(&path, Some([0; 32]), false).is_err());
        assert!(Checkpoint::load(&path, Some([0; 32]), true).is_ok());
        assert!(Checkpoint::load(&path, Some([7; 32]), false).is_ok());
    }

    #[test]
    fn apply_checks_names_and_shapes() {
        let c = sample();
        let mut store = ParamStore::<f64>::new();
        store.add("a.w", Tensor::zeros(2, 3));
        store.add("b", Tensor::zeros(1, 1));
        c.apply_to(&mut store).unwrap();
        assert_eq!(store.get(store.find("a.w").unwrap()).get(1, 0), 3.5);
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("a.w", Tensor::zeros(3, 2));
        wrong.add("b", Tensor::zeros(1, 1));
        assert!(c.apply_to(&mut wrong).is_err());
    }
}
