//! Binary checkpoints: `SCPR1`, a manifest of `(name, dtype, shape)` records,
//! then little-endian f32 payloads in manifest order.
//!
//! Manifest layout: `u32` record count, then per record a `u32` name length,
//! the UTF-8 name, a `u8` dtype tag (0 = f32), a `u32` rank and `u64` extents.

use std::fs;
use std::path::Path;

use super::adamw::AdamState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 5] = b"SCPR1";
const DTYPE_F32: u8 = 0;
const STEP_NAME: &str = "opt.step";

/// Named tensors in checkpoint order: parameters, then `opt.m.*`, `opt.v.*`
/// and the step counter.
pub fn checkpoint_entries<T: Real>(store: &ParamStore<T>, opt: &AdamState<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
    for (prefix, moments) in [("opt.m.", &opt.m), ("opt.v.", &opt.v)] {
        for ((_, p), t) in store.iter().zip(moments) {
            out.push((format!("{prefix}{}", p.name), t.clone()));
        }
    }
    let lo = (opt.step & 0xffff) as f64;
    let hi = (opt.step >> 16) as f64;
    out.push((STEP_NAME.into(), Tensor::new(vec![2], vec![T::lit(lo), T::lit(hi)]).expect("two values")));
    out
}

pub fn encode(entries: &[(String, Tensor<impl Real>)]) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    buf.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend((name.len() as u32).to_le_bytes());
        buf.extend(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend((d as u64).to_le_bytes());
        }
    }
    for (_, t) in entries {
        for x in t.data() {
            buf.extend((x.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint of this version".into()));
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let n = r.u32()? as usize;
    let mut manifest = Vec::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut out = Vec::with_capacity(n);
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let bytes = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>, opt: &AdamState<T>) -> Result<()> {
    fs::write(path, encode(&checkpoint_entries(store, opt)))?;
    Ok(())
}

/// Loads tensors into an already-built store of the same architecture.
/// The first tensor whose name, order or shape differs is reported.
pub fn load_checkpoint<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<AdamState<T>> {
    let entries = decode::<T>(&fs::read(path)?)?;
    let mut opt = AdamState::new(store);
    let expected = checkpoint_entries(store, &opt);
    for (i, (name, t)) in expected.iter().enumerate() {
        let Some((got, gt)) = entries.get(i) else {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: "missing from checkpoint".into(),
            });
        };
        if got != name {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: format!("checkpoint has `{got}` in its place"),
            });
        }
        if gt.shape() != t.shape() {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: format!("shape {:?} in checkpoint, {:?} in model", gt.shape(), t.shape()),
            });
        }
    }
    if let Some((extra, _)) = entries.get(expected.len()) {
        return Err(Error::CheckpointMismatch {
            name: extra.clone(),
            detail: "not present in the model".into(),
        });
    }
    let np = store.len();
    let ids: Vec<_> = store.ids().collect();
    let mut it = entries.into_iter().map(|(_, t)| t);
    for id in ids {
        store.get_mut(id).tensor = it.next().expect("length checked");
    }
    for i in 0..np {
        opt.m[i] = it.next().expect("length checked");
    }
    for i in 0..np {
        opt.v[i] = it.next().expect("length checked");
    }
    let step = it.next().expect("length checked");
    opt.step = step.data()[0].as_f64() as u64 + ((step.data()[1].as_f64() as u64) << 16);
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store(extra: bool) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        s.insert_normal("a", &[3, 2], 1.0, &mut rng).unwrap();
        s.insert_normal("b", &[4], 1.0, &mut rng).unwrap();
        if extra {
            s.insert_normal("c", &[1], 1.0, &mut rng).unwrap();
        }
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(false);
        let mut opt = AdamState::new(&s);
        opt.step = 70_001;
        opt.m[0].data_mut()[1] = 0.25;
        let (p1, p2) = (dir.path().join("1.ckpt"), dir.path().join("2.ckpt"));
        save_checkpoint(&p1, &s, &opt).unwrap();
        let mut s2 = store(false);
        s2.get_mut(s2.id("a").unwrap()).tensor.data_mut()[0] = 9.0;
        let opt2 = load_checkpoint(&p1, &mut s2).unwrap();
        assert_eq!(opt2, opt);
        save_checkpoint(&p2, &s2, &opt2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatch_names_first_bad_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let s = store(false);
        save_checkpoint(&p, &s, &AdamState::new(&s)).unwrap();
        let mut bigger = store(true);
        let err = load_checkpoint(&p, &mut bigger).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch { ref name, .. } if name == "c"), "{err}");
        let mut other = ParamStore::<f32>::new();
        other.insert("a", Tensor::zeros(&[2, 3])).unwrap();
        other.insert("b", Tensor::zeros(&[4])).unwrap();
        let err = load_checkpoint(&p, &mut other).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch { ref name, .. } if name == "a"), "{err}");
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let s = store(false);
        save_checkpoint(&p, &s, &AdamState::new(&s)).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut s2 = store(false);
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p, &mut s2), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = b'9';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p, &mut s2), Err(Error::Format(_))));
    }
}
