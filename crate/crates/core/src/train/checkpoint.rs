//! Named-tensor archive: `ALEI`, u16 version, u32 count, then per entry a
//! u16-length UTF-8 name, u8 dtype, u8 rank, u32 dims and the little-endian
//! payload.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Real, Tensor};
use crate::wire::Reader;

const MAGIC: &[u8; 4] = b"ALEI";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint { entries: Vec::new() }
    }
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of the parameters whose names satisfy `select`, in store order.
    pub fn from_store(store: &ParamStore<T>, select: impl Fn(&str) -> bool) -> Self {
        let entries = store
            .iter()
            .filter(|(_, p)| select(&p.name))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn filter(&self, select: impl Fn(&str) -> bool) -> Self {
        Checkpoint { entries: self.entries.iter().filter(|(n, _)| select(n)).cloned().collect() }
    }

    pub fn merge(&mut self, other: &Checkpoint<T>) {
        for (n, t) in &other.entries {
            match self.entries.iter_mut().find(|(m, _)| m == n) {
                Some(slot) => slot.1 = t.clone(),
                None => self.entries.push((n.clone(), t.clone())),
            }
        }
    }

    /// Copies every entry into `store`. Names the store lacks are reported
    /// together; shape mismatches are dimension errors. Returns entries loaded.
    pub fn load_into(&self, store: &mut ParamStore<T>) -> Result<usize> {
        let unknown: Vec<String> = self.entries.iter().filter(|(n, _)| store.id(n).is_none()).map(|(n, _)| n.clone()).collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownParams(unknown));
        }
        for (n, t) in &self.entries {
            let id = store.id(n).unwrap();
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Dimension(format!("{n}: checkpoint shape {:?}, model shape {:?}", t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(self.entries.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let n = u32::try_from(self.entries.len()).map_err(|_| Error::Config("too many entries".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        let mut seen = BTreeSet::new();
        for (name, t) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate checkpoint entry {name}")));
            }
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE as u8);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Dimension(format!("{name}: rank {}", t.rank())))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("{name}: extent {d}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                match T::DTYPE {
                    DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected ALEI"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let at = r.pos as u64;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at + 2, "entry name is not UTF-8"))?
                .to_string();
            let at = r.pos as u64;
            let dtype = r.u8()?;
            if dtype != T::DTYPE as u8 {
                return Err(Error::format(at, format!("{name}: dtype {dtype}, expected {}", T::DTYPE as u8)));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let data: Vec<T> = match T::DTYPE {
                DType::F32 => r.take(4 * count)?.chunks_exact(4).map(|q| T::c(f32::from_le_bytes(q.try_into().unwrap()) as f64)).collect(),
                DType::F64 => r.take(8 * count)?.chunks_exact(8).map(|q| T::c(f64::from_le_bytes(q.try_into().unwrap()))).collect(),
            };
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos as u64, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_fn([2, 3], |i| (i as f32 * 0.37).sin()), true).unwrap();
        s.insert("a.b", Tensor::new([1], vec![-0.0]).unwrap(), false).unwrap();
        s.insert("c", Tensor::new([1], vec![f32::MIN_POSITIVE / 2.0]).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let ck = Checkpoint::from_store(&s, |_| true);
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.entries.len(), 3);
        for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
        let mut fresh = store();
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.get_mut(id).value = Tensor::zeros(fresh.get(id).value.shape().to_vec());
        }
        back.load_into(&mut fresh).unwrap();
        assert!(fresh.value("a.b").unwrap().bit_eq(s.value("a.b").unwrap()));
    }

    #[test]
    fn layout_and_sizes() {
        let ck = Checkpoint { entries: vec![("xy".to_string(), Tensor::<f32>::zeros([2, 2]))] };
        let b = ck.to_bytes().unwrap();
        assert_eq!(&b[..4], b"ALEI");
        assert_eq!(b.len(), 4 + 2 + 4 + 2 + 2 + 1 + 1 + 8 + 16);
        let ck64 = Checkpoint { entries: vec![("xy".to_string(), Tensor::<f64>::zeros([2, 2]))] };
        assert_eq!(ck64.to_bytes().unwrap().len(), b.len() + 16);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&ck64.to_bytes().unwrap()), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_names_are_listed() {
        let ck = Checkpoint { entries: vec![("zz".into(), Tensor::<f32>::zeros([1])), ("yy".into(), Tensor::zeros([1]))] };
        let mut s = store();
        match ck.load_into(&mut s) {
            Err(Error::UnknownParams(v)) => assert_eq!(v, vec!["zz".to_string(), "yy".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_inputs_name_offsets() {
        let b = Checkpoint::from_store(&store(), |_| true).to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &b[..b.len() - 3];
        assert!(matches!(Checkpoint::<f32>::from_bytes(cut), Err(Error::Format { offset, .. }) if offset == cut.len() as u64));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&long), Err(Error::Format { offset, .. }) if offset == b.len() as u64));
    }
}
