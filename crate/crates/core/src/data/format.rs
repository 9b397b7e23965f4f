use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Family, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::Reader;

const MAGIC: &[u8; 4] = b"ALDS";
const VERSION: u16 = 1;
const HEADER: usize = 11;
const RECORD_HEADER: usize = 8;

/// In-memory dataset container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Exact file size for a set of record shapes.
pub fn dataset_bytes(records: impl IntoIterator<Item = usize>) -> usize {
    HEADER + records.into_iter().map(|n| RECORD_HEADER + 4 * n).sum::<usize>()
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(dataset_bytes(self.samples.iter().map(|s| s.image.len())));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(0);
        let n = u32::try_from(self.samples.len()).map_err(|_| Error::Config("too many samples".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        for s in &self.samples {
            let sh = s.image.shape();
            if sh.len() != 3 || sh.iter().any(|&d| d > u16::MAX as usize) {
                return Err(Error::Dimension(format!("record shape {sh:?} does not fit the container")));
            }
            out.push(s.label);
            out.push(s.family as u8);
            for &d in sh {
                out.extend_from_slice(&(d as u16).to_le_bytes());
            }
            for &v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected ALDS".into() });
        }
        let at = r.pos;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format { offset: at as u64, msg: format!("unsupported version {version}") });
        }
        r.take(1)?;
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let at = r.pos;
            let label = r.u8()?;
            let fam = r.u8()?;
            let family = Family::from_u8(fam)
                .ok_or_else(|| Error::Format { offset: at as u64 + 1, msg: format!("record {i}: unknown family {fam}") })?;
            if label > 1 || (label == 0) != (family == Family::None) {
                return Err(Error::Format {
                    offset: at as u64,
                    msg: format!("record {i}: label {label} inconsistent with family {family}"),
                });
            }
            let (c, h, w) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
            let raw = r.take(4 * c * h * w)?;
            let data = raw.chunks_exact(4).map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]])).collect();
            samples.push(Sample { label, family, image: Tensor::new([c, h, w], data)? });
        }
        if r.pos != b.len() {
            return Err(Error::Format { offset: r.pos as u64, msg: format!("{} trailing bytes", b.len() - r.pos) });
        }
        Ok(Dataset { samples })
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let bytes = ds.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}
