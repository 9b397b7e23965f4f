//! Synthetic forgery corpus, robustness distortions and the dataset container.

mod distort;
mod format;
mod synth;

pub use distort::{apply_distortion, bilinear_resize, dct8_quantize, jpeg_table, Distortion};
pub use format::{dataset_bytes, read_dataset, write_dataset, Dataset};
pub use synth::{gen_fake, gen_real, make_fake, Corpus, CorpusConfig, HfBand};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forgery family tag; NONE marks real images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    None = 0,
    Up = 1,
    Hf = 2,
    Cb = 3,
}

impl Family {
    pub const FAKES: [Family; 3] = [Family::Up, Family::Hf, Family::Cb];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::None),
            1 => Some(Self::Up),
            2 => Some(Self::Hf),
            3 => Some(Self::Cb),
            _ => None,
        }
    }

    /// Comma-separated fake families.
    pub fn parse_fakes(s: &str) -> Result<Vec<Family>> {
        let fams = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<Family>>>()?;
        if fams.is_empty() || fams.contains(&Family::None) {
            return Err(Error::Config(format!("expected a non-empty list of up, hf, cb; got {s:?}")));
        }
        Ok(fams)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Up => "up",
            Self::Hf => "hf",
            Self::Cb => "cb",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::None, Self::Up, Self::Hf, Self::Cb]
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown family {s:?}")))
    }
}

/// One labeled image or stack of planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: u8,
    pub family: Family,
    pub image: Tensor,
}

impl Sample {
    pub fn is_fake(&self) -> bool {
        self.label == 1
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stream, index)`.
pub fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream.wrapping_mul(0x1_0000_0001) ^ splitmix(index))))
}
