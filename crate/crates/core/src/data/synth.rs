use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{sample_rng, Family, Sample};
use crate::error::{Error, Result};
use crate::extract::gaussian_blur;
use crate::tensor::Tensor;

/// Shape of the replaced high-frequency band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfBand {
    /// `max(|fx|, |fy|)` in the top quarter of `[0, 1/2]`.
    Chebyshev,
    /// `|f|` in the top quarter of `[0, √2/2]`.
    Radial,
}

impl HfBand {
    pub fn name(self) -> &'static str {
        match self {
            HfBand::Chebyshev => "chebyshev",
            HfBand::Radial => "radial",
        }
    }
}

impl std::str::FromStr for HfBand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "chebyshev" => Ok(HfBand::Chebyshev),
            "radial" => Ok(HfBand::Radial),
            o => Err(Error::Config(format!("hf band must be chebyshev or radial, got {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub hf_band: HfBand,
    /// Band amplitude relative to the source band's RMS spectral amplitude.
    pub hf_gain: f64,
    /// Floor on the reference amplitude, as a fraction of the RMS amplitude of
    /// the whole non-DC spectrum.
    pub hf_floor: f64,
    pub cb_amp: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            size: 32,
            sigma_min: 0.5,
            sigma_max: 2.0,
            hf_band: HfBand::Chebyshev,
            hf_gain: 2.0,
            hf_floor: 0.1,
            cb_amp: 0.06,
        }
    }
}

const STREAM_REAL: u64 = 0;
const STREAM_FAKE: u64 = 1;

fn real_image(rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> Tensor {
    let s = cfg.size;
    let mut out = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        let sigma = rng.random_range(cfg.sigma_min..=cfg.sigma_max);
        let noise = Tensor::from_fn([1, s, s], |_| rng.sample::<f32, _>(StandardNormal));
        let blurred = gaussian_blur(&noise, sigma).expect("positive sigma");
        let (lo, hi) = blurred.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(f32::MIN_POSITIVE);
        out.extend(blurred.data().iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)));
    }
    Tensor::new([3, s, s], out).unwrap()
}

/// `n` band-limited Gaussian fields in `[0, 1]`.
pub fn gen_real(seed: u64, n: usize, cfg: &CorpusConfig) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, STREAM_REAL, i as u64);
            Sample { label: 0, family: Family::None, image: real_image(&mut rng, cfg) }
        })
        .collect()
}

/// `n` fakes of one family, each built from fresh real content.
pub fn gen_fake(seed: u64, n: usize, family: Family, cfg: &CorpusConfig) -> Result<Vec<Sample>> {
    if family == Family::None {
        return Err(Error::Config("fake family must be one of up, hf, cb".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, STREAM_FAKE + family as u64, i as u64);
            let src = real_image(&mut rng, cfg);
            Ok(Sample { label: 1, family, image: make_fake(&src, family, &mut rng, cfg)? })
        })
        .collect()
}

/// Applies one family's forgery trace to `img` and clamps to `[0, 1]`.
pub fn make_fake(img: &Tensor, family: Family, rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(Error::Dimension(format!("fakes need a C×H×W image with even extents, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = match family {
        Family::None => return Err(Error::Config("NONE is not a fake family".into())),
        Family::Up => {
            let d = img.data();
            Tensor::from_fn([c, h, w], |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                let (by, bx) = (y / 2 * 2, x / 2 * 2);
                let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                (at(by, bx) + at(by, bx + 1) + at(by + 1, bx) + at(by + 1, bx + 1)) * 0.25
            })
        }
        Family::Hf => replace_high_band(img, rng, cfg),
        Family::Cb => {
            let d = img.data();
            Tensor::from_fn([c, h, w], |i| {
                let (y, x) = ((i / w) % h, i % w);
                let sign = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
                d[i] + cfg.cb_amp * sign
            })
        }
    };
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (fr, fc) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_mut(w) {
        fr.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fc.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    if inverse {
        let k = 1.0 / (h * w) as f64;
        for v in data.iter_mut() {
            *v *= k;
        }
    }
}

fn freq(i: usize, n: usize) -> f64 {
    let i = i as f64;
    let n = n as f64;
    if i <= n / 2.0 {
        i / n
    } else {
        (i - n) / n
    }
}

fn in_band(y: usize, x: usize, h: usize, w: usize, band: HfBand) -> bool {
    let (fy, fx) = (freq(y, h).abs(), freq(x, w).abs());
    match band {
        HfBand::Chebyshev => fy.max(fx) >= 0.375,
        HfBand::Radial => (fy * fy + fx * fx).sqrt() >= 0.75 * 0.5f64.sqrt(),
    }
}

fn replace_high_band(img: &Tensor, rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let mut x: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        fft2(&mut x, h, w, false);
        let mut noise: Vec<Complex<f64>> = (0..h * w).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
        fft2(&mut noise, h, w, false);
        let (mut band_p, mut band_n, mut all_p, mut count, mut all_count) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if i != 0 {
                    all_p += x[i].norm_sqr();
                    all_count += 1;
                }
                if in_band(y, xx, h, w, cfg.hf_band) {
                    band_p += x[i].norm_sqr();
                    band_n += noise[i].norm_sqr();
                    count += 1;
                }
            }
        }
        let band_rms = (band_p / count as f64).sqrt();
        let floor = cfg.hf_floor * (all_p / all_count as f64).sqrt();
        let target = cfg.hf_gain * band_rms.max(floor);
        let scale = target / (band_n / count as f64).sqrt();
        for y in 0..h {
            for xx in 0..w {
                if in_band(y, xx, h, w, cfg.hf_band) {
                    x[y * w + xx] = noise[y * w + xx] * scale;
                }
            }
        }
        fft2(&mut x, h, w, true);
        out.extend(x.iter().map(|v| v.re as f32));
    }
    Tensor::new([c, h, w], out).unwrap()
}

/// Train split (reals plus fakes of the training families) and per-family
/// test benches.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub tests: Vec<(Family, Vec<Sample>)>,
}

impl Corpus {
    /// Builds a balanced train split over `train_families` and a balanced
    /// bench of `n_test` per test family. Test seeds are disjoint from train.
    pub fn generate(
        seed: u64,
        n_train: usize,
        train_families: &[Family],
        n_test: usize,
        test_families: &[Family],
        cfg: &CorpusConfig,
    ) -> Result<Self> {
        let half = n_train / 2;
        let mut train = gen_real(seed, half, cfg);
        let per = half / train_families.len().max(1);
        for (k, &f) in train_families.iter().enumerate() {
            let extra = if k == 0 { half - per * train_families.len() } else { 0 };
            train.extend(gen_fake(seed, per + extra, f, cfg)?);
        }
        let test_seed = seed ^ 0x7e57_7e57_7e57_7e57;
        let mut tests = Vec::new();
        for (k, &f) in test_families.iter().enumerate() {
            let bench_seed = test_seed.wrapping_add(k as u64 * 0x1000);
            let mut bench = gen_real(bench_seed, n_test / 2, cfg);
            bench.extend(gen_fake(bench_seed, n_test - n_test / 2, f, cfg)?);
            tests.push((f, bench));
        }
        Ok(Corpus { train, tests })
    }
}
