//! Low-level information planes derived from an RGB image.
//!
//! Every residual is evaluated in differencing form, `Σ kᵢ (xᵢ - x_c)` for a
//! zero-sum kernel, so constant images map to exactly zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExtractorKind {
    Image,
    Srm,
    Npr,
    Bayar,
    Hpr,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 5] = [Self::Image, Self::Srm, Self::Npr, Self::Bayar, Self::Hpr];

    pub fn name(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Srm => "srm",
            Self::Npr => "npr",
            Self::Bayar => "bayar",
            Self::Hpr => "hpr",
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown extractor kind {s:?}")))
    }
}

/// Parses a comma-separated list and checks it names IMAGE exactly once and
/// at least one distinct low-level kind.
pub fn parse_kinds(s: &str) -> Result<Vec<ExtractorKind>> {
    let kinds = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
    validate_kinds(&kinds)?;
    Ok(kinds)
}

pub fn validate_kinds(kinds: &[ExtractorKind]) -> Result<()> {
    let images = kinds.iter().filter(|&&k| k == ExtractorKind::Image).count();
    if images != 1 {
        return Err(Error::Config(format!("kinds must list image exactly once, got {images}")));
    }
    if kinds.len() < 2 {
        return Err(Error::Config("kinds need at least one low-level extractor".into()));
    }
    let mut sorted = kinds.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != kinds.len() {
        return Err(Error::Config("kinds must be distinct".into()));
    }
    Ok(())
}

pub fn kinds_to_string(kinds: &[ExtractorKind]) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

/// Per-channel SRM residual kernels: horizontal second difference, 3×3
/// second order, 5×5 SQUARE.
pub fn srm_kernels() -> [[[f32; 5]; 5]; 3] {
    let mut k = [[[0f32; 5]; 5]; 3];
    k[0][2][1] = 0.5;
    k[0][2][2] = -1.0;
    k[0][2][3] = 0.5;
    let k3 = [[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]];
    for y in 0..3 {
        for x in 0..3 {
            k[1][y + 1][x + 1] = k3[y][x] / 4.0;
        }
    }
    let sq = [
        [-1.0, 2.0, -2.0, 2.0, -1.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-2.0, 8.0, -12.0, 8.0, -2.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-1.0, 2.0, -2.0, 2.0, -1.0],
    ];
    for y in 0..5 {
        for x in 0..5 {
            k[2][y][x] = sq[y][x] / 12.0;
        }
    }
    k
}

/// Reflection about the edge samples (`d c b | a b c d | c b a`), folded as
/// often as needed.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn check_image(img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected a 3×H×W image, got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// `out[c] = Σ k[dy][dx] · (x[c, y+dy-r, x+dx-r] - x[c, y, x])` with reflection.
fn zero_sum_filter(plane: &[f32], h: usize, w: usize, k: &[f32], size: usize, out: &mut [f32]) {
    let r = (size / 2) as isize;
    let taps: Vec<(isize, isize, f32)> = (0..size)
        .flat_map(|dy| (0..size).map(move |dx| (dy, dx)))
        .filter_map(|(dy, dx)| {
            let v = k[dy * size + dx];
            (v != 0.0 && !(dy as isize == r && dx as isize == r)).then_some((dy as isize - r, dx as isize - r, v))
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let c = plane[y * w + x];
            let mut acc = 0f32;
            for &(dy, dx, v) in &taps {
                let yy = reflect(y as isize + dy, h);
                let xx = reflect(x as isize + dx, w);
                acc += v * (plane[yy * w + xx] - c);
            }
            out[y * w + x] = acc;
        }
    }
}

pub fn extract_srm(img: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if h < 5 || w < 5 {
        return Err(Error::Dimension(format!("SRM needs at least 5×5, got {h}×{w}")));
    }
    let ks = srm_kernels();
    let mut out = Tensor::zeros([3, h, w]);
    for c in 0..3 {
        let flat: Vec<f32> = ks[c].iter().flatten().copied().collect();
        zero_sum_filter(&img.data()[c * h * w..(c + 1) * h * w], h, w, &flat, 5, &mut out.data_mut()[c * h * w..(c + 1) * h * w]);
    }
    Ok(out)
}

/// `img - nearest_up(avg_down(img, f), f)`.
pub fn extract_npr(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!("NPR factor {factor} does not divide {h}×{w}")));
    }
    let inv = 1.0 / (factor * factor) as f32;
    let d = img.data();
    let mut out = Tensor::zeros([3, h, w]);
    let o = out.data_mut();
    for c in 0..3 {
        let base = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let (by, bx) = (y / factor * factor, x / factor * factor);
                let v = d[base + y * w + x];
                let mut acc = 0f32;
                for yy in by..by + factor {
                    for xx in bx..bx + factor {
                        acc += v - d[base + yy * w + xx];
                    }
                }
                o[base + y * w + x] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub const BAYAR_SIZE: usize = 5;
const BAYAR_TOL: f64 = 1e-6;

/// Re-imposes the constrained-convolution form: center −1, off-center taps
/// rescaled to sum to 1. An all-zero off-center set becomes uniform.
pub fn project_bayar(k: &mut Tensor) -> Result<()> {
    if k.shape() != [BAYAR_SIZE, BAYAR_SIZE] {
        return Err(Error::Dimension(format!("Bayar kernel must be 5×5, got {:?}", k.shape())));
    }
    let center = BAYAR_SIZE * BAYAR_SIZE / 2;
    let d = k.data_mut();
    let s: f64 = d.iter().enumerate().filter(|&(i, _)| i != center).map(|(_, &v)| v as f64).sum();
    let n_off = (d.len() - 1) as f64;
    for (i, v) in d.iter_mut().enumerate() {
        if i != center {
            *v = if s.abs() < 1e-12 { (1.0 / n_off) as f32 } else { (*v as f64 / s) as f32 };
        }
    }
    d[center] = -1.0;
    Ok(())
}

fn check_bayar(k: &Tensor) -> Result<()> {
    if k.shape() != [BAYAR_SIZE, BAYAR_SIZE] {
        return Err(Error::Dimension(format!("Bayar kernel must be 5×5, got {:?}", k.shape())));
    }
    let center = BAYAR_SIZE * BAYAR_SIZE / 2;
    let c = k.data()[center] as f64;
    let off: f64 = k.data().iter().enumerate().filter(|&(i, _)| i != center).map(|(_, &v)| v as f64).sum();
    if (c + 1.0).abs() > BAYAR_TOL || (off - 1.0).abs() > BAYAR_TOL {
        return Err(Error::Contract(format!("Bayar constraint violated: center {c}, off-center sum {off}")));
    }
    Ok(())
}

/// Four nearest neighbours at 1/4 each around a −1 center.
pub fn bayar_cross() -> Tensor {
    let mut k = Tensor::zeros([BAYAR_SIZE, BAYAR_SIZE]);
    for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
        k.data_mut()[y * BAYAR_SIZE + x] = 0.25;
    }
    k.data_mut()[12] = -1.0;
    k
}

pub fn extract_bayar(img: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    check_bayar(kernel)?;
    let mut out = Tensor::zeros([3, h, w]);
    for c in 0..3 {
        zero_sum_filter(
            &img.data()[c * h * w..(c + 1) * h * w],
            h,
            w,
            kernel.data(),
            BAYAR_SIZE,
            &mut out.data_mut()[c * h * w..(c + 1) * h * w],
        );
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflection padding, applied per plane.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut out = Tensor::zeros([c, h, w]);
    let mut tmp = vec![0f64; h * w];
    for ch in 0..c {
        let p = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    acc += t * p[y * w + reflect(x as isize + i as isize - r, w)] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let o = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    acc += t * tmp[reflect(y as isize + i as isize - r, h) * w + x];
                }
                o[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// `img - gaussian_blur(img, σ)`, evaluated as `Σ wᵢwⱼ (x_c - x_ij)`.
pub fn extract_hpr(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("HPR sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let size = taps.len();
    let mut k = vec![0f32; size * size];
    for (i, &a) in taps.iter().enumerate() {
        for (j, &b) in taps.iter().enumerate() {
            k[i * size + j] = -(a * b) as f32;
        }
    }
    let mut out = Tensor::zeros([3, h, w]);
    for c in 0..3 {
        zero_sum_filter(&img.data()[c * h * w..(c + 1) * h * w], h, w, &k, size, &mut out.data_mut()[c * h * w..(c + 1) * h * w]);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub npr_factor: usize,
    pub hpr_sigma: f64,
    pub bayar: Tensor,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { npr_factor: 2, hpr_sigma: 1.0, bayar: bayar_cross() }
    }
}

pub fn extract_one(img: &Tensor, kind: ExtractorKind, cfg: &ExtractConfig) -> Result<Tensor> {
    match kind {
        ExtractorKind::Image => {
            check_image(img)?;
            Ok(img.clone())
        }
        ExtractorKind::Srm => extract_srm(img),
        ExtractorKind::Npr => extract_npr(img, cfg.npr_factor),
        ExtractorKind::Bayar => extract_bayar(img, &cfg.bayar),
        ExtractorKind::Hpr => extract_hpr(img, cfg.hpr_sigma),
    }
}

/// Raw planes for every kind, stacked along channels in `kinds` order.
pub fn extract_all(img: &Tensor, kinds: &[ExtractorKind], cfg: &ExtractConfig) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    let mut data = Vec::with_capacity(3 * kinds.len() * h * w);
    for &k in kinds {
        data.extend_from_slice(extract_one(img, k, cfg)?.data());
    }
    Tensor::new([3 * kinds.len(), h, w], data)
}

pub const STANDARD_CLAMP: f32 = 4.0;

/// Per-kind, per-channel mean and standard deviation frozen from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub kinds: Vec<ExtractorKind>,
    /// `(mean, std)` for each stacked channel.
    pub channels: Vec<(f64, f64)>,
}

impl Standardizer {
    /// Accumulates statistics over `planes`, each `[3·K × H × W]` from [`extract_all`].
    pub fn fit<'a>(kinds: &[ExtractorKind], planes: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let nc = 3 * kinds.len();
        let mut sum = vec![0f64; nc];
        let mut sq = vec![0f64; nc];
        let mut count = 0usize;
        for p in planes {
            if p.shape().first() != Some(&nc) {
                return Err(Error::Dimension(format!("expected {nc} channels, got {:?}", p.shape())));
            }
            let hw = p.len() / nc;
            for (c, chunk) in p.data().chunks(hw).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += hw;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = count as f64;
        let channels = (0..nc)
            .map(|c| {
                let m = sum[c] / n;
                let var = (sq[c] / n - m * m).max(0.0);
                let sd = var.sqrt();
                (m, if sd > 1e-12 { sd } else { 1.0 })
            })
            .collect();
        Ok(Standardizer { kinds: kinds.to_vec(), channels })
    }

    pub fn apply(&self, planes: &Tensor) -> Result<Tensor> {
        let nc = self.channels.len();
        if planes.shape().first() != Some(&nc) {
            return Err(Error::Dimension(format!("expected {nc} channels, got {:?}", planes.shape())));
        }
        let hw = planes.len() / nc;
        let mut out = planes.clone();
        for (chunk, &(m, sd)) in out.data_mut().chunks_mut(hw).zip(&self.channels) {
            for v in chunk {
                *v = (((*v as f64 - m) / sd) as f32).clamp(-STANDARD_CLAMP, STANDARD_CLAMP);
            }
        }
        Ok(out)
    }

    /// One `kind channel mean std` line per stacked channel.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, &(m, sd)) in self.channels.iter().enumerate() {
            s.push_str(&format!("{} {} {:e} {:e}\n", self.kinds[i / 3], i % 3, m, sd));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kinds = Vec::new();
        let mut channels = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("statistics line {}: {line:?}", ln + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let kind: ExtractorKind = f[0].parse()?;
            let ch: usize = f[1].parse().map_err(|_| bad())?;
            if ch != channels.len() % 3 {
                return Err(bad());
            }
            if ch == 0 {
                kinds.push(kind);
            }
            let m: f64 = f[2].parse().map_err(|_| bad())?;
            let sd: f64 = f[3].parse().map_err(|_| bad())?;
            channels.push((m, sd));
        }
        if channels.len() % 3 != 0 {
            return Err(Error::Config("statistics cover a partial kind".into()));
        }
        Ok(Standardizer { kinds, channels })
    }
}
