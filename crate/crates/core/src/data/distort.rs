use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::extract::gaussian_blur;
use crate::tensor::Tensor;

/// Robustness distortion applied to test images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distortion {
    None,
    Blur { sigma: f64 },
    Down { ratio: f64 },
    Jpeg { quality: u8 },
}

impl Distortion {
    pub const BLUR: Distortion = Distortion::Blur { sigma: 1.0 };
    pub const DOWN: Distortion = Distortion::Down { ratio: 0.5 };
    pub const JPEG: Distortion = Distortion::Jpeg { quality: 95 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::Blur { sigma } if !(sigma > 0.0) => Err(Error::Config(format!("blur sigma {sigma} must be positive"))),
            Distortion::Down { ratio } if !(ratio > 0.0 && ratio < 1.0) => {
                Err(Error::Config(format!("downsample ratio {ratio} must lie in (0, 1)")))
            }
            Distortion::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::Config(format!("JPEG quality {quality} must lie in 1..=100")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Distortion::None => "none",
            Distortion::Blur { .. } => "blur",
            Distortion::Down { .. } => "down",
            Distortion::Jpeg { .. } => "jpeg",
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Distortion::None),
            "blur" => Ok(Distortion::BLUR),
            "down" => Ok(Distortion::DOWN),
            "jpeg" => Ok(Distortion::JPEG),
            other => Err(Error::Config(format!("unknown distortion {other:?}"))),
        }
    }
}

pub fn apply_distortion(img: &Tensor, d: Distortion) -> Result<Tensor> {
    d.validate()?;
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected C×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = match d {
        Distortion::None => return Ok(img.clone()),
        Distortion::Blur { sigma } => gaussian_blur(img, sigma)?,
        Distortion::Down { ratio } => {
            let dh = ((h as f64 * ratio).round() as usize).max(1);
            let dw = ((w as f64 * ratio).round() as usize).max(1);
            bilinear_resize(&bilinear_resize(img, dh, dw), h, w)
        }
        Distortion::Jpeg { quality } => dct8_quantize(img, quality),
    };
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = |o: usize, n_in: usize, n_out: usize| {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, p - i0 as f64)
    };
    let d = img.data();
    Tensor::from_fn([c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y0, y1, fy) = src(y, h, oh);
        let (x0, x1, fx) = src(x, w, ow);
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx] as f64;
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard luminance table scaled by quality with the IJG rule.
pub fn jpeg_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &base) in t.iter_mut().zip(&LUMA) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

/// JPEG surrogate: per 8×8 block and channel, orthonormal DCT of
/// `255·x − 128`, quantize with [`jpeg_table`], inverse DCT. Partial edge
/// blocks are padded by edge replication.
pub fn dct8_quantize(img: &Tensor, quality: u8) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let basis = dct_basis();
    let table = jpeg_table(quality);
    let mut out = img.clone();
    let mut blk = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in blk.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = img.data()[(ch * h + yy) * w + xx] as f64 * 255.0 - 128.0;
                    }
                }
                // Forward: coef = B · blk · Bᵀ.
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| basis[u][y] * blk[y][x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|x| tmp[u][x] * basis[v][x]).sum();
                        let q = table[u * 8 + v];
                        blk[u][v] = (coef / q).round() * q;
                    }
                }
                // Inverse: blk = Bᵀ · coef · B.
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|u| basis[u][y] * blk[u][v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (yy, xx) = (by + y, bx + x);
                        if yy < h && xx < w {
                            let p: f64 = (0..8).map(|v| tmp[y][v] * basis[v][x]).sum();
                            out.data_mut()[(ch * h + yy) * w + xx] = ((p + 128.0) / 255.0) as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_fn([3, 16, 16], |i| ((i * 37 % 101) as f32) / 100.0)
    }

    #[test]
    fn none_is_identity() {
        let img = ramp();
        assert!(apply_distortion(&img, Distortion::None).unwrap().bit_eq(&img));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full([3, 12, 12], 0.4);
        let out = apply_distortion(&img, Distortion::BLUR).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn quality_table_endpoints() {
        assert!(jpeg_table(100).iter().all(|&v| v == 1.0));
        assert_eq!(jpeg_table(50)[0], 16.0);
        assert_eq!(jpeg_table(95)[0], 2.0);
    }

    #[test]
    fn jpeg_reproduces_quantization_invariant_images() {
        // Integer DCT coefficients survive quality 100 (unit table) exactly.
        let b = dct_basis();
        let mut img = Tensor::zeros([3, 8, 16]);
        for ch in 0..3 {
            for bx in [0usize, 8] {
                let mut coef = [[0.0f64; 8]; 8];
                coef[0][0] = 100.0 + (ch * 5 + bx) as f64;
                coef[1][2] = -7.0;
                coef[3][0] = 4.0;
                for y in 0..8 {
                    for x in 0..8 {
                        let mut p = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                p += b[u][y] * coef[u][v] * b[v][x];
                            }
                        }
                        img.data_mut()[(ch * 8 + y) * 16 + bx + x] = ((p + 128.0) / 255.0) as f32;
                    }
                }
            }
        }
        let out = apply_distortion(&img, Distortion::Jpeg { quality: 100 }).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn distortions_stay_in_range() {
        let img = ramp();
        for d in [Distortion::BLUR, Distortion::DOWN, Distortion::JPEG, Distortion::Jpeg { quality: 5 }] {
            let out = apply_distortion(&img, d).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{d}");
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let img = ramp();
        assert!(apply_distortion(&img, Distortion::Blur { sigma: 0.0 }).is_err());
        assert!(apply_distortion(&img, Distortion::Down { ratio: 1.0 }).is_err());
        assert!(apply_distortion(&img, Distortion::Jpeg { quality: 0 }).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = ramp();
        assert!(bilinear_resize(&img, 16, 16).data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let c = Tensor::full([1, 6, 6], 0.25);
        assert!(bilinear_resize(&c, 3, 3).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
