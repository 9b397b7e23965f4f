//! Convolutional side branch producing a pooled low-level prior `G` that is
//! exchanged with the backbone at the fusion layers.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{new_param, Ffn, Init, Linear, Mha, Norm};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub channels: (usize, usize),
    pub groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { channels: (16, 32), groups: 4 }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    gain: ParamId,
    shift: ParamId,
    groups: usize,
}

impl ConvBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        if groups == 0 || cout % groups != 0 {
            return Err(Error::Config(format!("{cout} channels do not split into {groups} groups")));
        }
        let he = Init::Normal((2.0 / (cin * 9) as f64).sqrt());
        Ok(ConvBlock {
            kernel: new_param(store, seed, &format!("{name}.conv.weight"), &[cout, cin, 3, 3], he, true)?,
            bias: new_param(store, seed, &format!("{name}.conv.bias"), &[cout], Init::Zeros, true)?,
            gain: new_param(store, seed, &format!("{name}.norm.gain"), &[cout], Init::Ones, true)?,
            shift: new_param(store, seed, &format!("{name}.norm.bias"), &[cout], Init::Zeros, true)?,
            groups,
        })
    }

    /// conv 3×3 → group norm → GELU → 2×2 average pool.
    fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let k = t.param(s, self.kernel);
        let b = t.param(s, self.bias);
        let y = t.conv2d(x, k, Some(b), 1, 1);
        let sh = t.value(y).shape().to_vec();
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        let g = t.reshape(y, &[self.groups, c / self.groups * hw]);
        let g = t.layer_norm(g, None, None, crate::nn::LN_EPS);
        let g = t.reshape(g, &[c, hw]);
        let gain = t.param(s, self.gain);
        let shift = t.param(s, self.shift);
        let g = t.mul_col(g, gain);
        let g = t.add_col(g, shift);
        let g = t.gelu(g);
        let g = t.reshape(g, &sh);
        t.avg_pool2(g)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: [ConvBlock; 2],
    proj1: Linear,
    proj2: Linear,
    pub in_channels: usize,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, cin: usize, dim: usize, cfg: &EncoderConfig) -> Result<Self> {
        let (c1, c2) = cfg.channels;
        let std = |f: usize| Init::Normal(1.0 / (f as f64).sqrt());
        Ok(Encoder {
            blocks: [
                ConvBlock::new(store, seed, "adapter.encoder.block0", cin, c1, cfg.groups)?,
                ConvBlock::new(store, seed, "adapter.encoder.block1", c1, c2, cfg.groups)?,
            ],
            proj1: Linear::new(store, seed, "adapter.encoder.proj1", c2, dim, std(c2), true, true)?,
            proj2: Linear::new(store, seed, "adapter.encoder.proj2", dim, dim, std(dim), true, true)?,
            in_channels: cin,
        })
    }

    /// `[3M × H × W]` low-level planes to `G₀` as a `[1 × D]` row.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(t, s, h);
        }
        let sh = t.value(h).shape().to_vec();
        let h = t.reshape(h, &[sh[0], sh[1] * sh[2]]);
        let pooled = t.mean_cols(h);
        let pooled = t.reshape(pooled, &[1, sh[0]]);
        let p = self.proj1.forward(t, s, pooled);
        let p = t.gelu(p);
        self.proj2.forward(t, s, p)
    }
}

/// `F + γ ⊙ MHA(LN F, LN G, LN G)`.
#[derive(Debug, Clone)]
pub struct Inject {
    pub ln_f: Norm,
    pub ln_g: Norm,
    pub attn: Mha,
    pub gamma: ParamId,
}

/// `G̃ = G + η ⊙ MHA(LN G, LN F, LN F)`, then `G̃ + FFN(LN G̃)`.
#[derive(Debug, Clone)]
pub struct Extract {
    pub ln_g: Norm,
    pub ln_f: Norm,
    pub attn: Mha,
    pub eta: ParamId,
    pub ln_ffn: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub encoder: Encoder,
    pub layers: Vec<(usize, Inject, Extract)>,
}

impl Adapter {
    pub fn new<T: Real>(store: &mut ParamStore<T>, bb: &BackboneConfig, enc: &EncoderConfig, seed: u64) -> Result<Self> {
        let d = bb.dim;
        let encoder = Encoder::new(store, seed, 3 * (bb.streams() - 1), d, enc)?;
        let mut layers = Vec::new();
        for &i in &bb.fusion_layers {
            let p = format!("adapter.inject.{i}");
            let inject = Inject {
                ln_f: Norm::new(store, &format!("{p}.ln_f"), d, true)?,
                ln_g: Norm::new(store, &format!("{p}.ln_g"), d, true)?,
                attn: Mha::new(store, seed, &format!("{p}.attn"), d, bb.heads, true)?,
                gamma: new_param(store, seed, &format!("{p}.gamma"), &[d], Init::Zeros, true)?,
            };
            let p = format!("adapter.extract.{i}");
            let extract = Extract {
                ln_g: Norm::new(store, &format!("{p}.ln_g"), d, true)?,
                ln_f: Norm::new(store, &format!("{p}.ln_f"), d, true)?,
                attn: Mha::new(store, seed, &format!("{p}.attn"), d, bb.heads, true)?,
                eta: new_param(store, seed, &format!("{p}.eta"), &[d], Init::Zeros, true)?,
                ln_ffn: Norm::new(store, &format!("{p}.ln_ffn"), d, true)?,
                ffn: Ffn::new(store, seed, &format!("{p}.ffn"), d, 2 * d, Init::Zeros, true)?,
            };
            layers.push((i, inject, extract));
        }
        Ok(Adapter { encoder, layers })
    }

    pub fn at(&self, i: usize) -> bool {
        self.layers.iter().any(|(l, _, _)| *l == i)
    }

    fn pair(&self, i: usize) -> &(usize, Inject, Extract) {
        self.layers.iter().find(|(l, _, _)| *l == i).expect("adapter layer on the fusion schedule")
    }

    /// Checked entry point for the encoder on one sample's low-level planes.
    pub fn encode_lowlevel<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, planes: &Tensor<T>) -> Result<Var> {
        let sh = planes.shape();
        if sh.len() != 3 || sh[0] != self.encoder.in_channels {
            return Err(Error::Dimension(format!(
                "encoder expects {} low-level channels, got {sh:?}",
                self.encoder.in_channels
            )));
        }
        if sh[1] % 4 != 0 || sh[2] % 4 != 0 {
            return Err(Error::Dimension(format!("encoder needs extents divisible by 4, got {sh:?}")));
        }
        let x = t.constant(planes.clone());
        Ok(self.encoder.forward(t, s, x))
    }

    pub fn inject<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, i: usize, f: Var, g: Var) -> Var {
        let inj = &self.pair(i).1;
        let nf = inj.ln_f.forward(t, s, f);
        let ng = inj.ln_g.forward(t, s, g);
        let a = inj.attn.forward(t, s, nf, ng, ng);
        let gamma = t.param(s, inj.gamma);
        let a = t.mul_row(a, gamma);
        t.add(f, a)
    }

    pub fn extract_back<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, i: usize, g: Var, f: Var) -> Var {
        let ex = &self.pair(i).2;
        let ng = ex.ln_g.forward(t, s, g);
        let nf = ex.ln_f.forward(t, s, f);
        let a = ex.attn.forward(t, s, ng, nf, nf);
        let eta = t.param(s, ex.eta);
        let a = t.mul_row(a, eta);
        let gt = t.add(g, a);
        let h = ex.ln_ffn.forward(t, s, gt);
        let h = ex.ffn.forward(t, s, h);
        t.add(gt, h)
    }
}
