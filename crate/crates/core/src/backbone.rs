//! Frozen shared transformer with per-modality embeddings, low-rank QKV
//! experts and gated cross-modal attention.

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::extract::{validate_kinds, ExtractorKind};
use crate::nn::{new_param, Init, Linear, Mha, Norm};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub kinds: Vec<ExtractorKind>,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub fusion_layers: Vec<usize>,
    pub ffn_mult: usize,
    /// One gate per modality block instead of a single tiled gate.
    pub per_modality_gate: bool,
}

/// `{⌈N/4⌉−1, ⌈N/2⌉−1, ⌈3N/4⌉−1, N−1}`, deduplicated.
pub fn default_fusion_layers(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [n.div_ceil(4), n.div_ceil(2), (3 * n).div_ceil(4), n]
        .into_iter()
        .filter(|&k| k >= 1)
        .map(|k| k - 1)
        .collect();
    v.dedup();
    v
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kinds: vec![ExtractorKind::Image, ExtractorKind::Npr, ExtractorKind::Srm, ExtractorKind::Bayar],
            image_size: 32,
            patch: 4,
            dim: 32,
            layers: 4,
            heads: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
            fusion_layers: default_fusion_layers(4),
            ffn_mult: 4,
            per_modality_gate: false,
        }
    }
}

impl BackboneConfig {
    pub fn streams(&self) -> usize {
        self.kinds.len()
    }

    pub fn tokens(&self) -> usize {
        1 + (self.image_size / self.patch).pow(2)
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        validate_kinds(&self.kinds)?;
        self.validate_layout()
    }

    /// Shape checks only; any non-empty stream list is accepted.
    pub fn validate_layout(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kinds.is_empty() {
            return bad("at least one stream is required".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.layers == 0 || self.lora_rank == 0 || self.ffn_mult == 0 {
            return bad("layers, lora rank and ffn multiplier must be positive".into());
        }
        if let Some(&l) = self.fusion_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("fusion layer {l} outside 0..{}", self.layers));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaseLayer {
    pub ln1: Norm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Embed {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Fuse {
    pub ln: Norm,
    pub attn: Mha,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub layers: Vec<BaseLayer>,
    pub final_ln: Norm,
    pub embeds: Vec<Embed>,
    /// `lora[j][i]` for modality `j` at layer `i`; empty when experts are disabled.
    pub lora: Vec<Vec<Lora>>,
    /// Fusion blocks keyed by layer; empty when cross-modal attention is disabled.
    pub fuse: Vec<(usize, Fuse)>,
}

fn std_for(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &BackboneConfig, seed: u64, lora: bool, cla: bool) -> Result<Self> {
        cfg.validate_layout()?;
        let d = cfg.dim;
        let hidden = cfg.ffn_mult * d;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("backbone.base.layer{i}");
            layers.push(BaseLayer {
                ln1: Norm::new(store, &format!("{p}.ln1"), d, false)?,
                qkv: Linear::new(store, seed, &format!("{p}.qkv"), d, 3 * d, std_for(d), true, false)?,
                attn_out: Linear::new(store, seed, &format!("{p}.attn_out"), d, d, std_for(d), true, false)?,
                ln2: Norm::new(store, &format!("{p}.ln2"), d, false)?,
                fc1: Linear::new(store, seed, &format!("{p}.fc1"), d, hidden, std_for(d), true, false)?,
                fc2: Linear::new(store, seed, &format!("{p}.fc2"), hidden, d, std_for(hidden), true, false)?,
            });
        }
        let final_ln = Norm::new(store, "backbone.base.final_ln", d, false)?;
        let fan = 3 * cfg.patch * cfg.patch;
        let mut embeds = Vec::new();
        for k in &cfg.kinds {
            let p = format!("backbone.embed.{k}");
            embeds.push(Embed {
                proj: Linear::new(store, seed, &format!("{p}.proj"), fan, d, std_for(fan), true, true)?,
                cls: new_param(store, seed, &format!("{p}.cls"), &[1, d], Init::Normal(1.0), true)?,
                pos: new_param(store, seed, &format!("{p}.pos"), &[cfg.tokens(), d], Init::Normal(0.02), true)?,
            });
        }
        let mut experts = Vec::new();
        if lora {
            for k in &cfg.kinds {
                let mut per = Vec::new();
                for i in 0..cfg.layers {
                    let p = format!("backbone.lora.{k}.{i}");
                    per.push(Lora {
                        a: new_param(store, seed, &format!("{p}.a"), &[cfg.lora_rank, d], std_for(d), true)?,
                        b: new_param(store, seed, &format!("{p}.b"), &[3 * d, cfg.lora_rank], Init::Zeros, true)?,
                    });
                }
                experts.push(per);
            }
        }
        let mut fuse = Vec::new();
        if cla {
            let rows = if cfg.per_modality_gate { cfg.streams() * cfg.tokens() } else { cfg.tokens() };
            for &i in &cfg.fusion_layers {
                let p = format!("backbone.fuse.{i}");
                fuse.push((
                    i,
                    Fuse {
                        ln: Norm::new(store, &format!("{p}.ln"), d, true)?,
                        attn: Mha::new(store, seed, &format!("{p}.attn"), d, cfg.heads, true)?,
                        beta: new_param(store, seed, &format!("{p}.beta"), &[rows, d], Init::Zeros, true)?,
                    },
                ));
            }
        }
        Ok(Backbone { cfg: cfg.clone(), layers, final_ln, embeds, lora: experts, fuse })
    }

    /// Patch tokens projected to `D`, CLS prepended, positions added.
    pub fn patch_embed<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, j: usize, plane: Var) -> Var {
        let e = &self.embeds[j];
        let patches = t.patchify(plane, self.cfg.patch);
        let tok = e.proj.forward(t, s, patches);
        let cls = t.param(s, e.cls);
        let seq = t.concat_rows(&[cls, tok]);
        let pos = t.param(s, e.pos);
        t.add(seq, pos)
    }

    /// Frozen QKV projection plus the scaled low-rank delta of modality `j`.
    pub fn lora_qkv<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, i: usize, j: usize, h: Var) -> Var {
        let base = self.layers[i].qkv.forward(t, s, h);
        let Some(ex) = self.lora.get(j).map(|v| v[i]) else { return base };
        let a = t.param(s, ex.a);
        let b = t.param(s, ex.b);
        let u = t.matmul_nt(h, a);
        let delta = t.matmul_nt(u, b);
        let delta = t.scale(delta, T::c(self.cfg.lora_scale()));
        t.add(base, delta)
    }

    /// Pre-LN block for one stream.
    pub fn layer<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, i: usize, j: usize, x: Var) -> Var {
        let l = &self.layers[i];
        let d = self.cfg.dim;
        let h = l.ln1.forward(t, s, x);
        let qkv = self.lora_qkv(t, s, i, j, h);
        let q = t.cols(qkv, 0, d);
        let k = t.cols(qkv, d, d);
        let v = t.cols(qkv, 2 * d, d);
        let a = crate::nn::attention(t, q, k, v, self.cfg.heads);
        let a = l.attn_out.forward(t, s, a);
        let y = t.add(x, a);
        let h = l.ln2.forward(t, s, y);
        let h = l.fc1.forward(t, s, h);
        let h = t.gelu(h);
        let h = l.fc2.forward(t, s, h);
        t.add(y, h)
    }

    pub fn fuse_at(&self, i: usize) -> Option<&Fuse> {
        self.fuse.iter().find(|(l, _)| *l == i).map(|(_, f)| f)
    }

    /// `F + β ⊙ MHA(LN F)` over the stacked streams; identity off the schedule.
    pub fn cross_fuse<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, i: usize, stacked: Var) -> Var {
        let Some(f) = self.fuse_at(i) else { return stacked };
        let n = f.ln.forward(t, s, stacked);
        let a = f.attn.forward(t, s, n, n, n);
        let beta = t.param(s, f.beta);
        let rows = t.value(stacked).rows_cols().0;
        let gate = if t.value(beta).rows_cols().0 == rows {
            beta
        } else {
            let tiles = vec![beta; self.cfg.streams()];
            t.concat_rows(&tiles)
        };
        let g = t.mul(gate, a);
        t.add(stacked, g)
    }

    /// One stream through every layer without interaction, then the final LN.
    pub fn stream_forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, j: usize, plane: Var) -> Var {
        let mut x = self.patch_embed(t, s, j, plane);
        for i in 0..self.cfg.layers {
            x = self.layer(t, s, i, j, x);
        }
        self.final_ln.forward(t, s, x)
    }

    /// All streams with fusion and optional adapter exchange. Returns final
    /// per-stream tokens and CLS rows.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        planes: &[Var],
        adapter: Option<(&Adapter, Var)>,
    ) -> (Vec<Var>, Vec<Var>) {
        let m = self.cfg.streams();
        let tok = self.cfg.tokens();
        let mut xs: Vec<Var> = (0..m).map(|j| self.patch_embed(t, s, j, planes[j])).collect();
        let mut g = adapter.map(|(_, g)| g);
        for i in 0..self.cfg.layers {
            for (j, x) in xs.iter_mut().enumerate() {
                *x = self.layer(t, s, i, j, *x);
            }
            let fusing = self.fuse_at(i).is_some();
            let adapting = adapter.is_some_and(|(a, _)| a.at(i));
            if !fusing && !adapting {
                continue;
            }
            let mut stacked = t.concat_rows(&xs);
            if let (Some((a, _)), Some(gv)) = (adapter, g) {
                stacked = a.inject(t, s, i, stacked, gv);
            }
            stacked = self.cross_fuse(t, s, i, stacked);
            if let (Some((a, _)), Some(gv)) = (adapter, g) {
                g = Some(a.extract_back(t, s, i, gv, stacked));
            }
            for (j, x) in xs.iter_mut().enumerate() {
                *x = t.rows(stacked, j * tok, tok);
            }
        }
        let outs: Vec<Var> = xs.iter().map(|&x| self.final_ln.forward(t, s, x)).collect();
        let cls = outs.iter().map(|&x| t.rows(x, 0, 1)).collect();
        (outs, cls)
    }
}
