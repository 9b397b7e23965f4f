//! The assembled detector: backbone, optional adapter, heads and router.

use std::fmt;

use crate::adapter::{Adapter, EncoderConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::extract::ExtractorKind;
use crate::param::ParamStore;
use crate::router::{mixture, total_loss, uniform, Heads, MoeSign, Router};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which of the four architectural components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Components {
    /// Per-modality low-rank experts.
    pub le: bool,
    /// Cross-modal gated attention at the fusion layers.
    pub cla: bool,
    /// Low-level interaction adapter.
    pub liia: bool,
    /// Routed mixture of heads; off means uniform routing and a shared head.
    pub dfs: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components { le: true, cla: true, liia: true, dfs: true }
    }
}

impl Components {
    pub const NAMES: [&'static str; 4] = ["le", "cla", "liia", "dfs"];

    pub fn none() -> Self {
        Components { le: false, cla: false, liia: false, dfs: false }
    }

    /// Full model with the comma-separated components switched off.
    pub fn disabling(list: &str) -> Result<Self> {
        let mut c = Components::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name.to_ascii_lowercase().as_str() {
                "le" => c.le = false,
                "cla" => c.cla = false,
                "liia" => c.liia = false,
                "dfs" => c.dfs = false,
                other => return Err(Error::Config(format!("unknown component {other:?}; expected le, cla, liia, dfs"))),
            }
        }
        Ok(c)
    }

    pub fn disabled(&self) -> Vec<&'static str> {
        let flags = [self.le, self.cla, self.liia, self.dfs];
        Self::NAMES.iter().zip(flags).filter(|(_, on)| !on).map(|(n, _)| *n).collect()
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off = self.disabled();
        if off.is_empty() {
            f.write_str("full")
        } else {
            write!(f, "-{}", off.join("-"))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Routing distribution, `[1 × (M+1)]`.
    pub p: Var,
    /// Per-modality head probabilities, `[1 × (M+1)]`.
    pub per_head: Var,
    /// Fused probability of "fake", `[1]`.
    pub fused: Var,
    pub cls: Vec<Var>,
    /// Whether `p` is produced by the router (and so carries the entropy term).
    pub routed: bool,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p: Vec<f64>,
    pub per_head: Vec<f64>,
    pub fused: f64,
    pub argmax_modality: usize,
}

#[derive(Debug, Clone)]
pub struct AleiModel {
    pub cfg: ModelConfig,
    pub comps: Components,
    pub backbone: Backbone,
    pub adapter: Option<Adapter>,
    pub heads: Heads,
    pub router: Option<Router>,
}

impl AleiModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, comps: Components) -> Result<Self> {
        let bb = &cfg.backbone;
        bb.validate()?;
        let backbone = Backbone::new(store, bb, cfg.seed, comps.le, comps.cla)?;
        let adapter = if comps.liia { Some(Adapter::new(store, bb, &cfg.encoder, cfg.seed)?) } else { None };
        let heads = Heads::new(store, bb.streams(), bb.dim, !comps.dfs)?;
        let router = if comps.dfs { Some(Router::new(store, bb.streams(), bb.dim)?) } else { None };
        Ok(AleiModel { cfg: cfg.clone(), comps, backbone, adapter, heads, router })
    }

    pub fn kinds(&self) -> &[ExtractorKind] {
        &self.cfg.backbone.kinds
    }

    pub fn streams(&self) -> usize {
        self.cfg.backbone.streams()
    }

    pub fn image_index(&self) -> usize {
        self.kinds().iter().position(|&k| k == ExtractorKind::Image).expect("validated kinds")
    }

    /// Input planes must be `[3·(M+1) × H × W]` matching the configuration.
    pub fn check_input<T: Real>(&self, planes: &Tensor<T>) -> Result<()> {
        let want = [3 * self.streams(), self.cfg.backbone.image_size, self.cfg.backbone.image_size];
        if planes.shape() != want {
            return Err(Error::Dimension(format!("model expects input {want:?}, got {:?}", planes.shape())));
        }
        Ok(())
    }

    /// Planes of stream `j` from a stacked `[3·(M+1) × H × W]` input.
    pub fn stream_planes<T: Real>(&self, planes: &Tensor<T>, j: usize) -> Tensor<T> {
        let s = self.cfg.backbone.image_size;
        let block = 3 * s * s;
        Tensor::new([3, s, s], planes.data()[j * block..(j + 1) * block].to_vec()).unwrap()
    }

    /// Channel stack of every stream except IMAGE, the adapter's input.
    pub fn low_level_planes<T: Real>(&self, planes: &Tensor<T>) -> Tensor<T> {
        let s = self.cfg.backbone.image_size;
        let block = 3 * s * s;
        let img = self.image_index();
        let mut low = Vec::with_capacity(planes.len() - block);
        for j in (0..self.streams()).filter(|&j| j != img) {
            low.extend_from_slice(&planes.data()[j * block..(j + 1) * block]);
        }
        Tensor::new([3 * (self.streams() - 1), s, s], low).unwrap()
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, planes: &Tensor<T>) -> Result<Forward> {
        self.check_input(planes)?;
        let streams: Vec<Var> = (0..self.streams()).map(|j| t.constant(self.stream_planes(planes, j))).collect();
        let ad = match &self.adapter {
            Some(a) => {
                let g = a.encode_lowlevel(t, s, &self.low_level_planes(planes))?;
                Some((a, g))
            }
            None => None,
        };
        let (_, cls) = self.backbone.forward(t, s, &streams, ad);
        let hs: Vec<Var> = cls.iter().enumerate().map(|(i, &c)| self.heads.head(t, s, i, c)).collect();
        let per_head = t.concat_cols(&hs);
        let fcls = t.concat_cols(&cls);
        let (p, fused, routed) = match (&self.router, &self.heads.shared) {
            (Some(r), _) => {
                let p = r.route(t, s, fcls);
                (p, mixture(t, p, per_head), true)
            }
            (None, Some(sh)) => {
                let p = t.constant(uniform(self.streams()));
                let z = sh.forward(t, s, fcls);
                let z = t.sigmoid(z);
                (p, t.reshape(z, &[1]), false)
            }
            (None, None) => unreachable!("shared head exists whenever routing is off"),
        };
        Ok(Forward { p, per_head, fused, cls, routed })
    }

    pub fn loss<T: Real>(&self, t: &mut Tape<T>, f: &Forward, y: f64, lambda: f64, sign: MoeSign) -> Var {
        total_loss(t, y, f.fused, f.routed.then_some(f.p), lambda, sign)
    }

    pub fn predict<T: Real>(&self, s: &ParamStore<T>, planes: &Tensor<T>) -> Result<Prediction> {
        let mut t = Tape::new();
        let f = self.forward(&mut t, s, planes)?;
        Ok(read_prediction(&t, &f))
    }

    /// Single-stream probability for modality `j`: its stream alone through
    /// the base with its expert, then its head.
    pub fn probe_forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, j: usize, planes: &Tensor<T>) -> Result<Var> {
        self.check_input(planes)?;
        let x = t.constant(self.stream_planes(planes, j));
        let out = self.backbone.stream_forward(t, s, j, x);
        let cls = t.rows(out, 0, 1);
        let h = self.heads.head(t, s, j, cls);
        Ok(t.reshape(h, &[1]))
    }
}

pub fn read_prediction<T: Real>(t: &Tape<T>, f: &Forward) -> Prediction {
    let p: Vec<f64> = t.value(f.p).data().iter().map(|v| v.f64()).collect();
    let per_head = t.value(f.per_head).data().iter().map(|v| v.f64()).collect();
    let argmax_modality = p
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    Prediction { p, per_head, fused: t.value(f.fused).data()[0].f64(), argmax_modality }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::default_fusion_layers;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                kinds: vec![ExtractorKind::Image, ExtractorKind::Npr, ExtractorKind::Srm],
                image_size: 8,
                patch: 4,
                dim: 8,
                layers: 2,
                heads: 4,
                fusion_layers: default_fusion_layers(2),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([9, 8, 8], |_| rng.sample(StandardNormal))
    }

    #[test]
    fn components_parse_and_name() {
        assert_eq!(Components::disabling("").unwrap(), Components::default());
        let c = Components::disabling("le, dfs").unwrap();
        assert!(!c.le && c.cla && c.liia && !c.dfs);
        assert_eq!(c.to_string(), "-le-dfs");
        assert!(Components::disabling("xyz").is_err());
    }

    #[test]
    fn fresh_model_is_uniform_and_half() {
        let cfg = small();
        let mut s = ParamStore::<f32>::new();
        let m = AleiModel::new(&mut s, &cfg, Components::default()).unwrap();
        let p = m.predict(&s, &input(1)).unwrap();
        assert!(p.p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(p.per_head.iter().all(|&v| v == 0.5));
        assert!((p.fused - 0.5).abs() < 1e-6);
        assert!(m.predict(&s, &Tensor::zeros([6, 8, 8])).is_err());
    }

    #[test]
    fn ablations_share_names_outside_their_namespace() {
        let cfg = small();
        let names = |c: Components| {
            let mut s = ParamStore::<f32>::new();
            AleiModel::new(&mut s, &cfg, c).unwrap();
            s.names().map(String::from).collect::<Vec<_>>()
        };
        let full = names(Components::default());
        let no_liia = names(Components::disabling("liia").unwrap());
        let outside: Vec<_> = full.iter().filter(|n| !n.starts_with("adapter.")).cloned().collect();
        assert_eq!(outside, no_liia);
        let no_dfs = names(Components::disabling("dfs").unwrap());
        assert!(no_dfs.iter().any(|n| n.starts_with("heads.shared")));
        assert!(!no_dfs.iter().any(|n| n.starts_with("router.")));
    }
}
