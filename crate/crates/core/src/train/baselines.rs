//! Early fusion (1×1-mixed streams summed into one backbone stream) and late
//! fusion (one affine head over frozen phase-1 CLS features).

use super::{fit, Metrics, Prepared, Scored, TrainConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::extract::ExtractorKind;
use crate::model::AleiModel;
use crate::nn::{new_param, Init, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Concatenated final CLS rows of every stream run alone, `[1 × (M+1)·D]`.
pub fn cls_features(model: &AleiModel, store: &ParamStore, data: &Prepared, crop: Option<usize>) -> Result<Vec<Tensor>> {
    (0..data.len())
        .map(|i| {
            let x = data.view(i, crop, None);
            model.check_input(&x)?;
            let mut t = Tape::new();
            let cls: Vec<Var> = (0..model.streams())
                .map(|j| {
                    let v = t.constant(model.stream_planes(&x, j));
                    let out = model.backbone.stream_forward(&mut t, store, j, v);
                    t.rows(out, 0, 1)
                })
                .collect();
            let c = t.concat_cols(&cls);
            Ok(t.value(c).clone())
        })
        .collect()
}

/// Logistic head over fixed features.
#[derive(Debug, Clone)]
pub struct LateFusion {
    pub store: ParamStore,
    pub head: Linear,
    pub input_dim: usize,
}

impl LateFusion {
    pub fn new(input_dim: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, 0, "late.head", input_dim, 1, Init::Zeros, true, true)?;
        Ok(LateFusion { store, head, input_dim })
    }

    fn prob(&self, t: &mut Tape<f32>, s: &ParamStore, x: &Tensor) -> Var {
        let v = t.constant(x.clone());
        let z = self.head.forward(t, s, v);
        let p = t.sigmoid(z);
        t.reshape(p, &[1])
    }

    pub fn train(&mut self, feats: &[Tensor], labels: &[u8], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let this = self.clone();
        fit(&mut self.store, cfg, feats.len(), 300, |t, s, i, _| {
            let p = this.prob(t, s, &feats[i]);
            Ok(t.bce(p, labels[i] as f64))
        })
    }

    pub fn evaluate(&self, feats: &[Tensor], data: &Prepared) -> Result<Metrics> {
        let rows: Vec<Scored> = feats
            .iter()
            .zip(&data.items)
            .map(|(x, it)| {
                let mut t = Tape::new();
                let p = self.prob(&mut t, &self.store, x);
                Scored { score: t.value(p).data()[0] as f64, label: it.label, family: it.family, p: Vec::new() }
            })
            .collect();
        Metrics::from_scored(&rows)
    }
}

/// Per-stream 1×1 convolutions summed into a single three-channel stream,
/// then one backbone stream with one expert and one head.
#[derive(Debug, Clone)]
pub struct EarlyFusion {
    pub kinds: Vec<ExtractorKind>,
    pub mix: Vec<(ParamId, ParamId)>,
    pub backbone: Backbone,
    pub head: Linear,
}

impl EarlyFusion {
    /// `cfg.kinds` lists the input streams; the backbone shares the base seed.
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let eye = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut mix = Vec::new();
        for k in &cfg.kinds {
            let w = store.insert(format!("early.mix.{k}.weight"), eye.clone(), true)?;
            let b = new_param(store, seed, &format!("early.mix.{k}.bias"), &[3], Init::Zeros, true)?;
            mix.push((w, b));
        }
        let single = BackboneConfig { kinds: vec![ExtractorKind::Image], ..cfg.clone() };
        let backbone = Backbone::new(store, &single, seed, true, false)?;
        let head = Linear::new(store, 0, "early.head", cfg.dim, 1, Init::Zeros, true, true)?;
        Ok(EarlyFusion { kinds: cfg.kinds.clone(), mix, backbone, head })
    }

    /// The summed three-channel stream.
    pub fn mixed(&self, t: &mut Tape<f32>, s: &ParamStore, planes: &Tensor) -> Var {
        let sz = self.backbone.cfg.image_size;
        let block = 3 * sz * sz;
        let mut acc: Option<Var> = None;
        for (j, &(w, b)) in self.mix.iter().enumerate() {
            let x = t.constant(Tensor::new([3, sz, sz], planes.data()[j * block..(j + 1) * block].to_vec()).unwrap());
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            let y = t.conv2d(x, wv, Some(bv), 1, 0);
            acc = Some(match acc {
                Some(a) => t.add(a, y),
                None => y,
            });
        }
        acc.expect("at least one stream")
    }

    pub fn prob(&self, t: &mut Tape<f32>, s: &ParamStore, planes: &Tensor) -> Var {
        let x = self.mixed(t, s, planes);
        let out = self.backbone.stream_forward(t, s, 0, x);
        let cls = t.rows(out, 0, 1);
        let z = self.head.forward(t, s, cls);
        let p = t.sigmoid(z);
        t.reshape(p, &[1])
    }

    pub fn train(&self, store: &mut ParamStore, data: &Prepared, cfg: &TrainConfig) -> Result<Vec<f64>> {
        store.set_trainable(|n| !n.starts_with(super::BASE_PREFIX));
        fit(store, cfg, data.len(), 400, |t, s, i, rng| {
            let x = data.view(i, cfg.crop, Some(rng));
            let p = self.prob(t, s, &x);
            Ok(t.bce(p, data.items[i].label as f64))
        })
    }

    pub fn evaluate(&self, store: &ParamStore, data: &Prepared, crop: Option<usize>) -> Result<Metrics> {
        let rows: Vec<Scored> = (0..data.len())
            .map(|i| {
                let mut t = Tape::new();
                let p = self.prob(&mut t, store, &data.view(i, crop, None));
                let it = &data.items[i];
                Scored { score: t.value(p).data()[0] as f64, label: it.label, family: it.family, p: Vec::new() }
            })
            .collect();
        Metrics::from_scored(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::default_fusion_layers;
    use crate::data::Family;
    use crate::model::{Components, ModelConfig};
    use crate::train::Item;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            kinds: vec![ExtractorKind::Image, ExtractorKind::Npr],
            image_size: 8,
            patch: 4,
            dim: 8,
            layers: 2,
            heads: 2,
            fusion_layers: default_fusion_layers(2),
            ..Default::default()
        }
    }

    #[test]
    fn identity_mix_of_identical_streams_is_scaled_single_stream() {
        let c = cfg();
        let mut s = ParamStore::new();
        let e = EarlyFusion::new(&mut s, &c, 1).unwrap();
        let one = Tensor::from_fn([3, 8, 8], |i| ((i * 7) % 11) as f32 / 11.0);
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let planes = Tensor::new([6, 8, 8], both).unwrap();
        let mut t = Tape::new();
        let m = e.mixed(&mut t, &s, &planes);
        let twice = one.map(|v| 2.0 * v);
        assert!(t.value(m).bit_eq(&twice));
    }

    #[test]
    fn late_head_sees_all_cls_rows() {
        let c = cfg();
        let mut s = ParamStore::new();
        let model = AleiModel::new(&mut s, &ModelConfig { backbone: c, ..Default::default() }, Components::default()).unwrap();
        let data = Prepared {
            items: (0..4)
                .map(|i| Item {
                    planes: Tensor::from_fn([6, 8, 8], |k| ((k + i) % 5) as f32),
                    label: (i % 2) as u8,
                    family: if i % 2 == 1 { Family::Up } else { Family::None },
                })
                .collect(),
        };
        let f = cls_features(&model, &s, &data, None).unwrap();
        assert_eq!(f[0].shape(), &[1, 16]);
        let late = LateFusion::new(16).unwrap();
        assert_eq!(late.store.value("late.head.weight").unwrap().shape(), &[1, 16]);
        let m = late.evaluate(&f, &data).unwrap();
        assert_eq!(m.acc, 0.5);
    }
}
