//! Optimization, checkpoints, metrics and the experiment drivers built on
//! them.

pub mod adam;
pub mod baselines;
pub mod checkpoint;
pub mod experiment;
pub mod metrics;
pub mod phase;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_distortion, sample_rng, Distortion, Family, Sample};
use crate::error::{Error, Result};
use crate::extract::{extract_all, ExtractConfig, ExtractorKind, Standardizer};
use crate::model::{read_prediction, AleiModel};
use crate::param::{ParamId, ParamStore};
use crate::router::MoeSign;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use metrics::{accuracy, average_precision, FamilyMetrics, Metrics, Scored};
pub use phase::{
    encoder_fragment, load_fragments, phase1_fragment, train_encoder, train_phase1, train_phase2, BASE_PREFIX,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub moe_sign: MoeSign,
    pub seed: u64,
    /// Keep the experts fixed during phase 2.
    pub freeze_lora: bool,
    /// Side of the random training crop, re-padded to the full size; the
    /// centered crop is used at evaluation. `None` disables cropping.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 32,
            epochs: 10,
            lambda: 0.1,
            moe_sign: MoeSign::Literal,
            seed: 0,
            freeze_lora: false,
            crop: Some(28),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.crop == Some(0) {
            return bad("crop must be positive");
        }
        Ok(())
    }
}

/// A standardized sample ready for the model.
#[derive(Debug, Clone)]
pub struct Item {
    pub planes: Tensor,
    pub label: u8,
    pub family: Family,
}

/// Extracted and standardized split.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub items: Vec<Item>,
}

fn extract_samples(samples: &[Sample], kinds: &[ExtractorKind], ecfg: &ExtractConfig) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| extract_all(&s.image, kinds, ecfg)).collect()
}

impl Prepared {
    /// Extracts `samples`, fits the standardizer on them and applies it.
    pub fn fit(samples: &[Sample], kinds: &[ExtractorKind], ecfg: &ExtractConfig) -> Result<(Self, Standardizer)> {
        let raw = extract_samples(samples, kinds, ecfg)?;
        let std = Standardizer::fit(kinds, &raw)?;
        let items = Self::assemble(samples, raw, &std)?;
        Ok((Prepared { items }, std))
    }

    pub fn with(samples: &[Sample], kinds: &[ExtractorKind], ecfg: &ExtractConfig, std: &Standardizer) -> Result<Self> {
        if std.kinds != kinds {
            return Err(Error::Config("statistics were fitted for a different extractor list".into()));
        }
        let raw = extract_samples(samples, kinds, ecfg)?;
        Ok(Prepared { items: Self::assemble(samples, raw, std)? })
    }

    fn assemble(samples: &[Sample], raw: Vec<Tensor>, std: &Standardizer) -> Result<Vec<Item>> {
        samples
            .iter()
            .zip(raw)
            .map(|(s, r)| Ok(Item { planes: std.apply(&r)?, label: s.label, family: s.family }))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn concat(parts: &[&Prepared]) -> Prepared {
        Prepared { items: parts.iter().flat_map(|p| p.items.iter().cloned()).collect() }
    }

    /// Training view with a random crop, or the centered view without `rng`.
    pub fn view(&self, i: usize, crop: Option<usize>, rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let planes = &self.items[i].planes;
        match crop {
            Some(c) => crop_repad(planes, c, rng),
            None => planes.clone(),
        }
    }
}

/// Crops a `c × c` window (random with `rng`, centered otherwise) and pastes
/// it centered on a zero canvas of the original size.
pub fn crop_repad(planes: &Tensor, c: usize, rng: Option<&mut ChaCha8Rng>) -> Tensor {
    let sh = planes.shape();
    let (ch, h, w) = (sh[0], sh[1], sh[2]);
    if c >= h.min(w) {
        return planes.clone();
    }
    let (my, mx) = (h - c, w - c);
    let (oy, ox) = match rng {
        Some(r) => (r.random_range(0..=my), r.random_range(0..=mx)),
        None => (my / 2, mx / 2),
    };
    let (dy, dx) = (my / 2, mx / 2);
    let mut out = Tensor::zeros([ch, h, w]);
    let src = planes.data();
    let dst = out.data_mut();
    for k in 0..ch {
        for y in 0..c {
            let s = k * h * w + (oy + y) * w + ox;
            let d = k * h * w + (dy + y) * w + dx;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    out
}

/// Replaces each sample, with probability 1/2, by a copy under one of the
/// three standard distortions chosen uniformly.
pub fn distortion_augment(samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let choices = [Distortion::BLUR, Distortion::DOWN, Distortion::JPEG];
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(seed, 90, i as u64);
            if rng.random_bool(0.5) {
                let d = choices[rng.random_range(0..choices.len())];
                Ok(Sample { image: apply_distortion(&s.image, d)?, ..s.clone() })
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

/// Mini-batch Adam over `n` samples. `loss` builds one sample's scalar loss;
/// per-sample gradients are summed in batch order and averaged. Returns the
/// mean loss of each epoch.
pub fn fit<F>(store: &mut ParamStore, cfg: &TrainConfig, n: usize, stream: u64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape<f32>, &ParamStore, usize, &mut ChaCha8Rng) -> Result<Var>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = sample_rng(cfg.seed, stream, epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            for &i in batch {
                let mut t = Tape::new();
                let out = loss(&mut t, store, i, &mut rng)?;
                let l = t.value(out).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::Numerical(format!("loss became {l} in epoch {epoch}")));
                }
                total += l;
                for (id, g) in t.backward(out).params {
                    match acc.get_mut(&id) {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                        None => {
                            acc.insert(id, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let grads: Vec<(ParamId, Tensor)> = acc.into_iter().map(|(id, g)| (id, g.map(|v| v * inv))).collect();
            opt.step(store, &grads);
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Scores every item with the full model.
pub fn score(model: &AleiModel, store: &ParamStore, data: &Prepared, crop: Option<usize>) -> Result<Vec<Scored>> {
    (0..data.len())
        .map(|i| {
            let mut t = Tape::new();
            let f = model.forward(&mut t, store, &data.view(i, crop, None))?;
            let p = read_prediction(&t, &f);
            let it = &data.items[i];
            Ok(Scored { score: p.fused, label: it.label, family: it.family, p: p.p })
        })
        .collect()
}

/// Scores every item with the single-stream probe of modality `j`.
pub fn score_probe(model: &AleiModel, store: &ParamStore, j: usize, data: &Prepared, crop: Option<usize>) -> Result<Vec<Scored>> {
    (0..data.len())
        .map(|i| {
            let mut t = Tape::new();
            let v = model.probe_forward(&mut t, store, j, &data.view(i, crop, None))?;
            let it = &data.items[i];
            Ok(Scored { score: t.value(v).data()[0] as f64, label: it.label, family: it.family, p: Vec::new() })
        })
        .collect()
}

pub fn evaluate(model: &AleiModel, store: &ParamStore, data: &Prepared, crop: Option<usize>) -> Result<Metrics> {
    Metrics::from_scored(&score(model, store, data, crop)?)
}

pub fn evaluate_probe(model: &AleiModel, store: &ParamStore, j: usize, data: &Prepared, crop: Option<usize>) -> Result<Metrics> {
    Metrics::from_scored(&score_probe(model, store, j, data, crop)?)
}
