//! Phase 1 trains each modality's embedding, expert and head on the frozen
//! base, plus the adapter's encoder; phase 2 loads those fragments and trains
//! the fusion modules with the routed loss.

use super::{fit, Checkpoint, Prepared, TrainConfig};
use crate::error::{Error, Result};
use crate::model::AleiModel;
use crate::nn::{Init, Linear};
use crate::param::ParamStore;

pub const BASE_PREFIX: &str = "backbone.base.";
const ENCODER_PREFIX: &str = "adapter.encoder.";

fn modality_prefixes(model: &AleiModel, j: usize) -> [String; 3] {
    let k = model.kinds()[j];
    [format!("backbone.embed.{k}."), format!("backbone.lora.{k}."), format!("heads.{j}.")]
}

/// Trains modality `j` alone with BCE on its head. Only that modality's
/// embedding, expert and head are updated.
pub fn train_phase1(model: &AleiModel, store: &mut ParamStore, j: usize, data: &Prepared, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if j >= model.streams() {
        return Err(Error::Config(format!("modality index {j} outside 0..{}", model.streams())));
    }
    let pre = modality_prefixes(model, j);
    store.set_trainable(|n| pre.iter().any(|p| n.starts_with(p.as_str())));
    fit(store, cfg, data.len(), 100 + j as u64, |t, s, i, rng| {
        let x = data.view(i, cfg.crop, Some(rng));
        let p = model.probe_forward(t, s, j, &x)?;
        Ok(t.bce(p, data.items[i].label as f64))
    })
}

/// The frozen base plus modality `j`'s trained parameters.
pub fn phase1_fragment(model: &AleiModel, store: &ParamStore, j: usize) -> Checkpoint {
    let pre = modality_prefixes(model, j);
    Checkpoint::from_store(store, |n| n.starts_with(BASE_PREFIX) || pre.iter().any(|p| n.starts_with(p.as_str())))
}

/// Trains the low-level encoder through a temporary logistic head on `G₀`.
/// Only `adapter.encoder.*` is written back to `store`.
pub fn train_encoder(model: &AleiModel, store: &mut ParamStore, data: &Prepared, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let adapter = model.adapter.as_ref().ok_or_else(|| Error::Config("the adapter is disabled".into()))?;
    let mut tmp = store.clone();
    let head = Linear::new(&mut tmp, 0, "probe.encoder", model.cfg.backbone.dim, 1, Init::Zeros, true, true)?;
    tmp.set_trainable(|n| n.starts_with(ENCODER_PREFIX) || n.starts_with("probe.encoder."));
    let losses = fit(&mut tmp, cfg, data.len(), 99, |t, s, i, rng| {
        let x = data.view(i, cfg.crop, Some(rng));
        let g = adapter.encode_lowlevel(t, s, &model.low_level_planes(&x))?;
        let z = head.forward(t, s, g);
        let p = t.sigmoid(z);
        let p = t.reshape(p, &[1]);
        Ok(t.bce(p, data.items[i].label as f64))
    })?;
    Checkpoint::from_store(&tmp, |n| n.starts_with(ENCODER_PREFIX)).load_into(store)?;
    Ok(losses)
}

pub fn encoder_fragment(store: &ParamStore) -> Checkpoint {
    Checkpoint::from_store(store, |n| n.starts_with(ENCODER_PREFIX))
}

/// Loads phase-1 fragments after checking that one exists per modality (and
/// for the encoder when the adapter is on) and that every carried base
/// tensor matches the model's base bitwise.
pub fn load_fragments(model: &AleiModel, store: &mut ParamStore, fragments: &[Checkpoint]) -> Result<()> {
    for k in model.kinds() {
        let pre = format!("backbone.embed.{k}.");
        if !fragments.iter().any(|f| f.contains_prefix(&pre)) {
            return Err(Error::Config(format!("missing phase-1 fragment for modality {k}")));
        }
    }
    if model.adapter.is_some() && !fragments.iter().any(|f| f.contains_prefix(ENCODER_PREFIX)) {
        return Err(Error::Config("missing phase-1 fragment for the low-level encoder".into()));
    }
    for f in fragments {
        for (n, t) in f.entries.iter().filter(|(n, _)| n.starts_with(BASE_PREFIX)) {
            match store.value(n) {
                Some(v) if v.bit_eq(t) => {}
                _ => return Err(Error::Contract(format!("fragment base tensor {n} differs from the model's base"))),
            }
        }
        f.filter(|n| !n.starts_with(BASE_PREFIX)).load_into(store)?;
    }
    Ok(())
}

/// Loads `fragments` and trains everything except the base and the
/// embeddings (and the experts when frozen) with the total loss.
pub fn train_phase2(
    model: &AleiModel,
    store: &mut ParamStore,
    fragments: &[Checkpoint],
    data: &Prepared,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    load_fragments(model, store, fragments)?;
    store.set_trainable(|n| {
        !n.starts_with(BASE_PREFIX) && !n.starts_with("backbone.embed.") && !(cfg.freeze_lora && n.starts_with("backbone.lora."))
    });
    fit(store, cfg, data.len(), 200, |t, s, i, rng| {
        let x = data.view(i, cfg.crop, Some(rng));
        let f = model.forward(t, s, &x)?;
        Ok(model.loss(t, &f, data.items[i].label as f64, cfg.lambda, cfg.moe_sign))
    })
}
