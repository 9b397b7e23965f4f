//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use alei::backbone::default_fusion_layers;
use alei::data::{Family, HfBand};
use alei::extract::{kinds_to_string, parse_kinds};
use alei::model::Components;
use alei::train::experiment::ExperimentConfig;
use alei::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub exp: ExperimentConfig,
    /// Components switched off.
    pub disable: Components,
    /// Recompute the fusion schedule from `layers`.
    pub fusion_auto: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { exp: ExperimentConfig::default(), disable: Components::default(), fusion_auto: true }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid value {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 39] = [
        "seed",
        "data_seed",
        "n_train",
        "n_test",
        "train_families",
        "test_families",
        "size",
        "sigma_min",
        "sigma_max",
        "hf_band",
        "hf_gain",
        "hf_floor",
        "cb_amp",
        "kinds",
        "npr_factor",
        "hpr_sigma",
        "patch",
        "dim",
        "layers",
        "heads",
        "lora_rank",
        "lora_alpha",
        "fusion_layers",
        "ffn_mult",
        "per_modality_gate",
        "encoder_channels",
        "encoder_groups",
        "lr",
        "beta1",
        "beta2",
        "batch",
        "epochs",
        "phase2_epochs",
        "lambda",
        "moe_sign",
        "freeze_lora",
        "crop",
        "augment",
        "disable",
    ];

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", ln + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", ln + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.exp;
        let bb = &mut e.model.backbone;
        match key {
            "seed" => {
                let s = num(key, v)?;
                e.model.seed = s;
                e.train.seed = s;
            }
            "data_seed" => e.data_seed = num(key, v)?,
            "n_train" => e.n_train = num(key, v)?,
            "n_test" => e.n_test = num(key, v)?,
            "train_families" => e.train_families = Family::parse_fakes(v)?,
            "test_families" => e.test_families = Family::parse_fakes(v)?,
            "size" => {
                let s = num(key, v)?;
                e.corpus.size = s;
                bb.image_size = s;
            }
            "sigma_min" => e.corpus.sigma_min = num(key, v)?,
            "sigma_max" => e.corpus.sigma_max = num(key, v)?,
            "hf_band" => e.corpus.hf_band = v.parse::<HfBand>()?,
            "hf_gain" => e.corpus.hf_gain = num(key, v)?,
            "hf_floor" => e.corpus.hf_floor = num(key, v)?,
            "cb_amp" => e.corpus.cb_amp = num(key, v)?,
            "kinds" => bb.kinds = parse_kinds(v)?,
            "npr_factor" => e.extract.npr_factor = num(key, v)?,
            "hpr_sigma" => e.extract.hpr_sigma = num(key, v)?,
            "patch" => bb.patch = num(key, v)?,
            "dim" => bb.dim = num(key, v)?,
            "layers" => bb.layers = num(key, v)?,
            "heads" => bb.heads = num(key, v)?,
            "lora_rank" => bb.lora_rank = num(key, v)?,
            "lora_alpha" => bb.lora_alpha = num(key, v)?,
            "fusion_layers" => {
                if v == "auto" {
                    self.fusion_auto = true;
                } else {
                    bb.fusion_layers =
                        v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect::<Result<_>>()?;
                    self.fusion_auto = false;
                }
            }
            "ffn_mult" => bb.ffn_mult = num(key, v)?,
            "per_modality_gate" => bb.per_modality_gate = flag(key, v)?,
            "encoder_channels" => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("{key}: expected two comma-separated widths, got {v:?}")))?;
                e.model.encoder.channels = (num(key, a.trim())?, num(key, b.trim())?);
            }
            "encoder_groups" => e.model.encoder.groups = num(key, v)?,
            "lr" => e.train.lr = num(key, v)?,
            "beta1" => e.train.beta1 = num(key, v)?,
            "beta2" => e.train.beta2 = num(key, v)?,
            "batch" => e.train.batch = num(key, v)?,
            "epochs" => e.train.epochs = num(key, v)?,
            "phase2_epochs" => e.phase2_epochs = if v == "same" { None } else { Some(num(key, v)?) },
            "lambda" => e.train.lambda = num(key, v)?,
            "moe_sign" => e.train.moe_sign = v.parse()?,
            "freeze_lora" => e.train.freeze_lora = flag(key, v)?,
            "crop" => e.train.crop = if v == "none" { None } else { Some(num(key, v)?) },
            "augment" => e.augment = flag(key, v)?,
            "disable" => self.disable = Components::disabling(v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}; known keys: {}", Self::KEYS.join(", ")))),
        }
        Ok(())
    }

    /// The experiment with the derived fields resolved and checked.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut e = self.exp.clone();
        if self.fusion_auto {
            e.model.backbone.fusion_layers = default_fusion_layers(e.model.backbone.layers);
        }
        e.model.backbone.validate()?;
        e.train.validate()?;
        e.phase2_train().validate()?;
        Ok(e)
    }

    /// Every key in a fixed order; reading it back reproduces the run.
    pub fn echo(&self) -> String {
        let e = &self.exp;
        let bb = &e.model.backbone;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", e.model.seed.to_string());
        put("data_seed", e.data_seed.to_string());
        put("n_train", e.n_train.to_string());
        put("n_test", e.n_test.to_string());
        put("train_families", list(&e.train_families));
        put("test_families", list(&e.test_families));
        put("size", bb.image_size.to_string());
        put("sigma_min", e.corpus.sigma_min.to_string());
        put("sigma_max", e.corpus.sigma_max.to_string());
        put("hf_band", e.corpus.hf_band.name().to_string());
        put("hf_gain", e.corpus.hf_gain.to_string());
        put("hf_floor", e.corpus.hf_floor.to_string());
        put("cb_amp", e.corpus.cb_amp.to_string());
        put("kinds", kinds_to_string(&bb.kinds));
        put("npr_factor", e.extract.npr_factor.to_string());
        put("hpr_sigma", e.extract.hpr_sigma.to_string());
        put("patch", bb.patch.to_string());
        put("dim", bb.dim.to_string());
        put("layers", bb.layers.to_string());
        put("heads", bb.heads.to_string());
        put("lora_rank", bb.lora_rank.to_string());
        put("lora_alpha", bb.lora_alpha.to_string());
        put("fusion_layers", if self.fusion_auto { "auto".into() } else { list(&bb.fusion_layers) });
        put("ffn_mult", bb.ffn_mult.to_string());
        put("per_modality_gate", bb.per_modality_gate.to_string());
        put("encoder_channels", format!("{},{}", e.model.encoder.channels.0, e.model.encoder.channels.1));
        put("encoder_groups", e.model.encoder.groups.to_string());
        put("lr", e.train.lr.to_string());
        put("beta1", e.train.beta1.to_string());
        put("beta2", e.train.beta2.to_string());
        put("batch", e.train.batch.to_string());
        put("epochs", e.train.epochs.to_string());
        put("phase2_epochs", e.phase2_epochs.map_or("same".into(), |n| n.to_string()));
        put("lambda", e.train.lambda.to_string());
        put("moe_sign", e.train.moe_sign.name().to_string());
        put("freeze_lora", e.train.freeze_lora.to_string());
        put("crop", e.train.crop.map_or("none".into(), |c| c.to_string()));
        put("augment", e.augment.to_string());
        put("disable", self.disable.disabled().join(","));
        s
    }
}
