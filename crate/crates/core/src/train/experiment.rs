//! End-to-end runs on the synthetic corpus: both phases, the fusion
//! baselines, component ablations and the distortion benches.

use super::baselines::{cls_features, EarlyFusion, LateFusion};
use super::{
    distortion_augment, encoder_fragment, evaluate, evaluate_probe, phase1_fragment, train_encoder, train_phase1,
    train_phase2, Checkpoint, Metrics, Prepared, TrainConfig,
};
use crate::data::{apply_distortion, Corpus, CorpusConfig, Distortion, Family, Sample};
use crate::error::Result;
use crate::extract::{ExtractConfig, ExtractorKind, Standardizer};
use crate::model::{AleiModel, Components, ModelConfig};
use crate::param::ParamStore;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Seed of the corpus; model and training seeds live in `model` and `train`.
    pub data_seed: u64,
    pub n_train: usize,
    /// Samples per test bench, half real.
    pub n_test: usize,
    pub train_families: Vec<Family>,
    pub test_families: Vec<Family>,
    pub model: ModelConfig,
    pub extract: ExtractConfig,
    pub train: TrainConfig,
    /// Phase-2 epochs when they differ from `train.epochs`.
    pub phase2_epochs: Option<usize>,
    /// Train on the distortion-augmented split.
    pub augment: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            data_seed: 0,
            n_train: 2000,
            n_test: 600,
            train_families: vec![Family::Up],
            test_families: Family::FAKES.to_vec(),
            model: ModelConfig::default(),
            extract: ExtractConfig::default(),
            train: TrainConfig::default(),
            phase2_epochs: None,
            augment: false,
        }
    }
}

impl ExperimentConfig {
    /// Same corpus, model and training seed `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn kinds(&self) -> &[ExtractorKind] {
        &self.model.backbone.kinds
    }

    pub fn phase2_train(&self) -> TrainConfig {
        TrainConfig { epochs: self.phase2_epochs.unwrap_or(self.train.epochs), ..self.train.clone() }
    }
}

/// Prepared splits. `mixed` joins the benches of the families not seen in
/// training.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub std: Standardizer,
    pub train: Prepared,
    pub raw_benches: Vec<(Family, Vec<Sample>)>,
    pub benches: Vec<(Family, Prepared)>,
    pub mixed: Prepared,
}

impl Bundle {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let corpus = Corpus::generate(
            cfg.data_seed,
            cfg.n_train,
            &cfg.train_families,
            cfg.n_test,
            &cfg.test_families,
            &cfg.corpus,
        )?;
        let train_raw = if cfg.augment { distortion_augment(&corpus.train, cfg.data_seed)? } else { corpus.train };
        let (train, std) = Prepared::fit(&train_raw, cfg.kinds(), &cfg.extract)?;
        let benches = corpus
            .tests
            .iter()
            .map(|(f, s)| Ok((*f, Prepared::with(s, cfg.kinds(), &cfg.extract, &std)?)))
            .collect::<Result<Vec<_>>>()?;
        let unseen: Vec<&Prepared> =
            benches.iter().filter(|(f, _)| !cfg.train_families.contains(f)).map(|(_, p)| p).collect();
        let mixed = Prepared::concat(&unseen);
        Ok(Bundle { std, train, raw_benches: corpus.tests, benches, mixed })
    }

    /// Every bench joined, in family order.
    pub fn all_benches(&self) -> Prepared {
        Prepared::concat(&self.benches.iter().map(|(_, p)| p).collect::<Vec<_>>())
    }

    /// Every bench under distortion `d`, standardized with the training statistics.
    pub fn distorted(&self, d: Distortion, cfg: &ExperimentConfig) -> Result<Prepared> {
        let mut samples = Vec::new();
        for (_, bench) in &self.raw_benches {
            for s in bench {
                samples.push(Sample { image: apply_distortion(&s.image, d)?, ..s.clone() });
            }
        }
        Prepared::with(&samples, cfg.kinds(), &cfg.extract, &self.std)
    }
}

/// One modality's probe after phase 1.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub kind: ExtractorKind,
    pub losses: Vec<f64>,
    pub benches: Vec<(Family, Metrics)>,
    pub mixed: Metrics,
}

impl ProbeResult {
    pub fn acc_on(&self, f: Family) -> Option<f64> {
        self.benches.iter().find(|(g, _)| *g == f).map(|(_, m)| m.acc)
    }
}

#[derive(Debug, Clone)]
pub struct Phase1 {
    pub comps: Components,
    pub model: AleiModel,
    /// Every modality trained, plus the encoder when the adapter is on.
    pub store: ParamStore,
    pub fragments: Vec<Checkpoint>,
    pub probes: Vec<ProbeResult>,
    pub encoder_losses: Option<Vec<f64>>,
}

impl Phase1 {
    /// Highest held-out accuracy of any single probe on the mixed split.
    pub fn best_probe_mixed(&self) -> f64 {
        self.probes.iter().map(|p| p.mixed.acc).fold(0.0, f64::max)
    }
}

/// Trains every modality probe, and the encoder when `comps.liia` holds.
/// Only `le` and `liia` affect this phase.
pub fn run_phase1(cfg: &ExperimentConfig, comps: Components, data: &Bundle) -> Result<Phase1> {
    run_phase1_sharing(cfg, comps, data, None)
}

/// As [`run_phase1`], taking the encoder from `donor` when it has one. The
/// encoder sees only the low-level planes, so it does not depend on `le`.
fn run_phase1_sharing(cfg: &ExperimentConfig, comps: Components, data: &Bundle, donor: Option<&Phase1>) -> Result<Phase1> {
    let mut store = ParamStore::new();
    let model = AleiModel::new(&mut store, &cfg.model, comps)?;
    let crop = cfg.train.crop;
    let mut fragments = Vec::new();
    let mut probes = Vec::new();
    for j in 0..model.streams() {
        let losses = train_phase1(&model, &mut store, j, &data.train, &cfg.train)?;
        fragments.push(phase1_fragment(&model, &store, j));
        let benches = data
            .benches
            .iter()
            .map(|(f, b)| Ok((*f, evaluate_probe(&model, &store, j, b, crop)?)))
            .collect::<Result<Vec<_>>>()?;
        let mixed = evaluate_probe(&model, &store, j, &data.mixed, crop)?;
        probes.push(ProbeResult { kind: model.kinds()[j], losses, benches, mixed });
    }
    let shared = donor.and_then(|d| Some((d.fragments.last()?, d.encoder_losses.as_ref()?)));
    let encoder_losses = match (comps.liia, shared) {
        (false, _) => None,
        (true, Some((frag, losses))) => {
            frag.load_into(&mut store)?;
            fragments.push(frag.clone());
            Some(losses.clone())
        }
        (true, None) => {
            let l = train_encoder(&model, &mut store, &data.train, &cfg.train)?;
            fragments.push(encoder_fragment(&store));
            Some(l)
        }
    };
    Ok(Phase1 { comps, model, store, fragments, probes, encoder_losses })
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: AleiModel,
    pub store: ParamStore,
    pub losses: Vec<f64>,
}

impl Trained {
    pub fn evaluate(&self, data: &Prepared, crop: Option<usize>) -> Result<Metrics> {
        evaluate(&self.model, &self.store, data, crop)
    }
}

/// Builds a model with `comps`, loads the phase-1 fragments it has names for
/// and trains the fusion modules.
pub fn run_phase2(cfg: &ExperimentConfig, comps: Components, data: &Bundle, p1: &Phase1) -> Result<Trained> {
    let mut store = ParamStore::new();
    let model = AleiModel::new(&mut store, &cfg.model, comps)?;
    let frags: Vec<Checkpoint> = p1.fragments.iter().map(|f| f.filter(|n| store.id(n).is_some())).collect();
    let losses = train_phase2(&model, &mut store, &frags, &data.train, &cfg.phase2_train())?;
    Ok(Trained { model, store, losses })
}

/// Late-fusion head over the phase-1 CLS features.
pub fn late_fusion(cfg: &ExperimentConfig, data: &Bundle, p1: &Phase1, eval_on: &Prepared) -> Result<Metrics> {
    let crop = cfg.train.crop;
    let feats = cls_features(&p1.model, &p1.store, &data.train, crop)?;
    let labels: Vec<u8> = data.train.items.iter().map(|it| it.label).collect();
    let mut late = LateFusion::new(feats[0].len())?;
    late.train(&feats, &labels, &cfg.train)?;
    late.evaluate(&cls_features(&p1.model, &p1.store, eval_on, crop)?, eval_on)
}

pub fn early_fusion(cfg: &ExperimentConfig, data: &Bundle, eval_on: &Prepared) -> Result<Metrics> {
    let mut store = ParamStore::new();
    let early = EarlyFusion::new(&mut store, &cfg.model.backbone, cfg.model.seed)?;
    early.train(&mut store, &data.train, &cfg.train)?;
    early.evaluate(&store, eval_on, cfg.train.crop)
}

/// Full model followed by each component switched off alone, and by all of
/// `disable` together when it names more than one.
pub fn ablation_grid(disable: Components) -> Vec<Components> {
    let mut grid = vec![Components::default()];
    let off = disable.disabled();
    for name in &off {
        grid.push(Components::disabling(name).expect("known component"));
    }
    if off.len() > 1 {
        grid.push(disable);
    }
    grid
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub comps: Components,
    pub mixed: Metrics,
    pub all: Metrics,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Phase 1 of each expert setting used, with the adapter's encoder.
    pub phase1: Vec<Phase1>,
}

impl Ablation {
    pub fn phase1_for(&self, le: bool) -> Option<&Phase1> {
        self.phase1.iter().find(|p| p.comps.le == le)
    }

    pub fn row(&self, comps: Components) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.comps == comps)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("config,mixed_acc,mixed_ap,all_acc,all_ap\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.comps, r.mixed.acc, r.mixed.ap, r.all.acc, r.all.ap));
        }
        s
    }
}

/// Trains and evaluates every configuration of `grid`. Phase 1 is run once
/// per expert setting and shared.
pub fn ablate(cfg: &ExperimentConfig, grid: &[Components], data: &Bundle) -> Result<Ablation> {
    let all = data.all_benches();
    let mut phase1: Vec<Phase1> = Vec::new();
    let mut rows = Vec::new();
    for &comps in grid {
        if !phase1.iter().any(|p| p.comps.le == comps.le) {
            let base = Components { le: comps.le, ..Components::default() };
            let p = run_phase1_sharing(cfg, base, data, phase1.first())?;
            phase1.push(p);
        }
        let p1 = phase1.iter().find(|p| p.comps.le == comps.le).expect("cached");
        let trained = run_phase2(cfg, comps, data, p1)?;
        rows.push(AblationRow {
            comps,
            mixed: trained.evaluate(&data.mixed, cfg.train.crop)?,
            all: trained.evaluate(&all, cfg.train.crop)?,
        });
    }
    Ok(Ablation { rows, phase1 })
}
