//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset. Property criteria
//! (1–5, 9, 10) set the exit code; the desk-scale training analogs (6, 7, 8,
//! 11) are reported without failing the run.

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use alei::adapter::EncoderConfig;
use alei::backbone::{default_fusion_layers, BackboneConfig};
use alei::data::{gen_real, read_dataset, write_dataset, CorpusConfig, Dataset, Distortion, Family};
use alei::extract::ExtractorKind;
use alei::gradcheck::{end_to_end, op_suite, Dims};
use alei::model::{AleiModel, Components, ModelConfig};
use alei::router::{mixture, total_loss, MoeSign, Router};
use alei::train::experiment::{ablate, ablation_grid, late_fusion, run_phase1, run_phase2, Bundle, ExperimentConfig};
use alei::train::{accuracy, average_precision, evaluate, Checkpoint, TrainConfig, BASE_PREFIX};
use alei::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Reduced corpus for the multi-seed training criteria: half the training
/// split, half the benches and three phase-2 epochs.
fn desk() -> ExperimentConfig {
    ExperimentConfig { n_train: 1000, n_test: 300, phase2_epochs: Some(3), ..Default::default() }
}

fn small_model(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusConfig { size: 16, ..Default::default() },
        n_train: 32,
        n_test: 16,
        model: ModelConfig {
            backbone: BackboneConfig {
                image_size: 16,
                patch: 4,
                dim: 16,
                layers: 2,
                heads: 2,
                fusion_layers: default_fusion_layers(2),
                ..Default::default()
            },
            encoder: EncoderConfig { channels: (4, 8), groups: 2 },
            seed,
        },
        train: TrainConfig { epochs: 2, batch: 8, crop: Some(14), lr: 1e-3, seed, ..Default::default() },
        ..Default::default()
    }
}

fn gradient_fidelity() -> alei::Result<Outcome> {
    let t0 = Instant::now();
    let ops = op_suite(10)?;
    let (op, op_err) = ops.iter().fold(("", 0.0), |w, &(n, e)| if e > w.1 { (n, e) } else { w });
    let e2e = end_to_end(Dims::Tiny, 0)?;
    let took = t0.elapsed();
    let pass = op_err < 1e-4 && e2e.max_rel_err < 1e-4 && took < Duration::from_secs(60);
    Ok(outcome(
        pass,
        format!(
            "end-to-end {:.2e} over {} coords, worst op {op} {op_err:.2e} over {} ops x 10 points, {}",
            e2e.max_rel_err,
            e2e.coords,
            ops.len(),
            secs(took)
        ),
    ))
}

fn zero_init_transparency() -> alei::Result<Outcome> {
    let t0 = Instant::now();
    let cfg = ModelConfig::default();
    let mut full = ParamStore::<f32>::new();
    let model = AleiModel::new(&mut full, &cfg, Components::default())?;
    let mut base = ParamStore::<f32>::new();
    let reference = AleiModel::new(&mut base, &cfg, Components::none())?;
    let s = cfg.backbone.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut identical = true;
    let mut fused_half = true;
    for _ in 0..4 {
        let planes = Tensor::<f32>::from_fn([3 * model.streams(), s, s], |_| rng.sample(StandardNormal));
        let mut t = Tape::new();
        let streams: Vec<_> = (0..model.streams()).map(|j| t.constant(model.stream_planes(&planes, j))).collect();
        let adapter = model.adapter.as_ref().expect("adapter on");
        let g = adapter.encode_lowlevel(&mut t, &full, &model.low_level_planes(&planes))?;
        let (outs, _) = model.backbone.forward(&mut t, &full, &streams, Some((adapter, g)));
        for (j, &o) in outs.iter().enumerate() {
            let mut r = Tape::new();
            let x = r.constant(reference.stream_planes(&planes, j));
            let y = reference.backbone.stream_forward(&mut r, &base, j, x);
            identical &= t.value(o).bit_eq(r.value(y));
        }
        let p = model.predict(&full, &planes)?;
        fused_half &= p.fused == 0.5 && p.per_head.iter().all(|&h| h == 0.5);
    }
    let took = t0.elapsed();
    let pass = identical && fused_half && took < Duration::from_secs(10);
    Ok(outcome(
        pass,
        format!("{} streams bitwise equal to base-only passes: {identical}, fused output 0.5: {fused_half}, {}", model.streams(), secs(took)),
    ))
}

fn frozen_base_invariance() -> alei::Result<Outcome> {
    let cfg = small_model(5);
    let data = Bundle::build(&cfg)?;
    let mut fresh = ParamStore::<f32>::new();
    AleiModel::new(&mut fresh, &cfg.model, Components::default())?;
    let before = Checkpoint::from_store(&fresh, |n| n.starts_with(BASE_PREFIX)).to_bytes()?;
    let p1 = run_phase1(&cfg, Components::default(), &data)?;
    let after1 = Checkpoint::from_store(&p1.store, |n| n.starts_with(BASE_PREFIX)).to_bytes()?;
    let trained = run_phase2(&cfg, Components::default(), &data, &p1)?;
    let after2 = Checkpoint::from_store(&trained.store, |n| n.starts_with(BASE_PREFIX)).to_bytes()?;
    let moved = Checkpoint::from_store(&trained.store, |n| !n.starts_with(BASE_PREFIX)).to_bytes()?
        != Checkpoint::from_store(&fresh, |n| !n.starts_with(BASE_PREFIX)).to_bytes()?;
    let pass = before == after1 && before == after2 && moved;
    Ok(outcome(pass, format!("{} base bytes unchanged after both phases, trainable tensors moved: {moved}", before.len())))
}

fn router_contracts() -> alei::Result<Outcome> {
    let (streams, dim) = (4, 8);
    let mut store = ParamStore::<f64>::new();
    let router = Router::new(&mut store, streams, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ln = (streams as f64).ln();
    let (mut sum_err, mut h_err, mut bound_ok) = (0f64, 0f64, true);
    for _ in 0..1000 {
        let scale = rng.random_range(0.01..5.0);
        store.get_mut(router.w).value = randn(&mut rng, &[streams * dim, streams], scale);
        store.get_mut(router.b).value = randn(&mut rng, &[streams], scale);
        let mut t = Tape::new();
        let x = t.constant(randn(&mut rng, &[1, streams * dim], 1.0));
        let p = router.route(&mut t, &store, x);
        sum_err = sum_err.max((t.value(p).sum() - 1.0).abs());
        let h = t.entropy(p);
        let hv = t.value(h).data()[0];
        h_err = h_err.max((-hv).max(hv - ln).max(0.0));
        let heads: Vec<f64> = (0..streams).map(|_| rng.random_range(0.0..1.0)).collect();
        let hv = t.constant(Tensor::new([1, streams], heads.clone())?);
        let fused = mixture(&mut t, p, hv);
        let f = t.value(fused).data()[0];
        let (lo, hi) = heads.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        bound_ok &= lo - 1e-12 <= f && f <= hi + 1e-12;
    }
    let mut t = Tape::<f64>::new();
    let one_hot = t.constant(Tensor::new([1, streams], vec![0.0, 1.0, 0.0, 0.0])?);
    let uniform = t.constant(Tensor::full([1, streams], 0.25));
    let (h0, hu) = (t.entropy(one_hot), t.entropy(uniform));
    let (h0, hu) = (t.value(h0).data()[0], t.value(hu).data()[0]);
    let extremes = h0.abs() < 1e-9 && (hu - ln).abs() < 1e-9;
    let pass = sum_err < 1e-6 && h_err < 1e-12 && bound_ok && extremes;
    Ok(outcome(
        pass,
        format!(
            "max |sum p - 1| {sum_err:.1e}, entropy range violations {h_err:.1e}, one-hot H {h0:.1e}, uniform H - ln 4 {:.1e}, mixture bounds hold: {bound_ok}",
            hu - ln
        ),
    ))
}

fn loss_closed_forms() -> alei::Result<Outcome> {
    let mut t = Tape::<f64>::new();
    let half = t.constant(Tensor::new([1], vec![0.5])?);
    let bce = t.bce(half, 1.0);
    let p = t.constant(Tensor::full([1, 4], 0.25));
    let total = total_loss(&mut t, 1.0, half, Some(p), 0.1, MoeSign::Literal);
    let (b, l) = (t.value(bce).data()[0], t.value(total).data()[0]);
    let pass = (b - std::f64::consts::LN_2).abs() < 1e-6 && (l - 0.831777).abs() < 1e-5;
    Ok(outcome(pass, format!("bce(1, 0.5) = {b:.7}, total = {l:.7}")))
}

fn matched_probes() -> alei::Result<Outcome> {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    let data = Bundle::build(&cfg)?;
    let p1 = run_phase1(&cfg, Components::disabling("liia")?, &data)?;
    let took = t0.elapsed();
    let matched = [(ExtractorKind::Npr, Family::Up), (ExtractorKind::Srm, Family::Hf), (ExtractorKind::Bayar, Family::Cb)];
    let mut pass = took < Duration::from_secs(600);
    let mut parts = Vec::new();
    for p in &p1.probes {
        let accs: Vec<String> = p.benches.iter().map(|(f, m)| format!("{f} {:.3}", m.acc)).collect();
        parts.push(format!("{} [{}]", p.kind, accs.join(", ")));
        if let Some(&(_, fam)) = matched.iter().find(|(k, _)| *k == p.kind) {
            let own = p.acc_on(fam).unwrap_or(0.0);
            let worst_other = p.benches.iter().filter(|(f, _)| *f != fam).map(|(_, m)| m.acc).fold(1.0, f64::min);
            pass &= own >= 0.90 && worst_other <= 0.75;
        }
    }
    Ok(outcome(pass, format!("{}; {}", parts.join("; "), secs(took))))
}

struct SeedRun {
    full: f64,
    best_probe: f64,
    late: f64,
    rows: Vec<(String, f64)>,
    csv: String,
}

fn fusion_runs() -> alei::Result<Vec<SeedRun>> {
    let grid = ablation_grid(Components::disabling("le,cla,liia,dfs")?);
    let singles: Vec<Components> = grid.iter().copied().filter(|c| c.disabled().len() <= 1).collect();
    SEEDS
        .iter()
        .map(|&seed| {
            let t0 = Instant::now();
            let cfg = desk().reseeded(seed);
            let data = Bundle::build(&cfg)?;
            let ab = ablate(&cfg, &singles, &data)?;
            let p1 = ab.phase1_for(true).expect("full phase 1");
            let late = late_fusion(&cfg, &data, p1, &data.mixed)?.acc;
            let rows: Vec<(String, f64)> = ab.rows.iter().map(|r| (r.comps.to_string(), r.mixed.acc)).collect();
            let full = ab.row(Components::default()).expect("full row").mixed.acc;
            let csv: String = ab.csv().lines().skip(1).map(|l| format!("{seed},{l}\n")).collect();
            let run = SeedRun { full, best_probe: p1.best_probe_mixed(), late, rows, csv };
            println!(
                "    seed {seed}: full {:.3}, best probe {:.3}, late {:.3}, rows {:?} ({})",
                run.full,
                run.best_probe,
                run.late,
                run.rows,
                secs(t0.elapsed())
            );
            Ok(run)
        })
        .collect()
}

fn fusion_gain(runs: &[SeedRun]) -> Outcome {
    let full = median(runs.iter().map(|r| r.full).collect());
    let probe = median(runs.iter().map(|r| r.best_probe).collect());
    let late = median(runs.iter().map(|r| r.late).collect());
    let pass = full >= probe - 0.02 && full >= late - 0.02;
    outcome(pass, format!("median mixed acc: full {full:.3}, best single probe {probe:.3}, late fusion {late:.3}"))
}

fn ablation_trend(runs: &[SeedRun]) -> alei::Result<Outcome> {
    let names: Vec<String> = runs[0].rows.iter().map(|(n, _)| n.clone()).collect();
    let med = |name: &str| median(runs.iter().map(|r| r.rows.iter().find(|(n, _)| n == name).expect("row").1).collect());
    let full = med("full");
    let mut pass = true;
    let mut parts = Vec::new();
    for n in names.iter().filter(|n| *n != "full") {
        let m = med(n);
        pass &= full >= m - 0.03;
        parts.push(format!("{n} {m:.3}"));
    }
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ablation.csv");
    let mut csv = String::from("seed,config,mixed_acc,mixed_ap,all_acc,all_ap\n");
    for r in runs {
        csv.push_str(&r.csv);
    }
    fs::write(&path, csv)?;
    Ok(outcome(pass, format!("median mixed acc: full {full:.3}, {}; csv {}", parts.join(", "), path.display())))
}

fn metrics_oracle() -> alei::Result<Outcome> {
    let ap = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1])?;
    let (scores, labels) = ([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0]);
    let (acc, ap_perfect) = (accuracy(&scores, &labels)?, average_precision(&scores, &labels)?);
    let pass = (ap - 0.8333).abs() < 1e-4 && acc == 1.0 && ap_perfect == 1.0;
    Ok(outcome(pass, format!("AP {ap:.4}, perfect separation acc {acc} ap {ap_perfect}")))
}

fn serialization() -> alei::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let ds = Dataset::new(gen_real(3, 5, &CorpusConfig::default()));
    let path = dir.path().join("five.alds");
    write_dataset(&path, &ds)?;
    let size = fs::metadata(&path)?.len();
    let back = read_dataset(&path)?;
    let ds_ok = back.to_bytes()? == ds.to_bytes()? && back.samples.iter().zip(&ds.samples).all(|(a, b)| a.image.bit_eq(&b.image));

    let mut store = ParamStore::<f32>::new();
    AleiModel::new(&mut store, &ModelConfig::default(), Components::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.sample::<f32, _>(StandardNormal) * 1e-3;
        }
    }
    let ck = Checkpoint::from_store(&store, |_| true);
    let cpath = dir.path().join("model.ckpt");
    ck.write(&cpath)?;
    let mut restored = ParamStore::<f32>::new();
    AleiModel::new(&mut restored, &ModelConfig::default(), Components::default())?;
    Checkpoint::read(&cpath)?.load_into(&mut restored)?;
    let ck_ok = store.iter().all(|(_, p)| restored.value(&p.name).is_some_and(|v| v.bit_eq(&p.value)));
    let pass = size == 61_491 && ds_ok && ck_ok;
    Ok(outcome(pass, format!("5x3x32x32 dataset {size} bytes, dataset round trip {ds_ok}, checkpoint round trip {ck_ok} ({} tensors)", ck.entries.len())))
}

fn robustness() -> alei::Result<Outcome> {
    let dists = [Distortion::BLUR, Distortion::DOWN, Distortion::JPEG];
    let mut drops: Vec<Vec<f64>> = vec![Vec::new(); dists.len()];
    let mut clean = Vec::new();
    for &seed in &SEEDS {
        let t0 = Instant::now();
        let cfg = ExperimentConfig { augment: true, ..desk() }.reseeded(seed);
        let data = Bundle::build(&cfg)?;
        let p1 = run_phase1(&cfg, Components::default(), &data)?;
        let trained = run_phase2(&cfg, Components::default(), &data, &p1)?;
        let c = evaluate(&trained.model, &trained.store, &data.all_benches(), cfg.train.crop)?.acc;
        let mut line = format!("    seed {seed}: clean {c:.3}");
        for (k, &d) in dists.iter().enumerate() {
            let a = evaluate(&trained.model, &trained.store, &data.distorted(d, &cfg)?, cfg.train.crop)?.acc;
            drops[k].push(c - a);
            line.push_str(&format!(", {d} {a:.3}"));
        }
        clean.push(c);
        println!("{line} ({})", secs(t0.elapsed()));
    }
    let med: Vec<f64> = drops.into_iter().map(median).collect();
    let pass = med.iter().all(|&d| d <= 0.15);
    let parts: Vec<String> = dists.iter().zip(&med).map(|(d, m)| format!("{d} {m:+.3}")).collect();
    Ok(outcome(pass, format!("median clean acc {:.3}, median drop {}", median(clean), parts.join(", "))))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    const GATING: [usize; 7] = [1, 2, 3, 4, 5, 9, 10];
    let mut failed_gate = false;
    let mut report = |n: usize, name: &str, r: alei::Result<Outcome>| {
        let r = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let kind = if GATING.contains(&n) { "" } else { " [desk analog]" };
        println!("criterion {n:>2} {} {name}{kind}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed_gate |= !r.pass && GATING.contains(&n);
    };
    if on(1) {
        report(1, "gradient fidelity", gradient_fidelity());
    }
    if on(2) {
        report(2, "zero-init transparency", zero_init_transparency());
    }
    if on(3) {
        report(3, "frozen-base invariance", frozen_base_invariance());
    }
    if on(4) {
        report(4, "router and entropy contracts", router_contracts());
    }
    if on(5) {
        report(5, "loss closed forms", loss_closed_forms());
    }
    if on(6) {
        report(6, "matched-family probes", matched_probes());
    }
    if on(7) || on(8) {
        match fusion_runs() {
            Ok(runs) => {
                if on(7) {
                    report(7, "fusion gain", Ok(fusion_gain(&runs)));
                }
                if on(8) {
                    report(8, "ablation trend", ablation_trend(&runs));
                }
            }
            Err(e) => {
                let msg = format!("{e}");
                for n in [7, 8].into_iter().filter(|&n| on(n)) {
                    report(n, "multi-seed fusion runs", Err(alei::Error::Contract(msg.clone())));
                }
            }
        }
    }
    if on(9) {
        report(9, "metrics oracle", metrics_oracle());
    }
    if on(10) {
        report(10, "serialization", serialization());
    }
    if on(11) {
        report(11, "robustness", robustness());
    }
    if failed_gate {
        std::process::exit(1);
    }
}
