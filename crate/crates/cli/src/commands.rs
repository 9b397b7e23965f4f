use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use alei::data::{apply_distortion, gen_fake, gen_real, read_dataset, write_dataset, Dataset, Distortion, Family};
use alei::extract::{extract_all, parse_kinds, ExtractConfig, ExtractorKind, Standardizer};
use alei::gradcheck::{end_to_end, op_suite, Dims};
use alei::model::{AleiModel, Components};
use alei::train::experiment::{ablate as run_ablation, ablation_grid, Bundle, ExperimentConfig};
use alei::train::{
    encoder_fragment, phase1_fragment, score, score_probe, train_encoder, train_phase1, train_phase2, Checkpoint, Item,
    Metrics, Prepared, Scored,
};
use alei::{Error, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Error },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::File { source, .. } | CliError::Core(source) => source.exit_code(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

trait At<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> At<T> for alei::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| CliError::File { path: path.to_path_buf(), source })
    }
}

fn io_at<T>(r: std::io::Result<T>, path: &Path) -> Result<T> {
    r.map_err(Error::from).at(path)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::read(p).at(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        c.set("seed", &s.to_string())?;
    }
    Ok(c)
}

fn log_config(c: &RunConfig) {
    eprint!("{}", c.echo());
}

pub fn gen_data(
    out: &Path,
    n_real: usize,
    n_fake: usize,
    families: &str,
    seed: u64,
    size: usize,
    distort: &str,
    config: Option<&Path>,
) -> Result<()> {
    let mut corpus = load_config(config, None)?.exp.corpus;
    corpus.size = size;
    let fams = Family::parse_fakes(families)?;
    let d: Distortion = distort.parse()?;
    let mut samples = gen_real(seed, n_real, &corpus);
    let per = n_fake / fams.len();
    for (k, &f) in fams.iter().enumerate() {
        let n = if k == 0 { n_fake - per * (fams.len() - 1) } else { per };
        samples.extend(gen_fake(seed, n, f, &corpus)?);
    }
    if d != Distortion::None {
        for s in &mut samples {
            s.image = apply_distortion(&s.image, d)?;
        }
    }
    write_dataset(out, &Dataset::new(samples)).at(out)?;
    println!("wrote {} real and {n_fake} fake samples to {}", n_real, out.display());
    Ok(())
}

pub fn extract(data: &Path, out: &Path, kinds: &str, npr_factor: usize, hpr_sigma: f64) -> Result<()> {
    let kinds = parse_kinds(kinds)?;
    let cfg = ExtractConfig { npr_factor, hpr_sigma, ..Default::default() };
    let mut ds = read_dataset(data).at(data)?;
    for s in &mut ds.samples {
        s.image = extract_all(&s.image, &kinds, &cfg).at(data)?;
    }
    write_dataset(out, &ds).at(out)?;
    println!("wrote {} samples with {} channels to {}", ds.len(), 3 * kinds.len(), out.display());
    Ok(())
}

/// Rounds the statistics to what a checkpoint stores.
fn rounded(std: Standardizer) -> Standardizer {
    let channels = std.channels.iter().map(|&(m, s)| (m as f32 as f64, s as f32 as f64)).collect();
    Standardizer { channels, ..std }
}

const STATS_MEAN: &str = "stats.mean";
const STATS_STD: &str = "stats.std";

fn attach_stats(ck: &mut Checkpoint, std: &Standardizer) {
    let n = std.channels.len();
    let mean = Tensor::from_fn([n], |i| std.channels[i].0 as f32);
    let sd = Tensor::from_fn([n], |i| std.channels[i].1 as f32);
    ck.entries.push((STATS_MEAN.into(), mean));
    ck.entries.push((STATS_STD.into(), sd));
}

fn stats_of(ck: &Checkpoint, kinds: &[ExtractorKind]) -> Option<alei::Result<Standardizer>> {
    let (m, s) = (ck.get(STATS_MEAN)?, ck.get(STATS_STD)?);
    if m.len() != 3 * kinds.len() || s.len() != m.len() {
        return Some(Err(Error::Config(format!(
            "checkpoint statistics cover {} channels, the configured kinds need {}",
            m.len(),
            3 * kinds.len()
        ))));
    }
    let channels = m.data().iter().zip(s.data()).map(|(&a, &b)| (a as f64, b as f64)).collect();
    Some(Ok(Standardizer { kinds: kinds.to_vec(), channels }))
}

fn without_stats(ck: &Checkpoint) -> Checkpoint {
    ck.filter(|n| !n.starts_with("stats."))
}

/// Standardized items from a dataset of images or of stacked planes.
fn prepare(ds: &Dataset, exp: &ExperimentConfig, std: Option<&Standardizer>) -> alei::Result<(Prepared, Standardizer)> {
    let kinds = exp.kinds();
    let c = ds.samples.first().ok_or(Error::EmptyDataset)?.image.shape()[0];
    if c == 3 {
        return match std {
            Some(s) => Ok((Prepared::with(&ds.samples, kinds, &exp.extract, s)?, s.clone())),
            None => {
                let (_, s) = Prepared::fit(&ds.samples, kinds, &exp.extract)?;
                let s = rounded(s);
                Ok((Prepared::with(&ds.samples, kinds, &exp.extract, &s)?, s))
            }
        };
    }
    if c != 3 * kinds.len() {
        return Err(Error::Dimension(format!(
            "samples have {c} channels; expected 3 (images) or {} (planes for {})",
            3 * kinds.len(),
            alei::extract::kinds_to_string(kinds)
        )));
    }
    let s = match std {
        Some(s) => s.clone(),
        None => rounded(Standardizer::fit(kinds, ds.samples.iter().map(|s| &s.image))?),
    };
    let items = ds
        .samples
        .iter()
        .map(|x| Ok(Item { planes: s.apply(&x.image)?, label: x.label, family: x.family }))
        .collect::<alei::Result<Vec<_>>>()?;
    Ok((Prepared { items }, s))
}

fn modality_index(model: &AleiModel, name: &str) -> alei::Result<usize> {
    let k: ExtractorKind = name.parse()?;
    model
        .kinds()
        .iter()
        .position(|&x| x == k)
        .ok_or_else(|| Error::Config(format!("--modality {name} is not among the configured kinds")))
}

fn print_losses(losses: &[f64]) {
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {:>2}  loss {l:.6}", e + 1);
    }
}

pub fn train(
    phase: u8,
    modality: Option<&str>,
    config: Option<&Path>,
    data: &Path,
    resume: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_config(config, seed)?;
    log_config(&rc);
    let exp = rc.experiment()?;
    let ds = read_dataset(data).at(data)?;
    let mut store = ParamStore::new();
    let model = AleiModel::new(&mut store, &exp.model, rc.disable)?;
    let mut resumed = Vec::new();
    for p in resume {
        resumed.push((p.clone(), Checkpoint::read(p).at(p)?));
    }
    let t0 = Instant::now();
    let mut ck = if phase == 1 {
        let name = modality.ok_or_else(|| Error::Config("phase 1 needs --modality".into()))?;
        let (train, std) = prepare(&ds, &exp, None).at(data)?;
        for (p, r) in &resumed {
            without_stats(r).load_into(&mut store).at(p)?;
        }
        let mut ck = if name == "encoder" {
            print_losses(&train_encoder(&model, &mut store, &train, &exp.train)?);
            encoder_fragment(&store)
        } else {
            let j = modality_index(&model, name)?;
            print_losses(&train_phase1(&model, &mut store, j, &train, &exp.train)?);
            phase1_fragment(&model, &store, j)
        };
        attach_stats(&mut ck, &std);
        ck
    } else {
        if modality.is_some() {
            return Err(Error::Config("--modality applies to phase 1 only".into()).into());
        }
        if resumed.is_empty() {
            return Err(Error::Config("phase 2 needs the phase-1 fragments via --resume".into()).into());
        }
        let mut std: Option<Standardizer> = None;
        for (p, r) in &resumed {
            if let Some(s) = stats_of(r, model.kinds()) {
                let s = s.at(p)?;
                if std.as_ref().is_some_and(|prev| *prev != s) {
                    return Err(Error::Contract("phase-1 fragments were standardized differently".into())).at(p);
                }
                std = Some(s);
            }
        }
        let std = std.ok_or_else(|| Error::Config("no fragment carries input statistics".into()))?;
        let (train, _) = prepare(&ds, &exp, Some(&std)).at(data)?;
        let frags: Vec<Checkpoint> = resumed.iter().map(|(_, r)| without_stats(r)).collect();
        print_losses(&train_phase2(&model, &mut store, &frags, &train, &exp.phase2_train())?);
        let mut ck = Checkpoint::from_store(&store, |_| true);
        attach_stats(&mut ck, &std);
        ck
    };
    ck.entries.sort_by(|a, b| a.0.cmp(&b.0));
    ck.write(out).at(out)?;
    eprintln!("trained in {:.1?}", t0.elapsed());
    println!("wrote {} tensors to {}", ck.entries.len(), out.display());
    Ok(())
}

fn family_table(m: &Metrics, kinds: &[ExtractorKind], report: Report) -> String {
    let mut s = String::new();
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    match report {
        Report::Text => {
            let _ = writeln!(s, "n {}  acc {:.4}  ap {:.4}", m.n, m.acc, m.ap);
            for f in &m.families {
                let _ = write!(s, "{:<5} n {:>5}  acc {:.4}", f.family.name(), f.n, f.acc);
                if !f.mean_p.is_empty() {
                    let p: Vec<String> = names.iter().zip(&f.mean_p).map(|(k, v)| format!("{k} {v:.3}")).collect();
                    let t: Vec<String> = names.iter().zip(&f.top1).map(|(k, v)| format!("{k} {v}")).collect();
                    let _ = write!(s, "  mean p [{}]  top1 [{}]", p.join(", "), t.join(", "));
                }
                s.push('\n');
            }
        }
        Report::Csv => {
            let p: Vec<String> = names.iter().map(|k| format!("p_{k}")).collect();
            let t: Vec<String> = names.iter().map(|k| format!("top1_{k}")).collect();
            let _ = writeln!(s, "family,n,acc,ap,{},{}", p.join(","), t.join(","));
            let blank = |n: usize| vec![String::new(); n];
            let _ = writeln!(s, "all,{},{},{},{},{}", m.n, m.acc, m.ap, blank(p.len()).join(","), blank(t.len()).join(","));
            for f in &m.families {
                let mp: Vec<String> = if f.mean_p.is_empty() { blank(p.len()) } else { f.mean_p.iter().map(f64::to_string).collect() };
                let tp: Vec<String> = if f.top1.is_empty() { blank(t.len()) } else { f.top1.iter().map(usize::to_string).collect() };
                let _ = writeln!(s, "{},{},{},,{},{}", f.family.name(), f.n, f.acc, mp.join(","), tp.join(","));
            }
        }
    }
    s
}

fn dump_rows(rows: &[Scored], kinds: &[ExtractorKind]) -> String {
    let mut s = String::new();
    let p: Vec<String> = kinds.iter().map(|k| format!("p_{}", k.name())).collect();
    let _ = writeln!(s, "index,label,family,score,{}", p.join(","));
    for (i, r) in rows.iter().enumerate() {
        let ps: Vec<String> = r.p.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{i},{},{},{},{}", r.label, r.family.name(), r.score, ps.join(","));
    }
    s
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    config: Option<&Path>,
    report: Report,
    modality: Option<&str>,
    dump: Option<&Path>,
) -> Result<()> {
    let rc = load_config(config, None)?;
    let exp = rc.experiment()?;
    let ck = Checkpoint::read(ckpt).at(ckpt)?;
    let mut store = ParamStore::new();
    let model = AleiModel::new(&mut store, &exp.model, rc.disable)?;
    let std = stats_of(&ck, model.kinds())
        .ok_or_else(|| Error::Config("checkpoint carries no input statistics".into()))
        .at(ckpt)?
        .at(ckpt)?;
    let params = without_stats(&ck);
    params.load_into(&mut store).at(ckpt)?;
    let required: Vec<String> = match modality {
        Some(name) => {
            let k = model.kinds()[modality_index(&model, name)?];
            let j = modality_index(&model, name)?;
            let pre = [format!("backbone.embed.{k}."), format!("heads.{j}.")];
            store.names().filter(|n| pre.iter().any(|p| n.starts_with(p.as_str()))).map(String::from).collect()
        }
        None => store.names().map(String::from).collect(),
    };
    let missing: Vec<&String> = required.iter().filter(|n| params.get(n).is_none()).collect();
    if let Some(first) = missing.first() {
        return Err(Error::Config(format!("checkpoint lacks {} model tensors, e.g. {first}", missing.len()))).at(ckpt);
    }
    let ds = read_dataset(data).at(data)?;
    let (prepared, _) = prepare(&ds, &exp, Some(&std)).at(data)?;
    let crop = exp.train.crop;
    let rows = match modality {
        Some(name) => score_probe(&model, &store, modality_index(&model, name)?, &prepared, crop)?,
        None => score(&model, &store, &prepared, crop)?,
    };
    let m = Metrics::from_scored(&rows)?;
    print!("{}", family_table(&m, model.kinds(), report));
    if let Some(p) = dump {
        io_at(fs::write(p, dump_rows(&rows, model.kinds())), p)?;
    }
    Ok(())
}

pub fn ablate(disable: &str, config: Option<&Path>, seed: Option<u64>, report: Report, out: Option<&Path>) -> Result<()> {
    let rc = load_config(config, seed)?;
    log_config(&rc);
    let exp = rc.experiment()?;
    let grid = ablation_grid(Components::disabling(disable)?);
    let t0 = Instant::now();
    let data = Bundle::build(&exp)?;
    let ab = run_ablation(&exp, &grid, &data)?;
    let csv = ab.csv();
    match report {
        Report::Csv => print!("{csv}"),
        Report::Text => {
            println!("{:<18} {:>9} {:>9} {:>9} {:>9}", "config", "mixed acc", "mixed ap", "all acc", "all ap");
            for r in &ab.rows {
                println!(
                    "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.comps.to_string(),
                    r.mixed.acc,
                    r.mixed.ap,
                    r.all.acc,
                    r.all.ap
                );
            }
        }
    }
    if let Some(p) = out {
        io_at(fs::write(p, &csv), p)?;
    }
    eprintln!("ablation finished in {:.1?}", t0.elapsed());
    Ok(())
}

pub fn gradcheck(dims: &str) -> Result<()> {
    const TOL: f64 = 1e-4;
    let dims: Dims = dims.parse()?;
    let t0 = Instant::now();
    let mut worst = 0f64;
    for (name, e) in op_suite(3)? {
        println!("{name:<18} {e:.3e}");
        worst = worst.max(e);
    }
    let rep = end_to_end(dims, 0)?;
    println!("end-to-end ({dims}, {} coordinates) {:.3e}", rep.coords, rep.max_rel_err);
    worst = worst.max(rep.max_rel_err);
    println!("max rel err {worst:.3e} in {:.1?}", t0.elapsed());
    if worst >= TOL {
        let at = rep.worst.map(|(n, k)| format!(" (end-to-end worst at {n}[{k}])")).unwrap_or_default();
        return Err(Error::Numerical(format!("gradient check above {TOL:e}{at}")).into());
    }
    Ok(())
}
