use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small smoke run
size = 8
patch = 4
dim = 8
layers = 2
heads = 2
encoder_channels = 4,4
encoder_groups = 2
epochs = 2
batch = 4
crop = 6
n_train = 16
n_test = 8
";

fn alei(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alei")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn gen(dir: &Path, out: &str, families: &str, seed: &str) {
    let o = alei(dir, &["gen-data", "--out", out, "--n-real", "8", "--n-fake", "8", "--families", families, "--size", "8", "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = alei(dir.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("Usage"), "{}", text(&o));
    assert_eq!(code(&alei(dir.path(), &["--help"])), 0);
    assert_eq!(code(&alei(dir.path(), &["train", "--phase", "3", "--data", "x", "--out", "y"])), 1);
}

#[test]
fn truncated_dataset_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    gen(d, "train.alds", "up", "0");
    let o = alei(d, &["train", "--phase", "1", "--modality", "npr", "--config", "tiny.cfg", "--data", "train.alds", "--out", "npr.ckpt"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let bytes = fs::read(d.join("train.alds")).unwrap();
    fs::write(d.join("cut.alds"), &bytes[..3000]).unwrap();
    let o = alei(d, &["eval", "--ckpt", "npr.ckpt", "--modality", "npr", "--config", "tiny.cfg", "--data", "cut.alds"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("byte offset 3000"), "{}", text(&o));
    assert!(text(&o).contains("cut.alds"), "{}", text(&o));
}

#[test]
fn gradcheck_tiny_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = alei(dir.path(), &["gradcheck", "--dims", "tiny"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = text(&o);
    let line = out.lines().find(|l| l.starts_with("max rel err")).expect("summary line");
    let err: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{line}");
    assert_eq!(code(&alei(dir.path(), &["gradcheck", "--dims", "huge"])), 1);
}

#[test]
fn two_phase_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    gen(d, "train.alds", "up", "0");
    gen(d, "again.alds", "up", "0");
    assert_eq!(fs::read(d.join("train.alds")).unwrap(), fs::read(d.join("again.alds")).unwrap());
    gen(d, "test.alds", "hf,cb", "5");

    let mut frags = Vec::new();
    for m in ["image", "npr", "srm", "bayar", "encoder"] {
        let out = format!("p1_{m}.ckpt");
        let o = alei(d, &["train", "--phase", "1", "--modality", m, "--config", "tiny.cfg", "--data", "train.alds", "--out", &out]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        frags.push(out);
    }
    let o = alei(d, &["train", "--phase", "2", "--config", "tiny.cfg", "--data", "train.alds", "--out", "full.ckpt"]);
    assert_eq!(code(&o), 1, "phase 2 without fragments: {}", text(&o));
    let partial = frags[..3].join(",");
    let o = alei(d, &["train", "--phase", "2", "--config", "tiny.cfg", "--data", "train.alds", "--resume", &partial, "--out", "full.ckpt"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("modality bayar"), "{}", text(&o));

    let all = frags.join(",");
    for out in ["full.ckpt", "full2.ckpt"] {
        let o = alei(d, &["train", "--phase", "2", "--config", "tiny.cfg", "--data", "train.alds", "--resume", &all, "--out", out]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        assert!(text(&o).contains("seed = 0"), "config echo missing");
    }
    assert_eq!(fs::read(d.join("full.ckpt")).unwrap(), fs::read(d.join("full2.ckpt")).unwrap());

    let o = alei(d, &["eval", "--ckpt", "full.ckpt", "--config", "tiny.cfg", "--data", "test.alds", "--report", "csv", "--dump", "rows.csv"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(csv.starts_with("family,n,acc,ap,p_image,p_npr,p_srm,p_bayar,top1_image"), "{csv}");
    let hf = csv.lines().find(|l| l.starts_with("hf,")).expect("hf row");
    let top1: usize = hf.split(',').skip(8).map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(top1, 4);
    assert_eq!(fs::read_to_string(d.join("rows.csv")).unwrap().lines().count(), 17);

    let o = alei(d, &["eval", "--ckpt", "p1_srm.ckpt", "--config", "tiny.cfg", "--data", "test.alds"]);
    assert_eq!(code(&o), 1, "fragment is not a full model: {}", text(&o));
}

#[test]
fn extract_then_train_on_planes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), format!("{TINY}kinds = image,srm\n")).unwrap();
    gen(d, "train.alds", "up", "1");
    let o = alei(d, &["extract", "--data", "train.alds", "--out", "planes.alds", "--kinds", "image,srm"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = alei(d, &["train", "--phase", "1", "--modality", "srm", "--config", "tiny.cfg", "--data", "planes.alds", "--out", "a.ckpt"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = alei(d, &["train", "--phase", "1", "--modality", "srm", "--config", "tiny.cfg", "--data", "train.alds", "--out", "b.ckpt"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    let o = alei(d, &["train", "--phase", "1", "--modality", "bayar", "--config", "tiny.cfg", "--data", "planes.alds", "--out", "c.ckpt"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn ablate_emits_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let o = alei(d, &["ablate", "--config", "tiny.cfg", "--disable", "dfs,liia", "--report", "csv", "--out", "ablation.csv"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = fs::read_to_string(d.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "-liia", "-dfs", "-liia-dfs"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);
}
