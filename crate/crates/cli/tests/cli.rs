use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const DIGITS: &str = r#"
[dataset]
folds = 2
[dataset.source]
kind = "mnist_bags"
[dataset.source.spec]
num_bags = 100
mean_bag_size = 4
seed = 3
[training]
seeds = [1]
[training.teacher]
epochs = 1
[training.student]
epochs = 1
"#;

fn instlabel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_instlabel"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn project(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), config).unwrap();
    dir
}

fn common<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "c.toml", "--out", "out", "--workers", "2"];
    v.extend_from_slice(extra);
    v
}

fn run(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend(common(extra));
    instlabel(dir, &args)
}

fn manifest_records(dir: &Path) -> usize {
    let text = fs::read_to_string(dir.join("out/data/manifest.jsonl")).unwrap();
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).count()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn svgs(dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else { return Vec::new() };
    let mut out: Vec<PathBuf> = entries.map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
    out.sort();
    out
}

#[test]
fn prepare_writes_the_requested_bags_and_refuses_to_overwrite() {
    let p = project(DIGITS);
    let o = run(p.path(), "prepare", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest_records(p.path()), 100);
    assert!(p.path().join("out/resolved_config.toml").exists());

    let again = run(p.path(), "prepare", &[]);
    assert_eq!(again.status.code(), Some(5));
    assert!(stderr(&again).contains("--force"));
    assert!(run(p.path(), "prepare", &["--force"]).status.success());
}

#[test]
fn environment_overrides_the_file() {
    let p = project(DIGITS);
    let o = Command::new(env!("CARGO_BIN_EXE_instlabel"))
        .current_dir(p.path())
        .env("INSTLABEL__DATASET__SOURCE__SPEC__NUM_BAGS", "30")
        .args(["prepare", "--config", "c.toml", "--out", "out"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest_records(p.path()), 30);
}

#[test]
fn student_stage_needs_a_teacher_checkpoint() {
    let p = project(DIGITS);
    assert!(run(p.path(), "prepare", &[]).status.success());
    let o = run(p.path(), "train", &["--stage", "student"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("teacher checkpoint"));
    assert!(!p.path().join("out/runs/seed1/student.json").exists());
}

#[test]
fn training_both_stages_records_the_teacher_in_every_student() {
    let p = project(DIGITS);
    assert!(run(p.path(), "prepare", &[]).status.success());
    let o = run(p.path(), "train", &["--seed", "1,2,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in 1..=3 {
        let dir = p.path().join(format!("out/runs/seed{seed}"));
        let teacher = read_json(&dir.join("teacher.json"));
        let student = read_json(&dir.join("student.json"));
        assert_eq!(student["meta"]["teacher_hash"], teacher["parameter_hash"]);
        assert_eq!(student["meta"]["seed"], seed);
        assert_eq!(student["meta"]["temperature"], 2.0);
        assert!(dir.join("student_log.jsonl").exists());
        assert!(dir.join("resolved_config.toml").exists());
    }
    assert_eq!(run(p.path(), "train", &["--seed", "2"]).status.code(), Some(5));

    let o = run(p.path(), "evaluate", &["--seed", "1,2,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(p.path().join("out/evaluation/metrics.tsv")).unwrap();
    // Three seeds, two checkpoints, two levels, one header line and one comment.
    assert_eq!(tsv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 2 * 2);
}

#[test]
fn missing_manifest_is_an_io_error() {
    let p = project(DIGITS);
    let o = run(p.path(), "train", &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("prepare"));
}

#[test]
fn invalid_config_is_a_config_error() {
    let p = project("[vat]\ndelta = -1.0\n[dataset.source]\nkind = \"mnist_bags\"\n[dataset.source.spec]\nnum_bags = 10\nmean_bag_size = 3\n");
    assert_eq!(run(p.path(), "prepare", &[]).status.code(), Some(2));
    let p = project("[vat\ndelta = 0.1\n");
    let o = run(p.path(), "prepare", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

/// Uncompressed 24-bit BMP filled with a deterministic texture.
fn write_bmp(path: &Path, width: usize, height: usize, shade: u8) {
    let row = (width * 3).div_ceil(4) * 4;
    let size = 54 + row * height;
    let mut b = Vec::with_capacity(size);
    b.extend_from_slice(b"BM");
    b.extend_from_slice(&(size as u32).to_le_bytes());
    b.extend_from_slice(&[0; 4]);
    b.extend_from_slice(&54u32.to_le_bytes());
    b.extend_from_slice(&40u32.to_le_bytes());
    b.extend_from_slice(&(width as i32).to_le_bytes());
    b.extend_from_slice(&(height as i32).to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&24u16.to_le_bytes());
    b.extend_from_slice(&[0; 24]);
    for y in 0..height {
        for x in 0..width {
            let v = shade.wrapping_add(((x * 7 + y * 13) % 50) as u8);
            b.extend_from_slice(&[v, v / 2, v]);
        }
        b.resize(b.len() + row - width * 3, 0);
    }
    fs::write(path, b).unwrap();
}

#[test]
fn instance_level_needs_instance_labels() {
    let p = tempfile::tempdir().unwrap();
    let root = p.path().join("slides");
    fs::create_dir(&root).unwrap();
    let mut labels = String::from("image,label\n");
    for i in 0..8 {
        write_bmp(&root.join(format!("s{i}.bmp")), 54, 54, 40 + 10 * i as u8);
        labels.push_str(&format!("s{i}.bmp,{}\n", i % 2));
    }
    fs::write(root.join("labels.csv"), labels).unwrap();
    let config = format!(
        "[dataset]\nfolds = 2\n[dataset.source]\nkind = \"histopathology\"\nroot = {:?}\n[dataset.source.patch]\npatch_size = 27\nstride = 27\n",
        root.display().to_string()
    );
    fs::write(p.path().join("c.toml"), config).unwrap();
    let o = run(p.path(), "prepare", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("instance labels: no"));

    for cmd in ["evaluate", "crossval"] {
        let o = run(p.path(), cmd, &["--level", "instance"]);
        assert_eq!(o.status.code(), Some(6), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("no instance labels"));
    }
    assert!(!p.path().join("out/crossval").exists());
}

#[test]
fn plot_rejects_bad_series_without_writing_figures() {
    let p = tempfile::tempdir().unwrap();
    let header = "mean_bag_size\tcondition\tnum_bags\tmean_auroc\tstd_auroc\truns";
    fs::write(p.path().join("empty.tsv"), format!("# config_hash=x\n{header}\n")).unwrap();
    fs::write(p.path().join("bad.tsv"), format!("{header}\n10\tvat\t50\t0.9\t0.01\t3\n10\tvat\t100\tnope\t0.01\t3\n")).unwrap();

    let o = instlabel(p.path(), &["plot", "empty.tsv", "--out", "figs"]);
    assert_eq!(o.status.code(), Some(3));
    let o = instlabel(p.path(), &["plot", "bad.tsv", "--out", "figs"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(svgs(&p.path().join("figs")).is_empty());
}

#[test]
fn plot_draws_one_figure_per_bag_size() {
    let p = tempfile::tempdir().unwrap();
    let mut series = String::from("mean_bag_size\tcondition\tnum_bags\tmean_auroc\tstd_auroc\truns\n");
    for k in [10, 50] {
        for (cond, base) in [("vat", 0.85), ("no_vat", 0.8)] {
            for (i, n) in [50, 100, 500].iter().enumerate() {
                series.push_str(&format!("{k}\t{cond}\t{n}\t{}\t0.02\t3\n", base + 0.04 * i as f64));
            }
        }
    }
    fs::write(p.path().join("sweep_series.tsv"), series).unwrap();
    let o = instlabel(p.path(), &["plot", "sweep_series.tsv", "--out", "figs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let figs = svgs(&p.path().join("figs"));
    let names: Vec<_> = figs.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["auroc_vs_bags_k10.svg", "auroc_vs_bags_k50.svg"]);
    let svg = fs::read_to_string(&figs[0]).unwrap();
    assert!(svg.contains("No VAT") && svg.contains("<text"));
}

#[test]
fn bundled_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = instlabel_core::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.dataset.source.is_some());
        seen += 1;
    }
    assert_eq!(seen, 3);
}
