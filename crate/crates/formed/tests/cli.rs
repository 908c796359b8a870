use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[backbone]
patch_size = 8
model_dim = 8
layers = 1
heads = 2
max_patches = 8
horizon = 8

[pretrain]
series = 4
length = 64
epochs = 1

[repurpose]
epochs = 3
batch_size = 8
lr = 1e-3
patience = 10
seeds = [0, 1]

[adapt]
epochs = 3
batch_size = 8
lr = 3e-3
patience = 10
seeds = [0]

[data]
cohort = ["A", "B"]

[synth]
snr = 10.0
subjects = 5
samples_per_subject = 4
seed = 0
datasets = [
  { name = "A", channels = 2, length = 32, classes = 2 },
  { name = "B", channels = 3, length = 24, classes = 3 },
  { name = "N", channels = 4, length = 32, classes = 2 },
]
"#;

fn formed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formed")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = formed(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = formed(dir, args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    err
}

/// Synthetic data plus a pretrained backbone in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    ok(&dir, &["synth", "--config", "run.toml"]);
    ok(&dir, &["pretrain", "--config", "run.toml"]);
    (tmp, dir)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let (_tmp, dir) = workspace();
    let out = ok(&dir, &["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained"]);
    assert!(out.contains("A ") && out.contains("B "));
    let rep = dir.join("runs/repurpose");
    for f in ["reports.csv", "deltas.csv", "summary.csv", "deltas.svg", "checkpoints/seed-0/params.bin", "checkpoints/seed-1/manifest.toml"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let reports = String::from_utf8(read(rep.join("reports.csv"))).unwrap();
    assert_eq!(reports.lines().count(), 1 + 2 * 2 * 2);

    ok(&dir, &["adapt", "--config", "run.toml", "--ckpt", "runs/repurpose/checkpoints/seed-0", "--dataset", "N"]);
    let manifest = String::from_utf8(read(dir.join("runs/adapt-N/checkpoints/seed-0/manifest.toml"))).unwrap();
    assert!(manifest.contains("stage = \"adapted\"") && manifest.contains("[tasks.N]"));

    ok(&dir, &["adapt", "--config", "run.toml", "--ckpt", "runs/repurpose/checkpoints/seed-0", "--dataset", "N", "--ratios", "0.5,1.0", "--seeds", "3,4", "--out", "fs"]);
    let fewshot = String::from_utf8(read(dir.join("fs/fewshot.csv"))).unwrap();
    assert_eq!(fewshot.lines().count(), 5);
    assert!(fewshot.lines().nth(1).unwrap().starts_with("N,test,3,0.5,"));
    assert!(dir.join("fs/fewshot.svg").exists());

    let out = ok(&dir, &["eval", "--config", "run.toml", "--ckpt", "runs/adapt-N/checkpoints/seed-0", "--dataset", "A", "--split", "val"]);
    assert!(out.contains("A            val"));
}

#[test]
fn reruns_and_thread_counts_give_identical_bytes() {
    let (_tmp, dir) = workspace();
    let args = |out: &'static str, threads: &'static str| {
        vec!["--threads", threads, "repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained", "--out", out]
    };
    ok(&dir, &args("r1", "1"));
    ok(&dir, &args("r2", "4"));
    for f in ["reports.csv", "deltas.csv", "summary.csv", "checkpoints/seed-1/params.bin", "checkpoints/seed-1/manifest.toml"] {
        assert_eq!(read(dir.join("r1").join(f)), read(dir.join("r2").join(f)), "{f}");
    }
    // The report command recomputes the same deltas from reports.csv.
    let before = read(dir.join("r1/deltas.csv"));
    fs::remove_file(dir.join("r1/deltas.csv")).unwrap();
    ok(&dir, &["report", "r1"]);
    assert_eq!(read(dir.join("r1/deltas.csv")), before);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.toml"), CONFIG.replace("horizon = 8\n", "")).unwrap();
    let err = fails(dir, &["pretrain", "--config", "bad.toml"], 2);
    assert!(err.contains("horizon"), "{err}");
    fs::write(dir.join("bad.toml"), CONFIG.replace("[pretrain]", "[pretrain]\nwarmup = 3")).unwrap();
    assert!(fails(dir, &["pretrain", "--config", "bad.toml"], 2).contains("warmup"));
    fs::write(dir.join("bad.toml"), CONFIG.replace("heads = 2", "heads = 3")).unwrap();
    fails(dir, &["pretrain", "--config", "bad.toml"], 2);
    assert!(!dir.join("runs").exists());
}

#[test]
fn stage_violations_exit_4() {
    let (_tmp, dir) = workspace();
    fails(&dir, &["adapt", "--config", "run.toml", "--ckpt", "runs/pretrained", "--dataset", "N"], 4);
    ok(&dir, &["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained", "--seeds", "0"]);
    let ck = "runs/repurpose/checkpoints/seed-0";
    let err = fails(&dir, &["repurpose", "--config", "run.toml", "--ckpt", ck], 4);
    assert!(err.contains("pretrained"), "{err}");
    let err = fails(&dir, &["adapt", "--config", "run.toml", "--ckpt", ck, "--dataset", "A"], 4);
    assert!(err.contains("already registered"), "{err}");
    assert!(!dir.join("runs/adapt-A").exists());
}

#[test]
fn data_errors_exit_3_and_name_the_sample() {
    let (_tmp, dir) = workspace();
    let bin = dir.join("data/A/samples.bin");
    let mut bytes = read(&bin);
    let rec = 8 + 2 * 32 * 9;
    bytes[3 * rec..3 * rec + 4].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&bin, &bytes).unwrap();
    let err = fails(&dir, &["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained"], 3);
    assert!(err.contains("sample 3"), "{err}");
    assert!(!dir.join("runs/repurpose").exists());
}

#[test]
fn eval_on_an_empty_dataset_writes_nothing() {
    let (_tmp, dir) = workspace();
    ok(&dir, &["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained", "--seeds", "0"]);
    let manifest = dir.join("data/A/manifest.toml");
    let text = String::from_utf8(read(&manifest)).unwrap();
    let cut = text.find("samples = ").unwrap();
    fs::write(&manifest, format!("{}samples = 0\nsubjects = []\n", &text[..cut])).unwrap();
    fs::write(dir.join("data/A/samples.bin"), b"").unwrap();
    fails(&dir, &["eval", "--config", "run.toml", "--ckpt", "runs/repurpose/checkpoints/seed-0", "--dataset", "A"], 3);
    assert!(!dir.join("runs/eval/reports.csv").exists());
}

#[test]
fn precision_follows_the_environment_and_must_match() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    ok(dir, &["synth", "--config", "run.toml"]);
    let pre = Command::new(env!("CARGO_BIN_EXE_formed"))
        .current_dir(dir)
        .env("FORMED_PRECISION", "f32")
        .args(["pretrain", "--config", "run.toml"])
        .output()
        .unwrap();
    assert!(pre.status.success());
    let manifest = String::from_utf8(read(dir.join("runs/pretrained/manifest.toml"))).unwrap();
    assert!(manifest.contains("precision = \"f32\""));
    let mismatch = Command::new(env!("CARGO_BIN_EXE_formed"))
        .current_dir(dir)
        .env("FORMED_PRECISION", "f64")
        .args(["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained"])
        .output()
        .unwrap();
    assert_eq!(mismatch.status.code(), Some(2));
    ok(dir, &["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained", "--seeds", "0"]);
}

#[test]
fn csv_import_directories_load_like_binary_ones() {
    let (_tmp, dir) = workspace();
    let imp = dir.join("data/C");
    fs::create_dir_all(&imp).unwrap();
    let mut labels = String::from("file,label,subject\n");
    for i in 0..12 {
        let name = format!("s{i}.csv");
        labels += &format!("{name},{},p{}\n", i % 2, i / 3);
        let rows: String = (0..16).map(|t| format!("{},{}\n", ((t * (i % 2 + 1)) as f64).sin(), t as f64 * 0.1)).collect();
        fs::write(imp.join(name), format!("a,b\n{rows}")).unwrap();
    }
    fs::write(imp.join("labels.csv"), labels).unwrap();
    ok(&dir, &["repurpose", "--config", "run.toml", "--ckpt", "runs/pretrained", "--seeds", "0"]);
    ok(&dir, &["adapt", "--config", "run.toml", "--ckpt", "runs/repurpose/checkpoints/seed-0", "--dataset", "C"]);
}
