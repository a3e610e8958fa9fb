use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
k = 8

[data]
train_items = 8
test_items = 4
repetitions = 1

[data.layout]
parcels_per_hemisphere = 12
low_level_per_hemisphere = 2
high_level_per_hemisphere = 2

[model]
token_dim = 16

[model.denoiser]
image_size = 32
base_channels = 8
depth = 2
heads = 2
head_dim = 4
time_dim = 16

[train]
epochs = 50
batch_size = 8

[sample]
steps = 4
candidates_per_sample = 2

[encoder]
filters = 4
validation_fraction = 0.25

[interpret]
trace_samples = 2
heatmap_timesteps = 2

[ablate]
candidates = [1, 2]
"#;

fn neurodecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurodecode")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "command failed: {}", stderr(out));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn visible_entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map(|r| r.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    names.sort();
    names
}

#[test]
fn missing_atlas_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\n"));
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[data]\n", "[data]\natlas = \"missing.tsv\"\n");
    std::fs::write(&cfg, text).unwrap();
    let out = neurodecode(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("runs").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.atlas"), "{}", stderr(&out));
    assert!(visible_entries(&dir.path().join("runs")).is_empty());
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("k = 8", "k = 8\nfoo = 1"));
    let out = neurodecode(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(dir.path(), &TINY.replace("k = 8", "k = 0"));
    let out = neurodecode(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`k`"), "{}", stderr(&out));
}

#[test]
fn unknown_ablation_lists_valid_names() {
    let out = neurodecode(&["ablate", "dropout"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["token_dropout", "linear_mapper", "parcels_p", "dim_f", "n_candidates", "roi_masking"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn corrupted_checkpoint_fails_cleanly_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let ckpt = dir.path().join("ckpt");
    std::fs::create_dir(&ckpt).unwrap();
    std::fs::write(ckpt.join("model.safetensors"), b"not a checkpoint").unwrap();
    std::fs::write(ckpt.join("state.json"), b"{").unwrap();
    let runs = dir.path().join("runs");
    let out = neurodecode(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(visible_entries(&runs).is_empty());
}

#[test]
fn smoke_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));

    let train_a = run_dir(&neurodecode(&["train", "--config", cfg, "--out", out_a.to_str().unwrap()]));
    let train_b = run_dir(&neurodecode(&["train", "--config", cfg, "--out", out_b.to_str().unwrap()]));
    for f in ["checkpoint/loss.csv", "checkpoint/model.safetensors", "checkpoint/encoder.safetensors", "config.toml", "atlas.tsv"] {
        assert!(train_a.join(f).exists(), "missing {f}");
    }
    let loss = std::fs::read_to_string(train_a.join("checkpoint/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 51);
    assert_eq!(loss, std::fs::read_to_string(train_b.join("checkpoint/loss.csv")).unwrap());

    let decode = |train: &Path, out: &Path| {
        run_dir(&neurodecode(&[
            "decode",
            "--config",
            cfg,
            "--checkpoint",
            train.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]))
    };
    let dec_a = decode(&train_a, &out_a);
    let dec_b = decode(&train_b, &out_b);
    assert_eq!(dec_a.file_name(), dec_b.file_name());
    for f in ["ranking.csv", "metrics.csv", "metrics.md", "candidate_sweep.csv", "correlations.csv", "summary.json"] {
        let a = std::fs::read(dec_a.join(f)).unwrap_or_else(|_| panic!("missing {f}"));
        assert_eq!(a, std::fs::read(dec_b.join(f)).unwrap(), "{f} differs");
    }
    let selected = visible_entries(&dec_a.join("selected"));
    assert_eq!(selected.len(), 4);
    for name in &selected {
        let a = std::fs::read(dec_a.join("selected").join(name)).unwrap();
        assert_eq!(a, std::fs::read(dec_b.join("selected").join(name)).unwrap());
    }
    assert_eq!(visible_entries(&dec_a.join("traces")).len(), 2);
    let sweep = std::fs::read_to_string(dec_a.join("candidate_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    let interp = run_dir(&neurodecode(&["interpret", dec_a.to_str().unwrap(), "--config", cfg, "--out", out_a.to_str().unwrap()]));
    let contributions = visible_entries(&interp.join("contributions"));
    assert_eq!(contributions.len(), 2);
    let rows = csv_rows(&interp.join("contributions").join(&contributions[0]));
    assert_eq!(rows[0], ["t", "parcel_id", "contribution"]);
    let mut sums = std::collections::BTreeMap::<String, f64>::new();
    for r in &rows[1..] {
        *sums.entry(r[0].clone()).or_default() += r[2].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 4);
    for (t, sum) in sums {
        assert!((sum - 1.0).abs() < 1e-6, "t = {t} sums to {sum}");
    }
    let figures = visible_entries(&interp.join("figures"));
    assert!(figures.iter().any(|f| f.ends_with("_heatmaps.png")), "{figures:?}");

    let report = run_dir(&neurodecode(&["report", dec_a.to_str().unwrap(), "--out", out_a.to_str().unwrap()]));
    let text = std::fs::read_to_string(report.join("report.md")).unwrap();
    assert!(text.contains("PixCorr") && text.contains(dec_a.file_name().unwrap().to_str().unwrap()));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn datagen_archive_trains_like_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("runs");
    let archive = run_dir(&neurodecode(&["datagen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    for f in ["ground_truth.json", "split.json", "images"] {
        assert!(archive.join(f).exists(), "missing {f}");
    }
    let split: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(archive.join("split.json")).unwrap()).unwrap();
    assert_eq!((split["train"].as_array().unwrap().len(), split["test"].as_array().unwrap().len()), (8, 4));

    let text = TINY.replace("[data]\n", &format!("[data]\nsource = \"archive\"\narchive = {:?}\n", archive.to_str().unwrap()));
    let cfg = write_config(dir.path(), &text.replace("epochs = 50", "epochs = 2"));
    let train = run_dir(&neurodecode(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(train.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["train_items"], 8);
    assert_eq!(summary["parcels"], 16);
}
