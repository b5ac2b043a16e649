use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use datta::data::read_dataset;

fn datta(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_datta")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "datta {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SPEC: &str = r#"
[generator]
n_activities = 2

[[domains]]
domain_id = 0
noise_sigma = 0.01

[[domains]]
domain_id = 1
amplitude_offset = 0.3
amplitude_scale = 1.5
"#;

const CONFIG: &str = r#"
[model]
embed_dim = 8
n_heads = 2
mlp_hidden = 8
head_hidden = 8
n_activities = 2
stem_kernel = 20
stem_stride = 20

[train]
epochs = 1
batch_size = 8
stats_layers = [1]

[tta]
layer_ids = [1]
tta_learning_rate = 1e-3
reset_rate = 1e-2

[bench]
warmup = 2
iterations = 5

[[sequences]]
name = "alternating"
mode = "alternating"
block_len = 3
"#;

#[test]
fn synth_train_adapt_eval_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SPEC).unwrap();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    let data = d.join("data.csid");
    datta(&["synth", "--spec", p(&d.join("spec.toml")), "--n", "8", "--out", p(&data)]);
    let samples = read_dataset(&data).unwrap();
    assert_eq!(samples.len(), 16);
    assert_eq!(samples.iter().filter(|s| s.domain == 1).count(), 8);

    let ckpt = d.join("ckpt");
    datta(&["train", "--data", p(&data), "--config", p(&d.join("run.toml")), "--out", p(&ckpt)]);
    assert!(ckpt.join("model.ntar").is_file());
    assert!(ckpt.join("source_stats.ntar").is_file());
    let log = lines(&ckpt.join("metrics.jsonl"));
    assert_eq!(log.len(), 2);
    for key in ["step", "loss", "activity_loss", "domain_loss", "ccc_loss", "lambda"] {
        assert!(log[0].get(key).is_some(), "{key}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);

    let stats = ckpt.join("source_stats.ntar");
    let records = d.join("adapt.jsonl");
    datta(&[
        "adapt", "--ckpt", p(&ckpt), "--stats", p(&stats), "--stream", p(&data), "--config", p(&d.join("run.toml")), "--out",
        p(&records),
    ]);
    let records = lines(&records);
    assert_eq!(records.len(), 16);
    assert_eq!(records[0]["sample_id"], samples[0].sample_id.as_str());
    assert_eq!(records[3]["config_hash"], hash.as_str());
    assert!(records.iter().all(|r| r["drift"].as_f64().unwrap() >= 0.0 && r["latency_ms"].as_f64().unwrap() >= 0.0));

    let eval = d.join("eval");
    datta(&[
        "eval", "--ckpt", p(&ckpt), "--stats", p(&stats), "--data", p(&data), "--config", p(&d.join("run.toml")), "--out",
        p(&eval),
    ]);
    let summary = lines(&eval.join("summary.jsonl"));
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0]["sequence"], "alternating");
    assert_eq!(summary[0]["samples"], 16);
    let order: Vec<u64> = lines(&eval.join("alternating.records.jsonl"))
        .iter()
        .map(|r| r["domain"].as_u64().unwrap())
        .collect();
    assert_eq!(&order[..7], &[0, 0, 0, 1, 1, 1, 0]);

    let frozen = d.join("frozen");
    datta(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--frozen", "--out", p(&frozen)]);
    let records = lines(&frozen.join("ascending.records.jsonl"));
    assert!(records.iter().all(|r| r["drift"].is_null()));

    let out = datta(&[
        "bench", "--ckpt", p(&ckpt), "--stats", p(&stats), "--data", p(&data), "--config", p(&d.join("run.toml")),
    ]);
    let bench: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let variants: Vec<&str> = bench.iter().map(|b| b["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["frozen", "tta", "tta_reset"]);
    assert!(bench.iter().all(|b| b["iterations"] == 5));
}

fn write_packets(path: &Path, rows: usize, phase: f32) {
    let text: String = (0..rows)
        .map(|t| {
            (0..30)
                .map(|f| format!("{:.4}", 1.0 + (t as f32 * 0.1 + f as f32 + phase).sin()))
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn preprocess_reads_an_index_and_rejects_short_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir(&raw).unwrap();
    write_packets(&raw.join("a.csv"), 300, 0.0);
    write_packets(&raw.join("b.csv"), 400, 1.0);
    write_packets(&raw.join("short.csv"), 200, 2.0);
    fs::write(
        raw.join("index.csv"),
        "sample_id,activity,domain,file\nu1-a,3,0,a.csv\nu2-b,1,4,b.csv\nu3-s,0,4,short.csv\n",
    )
    .unwrap();
    let out = dir.path().join("data.csid");
    let run = datta(&["preprocess", "--in", p(&raw), "--out", p(&out), "--rate", "200"]);
    assert!(String::from_utf8_lossy(&run.stderr).contains("1 rejected"));
    let samples = read_dataset(&out).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!((samples[0].activity, samples[0].domain, samples[0].valid_length), (3, 0, 150));
    assert_eq!((samples[1].sample_id.as_str(), samples[1].valid_length), ("u2-b", 200));
}

#[test]
fn exp_writes_manifest_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(
        &config,
        r#"
name = "tiny"
seeds = [0]

[data]
source = "synthetic"
samples_per_domain = 6
[[data.domains]]
domain_id = 0
split = "train"
[[data.domains]]
domain_id = 1
split = "test"

[model]
embed_dim = 8
n_heads = 2
mlp_hidden = 8
head_hidden = 8
stem_kernel = 20
stem_stride = 20

[train]
epochs = 1
stats_layers = [1]

[ablation]
reset = [true, false]
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    datta(&["exp", "--config", p(&config), "--out", p(&out)]);
    assert!(out.join("manifest.json").is_file());
    assert_eq!(lines(&out.join("results.jsonl")).len(), 2);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[train]\nepochs = \"many\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_datta"))
        .args(["train", "--data", "missing.csid", "--config", p(&config), "--out", p(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}
