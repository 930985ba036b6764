use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eptlab::commands::{self, AnalyzeOptions, RunFile};
use eptlab::config::{self, SweepAxis};
use eptlab::CliError;
use eptlab_core::fewshot::SynthSpec;

fn eptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eptlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, v: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn quick(out: &Path) -> serde_json::Value {
    serde_json::json!({
        "methods": [{"tag": "EPT"}],
        "episodes": 1,
        "runs": 2,
        "train": {"epochs": 2},
        "output_dir": out,
    })
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn mutated_softmax_fails_the_proportionality_check() {
    let o = eptlab(&["verify", "--only", "proportionality", "--inject-fault", "softmax-sign"]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("FAIL proportionality"), "{stdout}");
    assert!(String::from_utf8(o.stderr).unwrap().contains("proportionality"));
}

#[test]
fn only_runs_a_single_check() {
    let o = eptlab(&["verify", "--only", "prop1"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("PASS prop1"));
}

#[test]
fn unknown_check_is_a_config_error() {
    assert_eq!(eptlab(&["verify", "--only", "nope"]).status.code(), Some(2));
}

#[test]
fn minimal_config_runs_one_shot_linear_on_toy_colon() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", serde_json::json!({ "output_dir": out }));
    let p = config::load(&cfg).unwrap();
    assert_eq!(p.config.methods.len(), 1);
    assert_eq!(p.config.methods[0].tag(), "Linear");
    assert_eq!(p.config.shots, 1);
    assert_eq!(p.config.dataset.synth, Some(SynthSpec::toy_colon()));

    let o = eptlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("runs.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "Linear");
    assert_eq!(rows[0][4], "1");
    assert!(out.join("checkpoints/linear/episode0_run0.ckpt").exists());
    assert!(out.join(commands::CONFIG_ECHO).exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (serde_json::json!({"backbone": {"embed_dim": "wide"}}), "backbone.embed_dim"),
        (serde_json::json!({"method": {"tag": "EPT", "prompt_lenght": 3}}), "method"),
        (serde_json::json!({"train": {"learning_rate": -1.0}}), "train.learning_rate"),
        (serde_json::json!({"dataset": {"preset": "toy-endo"}}), "backbone.num_classes"),
        (serde_json::json!({"method": {"tag": "Linear"}, "methods": []}), "methods"),
        (serde_json::json!({"shots": 50}), "shots"),
        (serde_json::json!({"methods": [{"tag": "Linear"}, {"tag": "EPT", "depth": 9}]}), "methods[1].method.depth"),
    ];
    for (i, (v, field)) in cases.into_iter().enumerate() {
        let p = write_config(dir.path(), &format!("{i}.json"), v);
        match config::load(&p) {
            Err(CliError::Config { field: f, .. }) => assert_eq!(f, field),
            Err(other) => panic!("case {i}: {other}"),
            Ok(_) => panic!("case {i} accepted"),
        }
        let o = eptlab(&["train", "--config", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "case {i}");
        assert!(String::from_utf8(o.stderr).unwrap().contains(field));
    }
}

#[test]
fn method_list_shares_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "c.json",
        serde_json::json!({
            "methods": [{"tag": "Linear"}, {"tag": "VPT"}, {"tag": "EPT"}],
            "shots": 2,
            "episodes": 2,
            "train": {"epochs": 1},
            "output_dir": out,
        }),
    );
    commands::train(&cfg, &mut std::io::sink()).unwrap();
    let summary = csv_rows(&out.join("summary.csv"));
    assert_eq!(summary.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["Linear", "VPT", "EPT"]);
    for e in 0..2 {
        let episodes: Vec<_> = ["linear", "vpt", "ept"]
            .iter()
            .map(|s| {
                let f: RunFile =
                    serde_json::from_str(&fs::read_to_string(out.join(format!("runs/{s}/episode{e}_run0.json"))).unwrap())
                        .unwrap();
                f.episode
            })
            .collect();
        assert!(episodes.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn summary_recomputes_from_per_run_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", quick(&out));
    commands::train(&cfg, &mut std::io::sink()).unwrap();
    let metrics: Vec<f64> = csv_rows(&out.join("runs.csv")).iter().map(|r| r[6].parse().unwrap()).collect();
    let s = &csv_rows(&out.join("summary.csv"))[0];
    let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
    assert_eq!(s[3].parse::<usize>().unwrap(), metrics.len());
    assert_eq!(s[4].parse::<f64>().unwrap(), mean);
}

#[test]
fn depth_sweep_has_both_orderings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", quick(&out));
    let csv = commands::sweep(&cfg, SweepAxis::Depth, &mut std::io::sink()).unwrap();
    let rows = csv_rows(&csv);
    let layers = 4;
    // 2 runs per episode
    assert_eq!(rows.len(), 2 * layers * 2);
    let keys: BTreeSet<(String, String)> = rows.iter().map(|r| (r[3].clone(), r[4].clone())).collect();
    assert_eq!(keys.len(), 2 * layers);
}

#[test]
fn embedding_way_sweep_has_four_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", quick(&out));
    let rows = csv_rows(&commands::sweep(&cfg, SweepAxis::EmbeddingWay, &mut std::io::sink()).unwrap());
    assert_eq!(rows.len(), 4 * 2);
    let ways: BTreeSet<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(ways, BTreeSet::from(["add", "multiply", "pure_cat", "multi_cat"]));
}

#[test]
fn relative_prompt_length_converts_to_ept_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut v = quick(&out);
    v["runs"] = 1.into();
    v["sweep"] = serde_json::json!({"prompt_lengths": [1, 2], "relative_prompt_length": true});
    let cfg = write_config(dir.path(), "c.json", v);
    let rows = csv_rows(&commands::sweep(&cfg, SweepAxis::PromptLength, &mut std::io::sink()).unwrap());
    // d = 32 over 16 patches: two rows per relative unit.
    let lengths: Vec<(&str, &str)> = rows.iter().map(|r| (r[3].as_str(), r[5].as_str())).collect();
    assert_eq!(lengths, [("1", "2"), ("2", "4")]);
}

#[test]
fn shots_sweep_matches_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut v = quick(&out);
    v["methods"] = serde_json::json!([{"tag": "Linear"}]);
    v["runs"] = 1.into();
    let cfg = write_config(dir.path(), "s.json", v.clone());
    let rows = csv_rows(&commands::sweep(&cfg, SweepAxis::Shots, &mut std::io::sink()).unwrap());
    assert_eq!(rows.len(), 3);
    for row in rows {
        let k: usize = row[6].parse().unwrap();
        let mut single = v.clone();
        single["shots"] = k.into();
        single["output_dir"] = dir.path().join(format!("k{k}")).to_str().unwrap().into();
        let p = write_config(dir.path(), &format!("k{k}.json"), single);
        commands::train(&p, &mut std::io::sink()).unwrap();
        let run = &csv_rows(&dir.path().join(format!("k{k}/runs.csv")))[0];
        assert_eq!(run[6], row[10], "shots {k}");
    }
}

#[test]
fn axis_must_fit_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = quick(&dir.path().join("out"));
    v["methods"] = serde_json::json!([{"tag": "EPT"}, {"tag": "LoRA"}]);
    let cfg = write_config(dir.path(), "c.json", v);
    let o = eptlab(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "embedding_way"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().contains("methods[1]"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut snaps = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        fs::create_dir_all(&out).unwrap();
        let mut v = quick(&out);
        v["output_dir"] = "out".into();
        write_config(&out, "c.json", v);
        let o = Command::new(env!("CARGO_BIN_EXE_eptlab"))
            .args(["train", "--config", "c.json"])
            .current_dir(&out)
            .env("EPTLAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        snaps.push(fs::read(out.join("out/metrics.json")).unwrap());
    }
    assert_eq!(snaps[0], snaps[1]);
    let o = Command::new(env!("CARGO_BIN_EXE_eptlab"))
        .args(["verify", "--only", "prop1"])
        .env("EPTLAB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "verify runs single-threaded");
    let cfg = write_config(dir.path(), "bad.json", quick(&dir.path().join("bad")));
    let o = Command::new(env!("CARGO_BIN_EXE_eptlab"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("EPTLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

struct Trained {
    dir: tempfile::TempDir,
    manifest: PathBuf,
}

fn trained_ept() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let mut v = quick(&dir.path().join("out"));
    v["runs"] = 1.into();
    v["shots"] = 5.into();
    let cfg = write_config(dir.path(), "c.json", v);
    commands::train(&cfg, &mut std::io::sink()).unwrap();
    let manifest = commands::synth(&SynthSpec::toy_colon(), 0, &dir.path().join("data"), &mut std::io::sink()).unwrap();
    Trained { dir, manifest }
}

fn analyze(t: &Trained, out: &str, frozen: bool) -> PathBuf {
    let opts = AnalyzeOptions {
        checkpoint: t.dir.path().join("out/checkpoints/ept/episode0_run0.ckpt"),
        data: t.manifest.clone(),
        out: Some(t.dir.path().join(out)),
        run: Some(t.dir.path().join("out/runs/ept/episode0_run0.json")),
        frozen,
        bins: 10,
        seed: 0,
    };
    commands::analyze(&opts, &mut std::io::sink()).unwrap()
}

fn keys(v: &serde_json::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Some(m) = v.as_object() {
        for (k, x) in m {
            let p = format!("{prefix}.{k}");
            keys(x, &p, out);
            out.insert(p);
        }
    } else if let Some(a) = v.as_array() {
        if let Some(first) = a.first() {
            keys(first, &format!("{prefix}[]"), out);
        }
    }
}

#[test]
fn frozen_and_tuned_reports_share_a_schema() {
    let t = trained_ept();
    let tuned = analyze(&t, "tuned", false);
    let frozen = analyze(&t, "frozen", true);
    let read = |d: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(d.join("intra_class.json")).unwrap()).unwrap() };
    let (a, b) = (read(&tuned), read(&frozen));
    let (mut ka, mut kb) = (BTreeSet::new(), BTreeSet::new());
    keys(&a, "", &mut ka);
    keys(&b, "", &mut kb);
    // the frozen backbone has no prompted layers to summarise
    ka.retain(|k| !k.starts_with(".scaling[]"));
    assert_eq!(ka, kb);
    assert_eq!(a["samples"], b["samples"]);
    for f in ["pc1_histogram.csv", "projection.csv"] {
        let h = |d: &Path| fs::read_to_string(d.join(f)).unwrap().lines().next().unwrap().to_string();
        assert_eq!(h(&tuned), h(&frozen));
    }
    for layer in 1..=4 {
        assert!(tuned.join(format!("scaling_layer{layer}.csv")).exists());
        assert!(!frozen.join(format!("scaling_layer{layer}.csv")).exists());
    }
    let scaling = fs::read_to_string(tuned.join("scaling_layer1.csv")).unwrap();
    for line in scaling.lines().skip(1) {
        let c: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(c > 0.0 && c < 1.0);
    }
}

#[test]
fn analysing_one_checkpoint_twice_is_identical() {
    let t = trained_ept();
    let a = analyze(&t, "a", false);
    let b = analyze(&t, "b", false);
    for f in ["intra_class.json", "pc1_histogram.csv", "projection.csv", "scaling_layer2.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn mismatched_dataset_is_a_load_error() {
    let t = trained_ept();
    let small = SynthSpec {
        image_side: 8,
        ..SynthSpec::toy_colon()
    };
    let manifest = commands::synth(&small, 0, &t.dir.path().join("small"), &mut std::io::sink()).unwrap();
    let ckpt = t.dir.path().join("out/checkpoints/ept/episode0_run0.ckpt");
    let o = eptlab(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8(o.stderr).unwrap().contains("load error"));
}

#[test]
fn frozen_view_of_a_full_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = quick(&dir.path().join("out"));
    v["methods"] = serde_json::json!([{"tag": "Full"}]);
    v["runs"] = 1.into();
    v["train"] = serde_json::json!({"epochs": 1});
    let cfg = write_config(dir.path(), "c.json", v);
    commands::train(&cfg, &mut std::io::sink()).unwrap();
    let manifest = commands::synth(&SynthSpec::toy_colon(), 0, &dir.path().join("data"), &mut std::io::sink()).unwrap();
    let opts = AnalyzeOptions {
        checkpoint: dir.path().join("out/checkpoints/full/episode0_run0.ckpt"),
        data: manifest,
        out: None,
        run: None,
        frozen: true,
        bins: 10,
        seed: 0,
    };
    assert!(matches!(
        commands::analyze(&opts, &mut std::io::sink()),
        Err(CliError::Config { field, .. }) if field == "--frozen"
    ));
}

#[test]
fn manifest_dataset_trains_like_the_preset_it_came_from() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = commands::synth(&SynthSpec::toy_colon(), 0, &dir.path().join("data"), &mut std::io::sink()).unwrap();
    let mut a = quick(&dir.path().join("a"));
    a["runs"] = 1.into();
    let mut b = a.clone();
    b["output_dir"] = dir.path().join("b").to_str().unwrap().into();
    b["dataset"] = serde_json::json!({"manifest": manifest});
    for (name, v) in [("a.json", a), ("b.json", b)] {
        commands::train(&write_config(dir.path(), name, v), &mut std::io::sink()).unwrap();
    }
    let m = |d: &str| fs::read(dir.path().join(d).join("runs.csv")).unwrap();
    assert_eq!(m("a"), m("b"));
}
