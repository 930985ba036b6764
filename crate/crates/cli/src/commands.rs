//! Command implementations. Each returns once every output file is in place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use eptlab_core::calibration::{
    feature_histogram, intra_class_distance, lemma1_randomized, pca_project, prop1_sweep, projections_csv,
    IntraClassReport, LabeledFeatures,
};
use eptlab_core::fewshot::{infer, run_cell, CellOutcome, summarize, synth_dataset, Dataset, DistributionSummary, Episode, RunRecord, SynthSpec};
use eptlab_core::io::{load_checkpoint, read_dataset, save_checkpoint, write_atomic, write_dataset, write_stable_json};
use eptlab_core::params::ParamStore;
use eptlab_core::peft::{pretrained_backbone, relative_to_ept_rows, EmbeddingWay, EptConfig, Model, PeftMethod, VptConfig};
use eptlab_core::vit::{backbone_shapes, BackboneConfig};
use eptlab_core::Error;

use crate::checks::{self, CheckOutcome, Fault};
use crate::config::{self, check_axis, ExperimentConfig, Prepared, SweepAxis};
use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "EPTLAB_THREADS";

/// Worker pool capped by `EPTLAB_THREADS` when set.
pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Runtime(Error::Contract(e.to_string())))
}

// ---------------------------------------------------------------- verify

pub struct VerifyOptions {
    pub only: Option<String>,
    pub seed: u64,
    pub fault: Option<Fault>,
}

/// Runs the suite, printing one line per check. A failed check is reported
/// after the whole selection has run.
pub fn verify(opts: &VerifyOptions, out: &mut dyn std::io::Write) -> CliResult<Vec<CheckOutcome>> {
    let suite = checks::suite();
    let informational = "lemma1-per-sample";
    let selected: Vec<_> = match &opts.only {
        None => suite.iter().collect(),
        Some(f) => suite.iter().filter(|c| c.selected_by(f)).collect(),
    };
    let want_info = opts.only.as_deref().is_none_or(|f| f == informational);
    if selected.is_empty() && !want_info {
        let names: Vec<&str> = suite.iter().map(|c| c.name.as_str()).collect();
        return Err(CliError::config(
            "--only",
            format!("unknown check `{}`; known: {}, {informational}", opts.only.as_deref().unwrap_or(""), names.join(", ")),
        ));
    }
    let mut outcomes = Vec::with_capacity(selected.len());
    for c in selected {
        let o = c.run(opts.seed, opts.fault)?;
        writeln!(out, "{}", o.line())?;
        outcomes.push(o);
    }
    if want_info {
        // Not asserted: counterexamples exist once features have two or more
        // dimensions, while the trace form above always holds.
        let o = checks::lemma1_per_sample(opts.seed)?;
        writeln!(out, "INFO{}", &o.line()[4..])?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Check(failed.join(", ")));
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------- train

/// Directory-safe name per configured method.
pub fn method_slugs(methods: &[PeftMethod]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in methods {
        *counts.entry(m.tag()).or_default() += 1;
    }
    methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let tag = m.tag().to_lowercase();
            if counts[m.tag()] > 1 {
                format!("{tag}-{i}")
            } else {
                tag
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct CellSpec {
    slot: usize,
    method: PeftMethod,
    shots: usize,
    episode: usize,
    run: usize,
}

fn run_cells(
    cfg: &ExperimentConfig,
    backbone: &ParamStore,
    data: &Dataset,
    cells: &[CellSpec],
) -> CliResult<Vec<CellOutcome>> {
    let pool = thread_pool()?;
    let outcomes: Result<Vec<_>, Error> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                run_cell(
                    &cfg.backbone,
                    backbone,
                    &c.method,
                    data,
                    c.shots,
                    &cfg.train,
                    cfg.seed,
                    c.episode,
                    c.run,
                )
            })
            .collect()
    });
    Ok(outcomes?)
}

/// Per-run result file.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunFile {
    pub method: PeftMethod,
    pub record: RunRecord,
    pub episode: Episode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Serialize)]
struct MethodResult<'a> {
    slug: &'a str,
    method: &'a PeftMethod,
    summary: DistributionSummary,
    records: Vec<&'a RunRecord>,
}

#[derive(Debug, Serialize)]
struct Metrics<'a> {
    shots: usize,
    episodes: usize,
    runs: usize,
    methods: Vec<MethodResult<'a>>,
}

pub const CONFIG_ECHO: &str = "config.resolved.json";

fn write_echo(cfg: &ExperimentConfig) -> CliResult<()> {
    write_stable_json(&cfg.output_dir.join(CONFIG_ECHO), cfg)?;
    Ok(())
}

fn final_loss(r: &RunRecord) -> f64 {
    r.epoch_losses.last().copied().unwrap_or(f64::NAN)
}

pub fn train(config_path: &Path, out: &mut dyn std::io::Write) -> CliResult<()> {
    let Prepared { config: cfg, data } = config::load(config_path)?;
    let started = Instant::now();
    let backbone = pretrained_backbone(&cfg.backbone, cfg.backbone_seed)?;
    let slugs = method_slugs(&cfg.methods);
    let mut cells = Vec::new();
    for (slot, m) in cfg.methods.iter().enumerate() {
        for e in 0..cfg.episodes {
            for r in 0..cfg.runs {
                cells.push(CellSpec {
                    slot,
                    method: m.clone(),
                    shots: cfg.shots,
                    episode: e,
                    run: r,
                });
            }
        }
    }
    let outcomes = run_cells(&cfg, &backbone, &data, &cells)?;

    let dir = &cfg.output_dir;
    write_echo(&cfg)?;
    let mut runs_csv = String::from("slug,method,episode,run,shots,metric_name,metric,trainable_params,final_loss\n");
    for (c, o) in cells.iter().zip(&outcomes) {
        let slug = &slugs[c.slot];
        let stem = format!("episode{}_run{}", c.episode, c.run);
        let checkpoint = if cfg.save_checkpoints {
            let rel = format!("checkpoints/{slug}/{stem}.ckpt");
            save_checkpoint(&dir.join(&rel), &o.model)?;
            Some(rel)
        } else {
            None
        };
        let file = RunFile {
            method: c.method.clone(),
            record: o.record.clone(),
            episode: o.episode.clone(),
            checkpoint,
        };
        write_stable_json(&dir.join(format!("runs/{slug}/{stem}.json")), &file)?;
        let r = &o.record;
        writeln!(
            runs_csv,
            "{slug},{},{},{},{},{},{},{},{}",
            r.method,
            r.episode,
            r.run,
            r.shots,
            r.metric_name,
            r.metric,
            r.trainable_params,
            final_loss(r)
        )
        .expect("write to String");
    }
    write_atomic(&dir.join("runs.csv"), runs_csv.as_bytes())?;

    let mut results = Vec::with_capacity(cfg.methods.len());
    let mut summary_csv = String::from("slug,method,metric_name,count,mean,variance,min,max\n");
    for (slot, m) in cfg.methods.iter().enumerate() {
        let records: Vec<&RunRecord> = cells
            .iter()
            .zip(&outcomes)
            .filter(|(c, _)| c.slot == slot)
            .map(|(_, o)| &o.record)
            .collect();
        let summary = summarize(&records.iter().map(|r| r.metric).collect::<Vec<_>>())?;
        let metric_name = records[0].metric_name.as_str();
        writeln!(
            summary_csv,
            "{},{},{metric_name},{},{},{},{},{}",
            slugs[slot],
            m.tag(),
            summary.count,
            summary.mean,
            summary.variance,
            summary.min,
            summary.max
        )
        .expect("write to String");
        writeln!(
            out,
            "{:<12} {metric_name} mean {:.4}  var {:.3e}  min {:.4}  max {:.4}  ({} runs)",
            slugs[slot], summary.mean, summary.variance, summary.min, summary.max, summary.count
        )?;
        results.push(MethodResult {
            slug: &slugs[slot],
            method: m,
            summary,
            records,
        });
    }
    write_atomic(&dir.join("summary.csv"), summary_csv.as_bytes())?;
    write_stable_json(
        &dir.join("metrics.json"),
        &Metrics {
            shots: cfg.shots,
            episodes: cfg.episodes,
            runs: cfg.runs,
            methods: results,
        },
    )?;
    eprintln!("trained {} cells in {:.1}s", cells.len(), started.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug)]
struct Variant {
    slot: usize,
    method: PeftMethod,
    value: String,
    ordering: String,
    prompt_length: Option<usize>,
    shots: usize,
}

fn expand(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<Variant> {
    let b = &cfg.backbone;
    let mut out = Vec::new();
    for (slot, m) in cfg.methods.iter().enumerate() {
        let base = Variant {
            slot,
            method: m.clone(),
            value: String::new(),
            ordering: String::new(),
            prompt_length: None,
            shots: cfg.shots,
        };
        match (axis, m) {
            (SweepAxis::Shots, _) => {
                for &k in &cfg.sweep.shots {
                    out.push(Variant {
                        value: k.to_string(),
                        shots: k,
                        ..base.clone()
                    });
                }
            }
            (SweepAxis::PromptLength, PeftMethod::Ept(c)) => {
                for &l in &cfg.sweep.prompt_lengths {
                    let rows = if cfg.sweep.relative_prompt_length {
                        relative_to_ept_rows(l, b.embed_dim, b.num_patches())
                    } else {
                        l
                    };
                    out.push(Variant {
                        method: PeftMethod::Ept(EptConfig {
                            prompt_length: rows,
                            ..c.clone()
                        }),
                        value: l.to_string(),
                        prompt_length: Some(rows),
                        ..base.clone()
                    });
                }
            }
            (SweepAxis::PromptLength, PeftMethod::Vpt(c)) => {
                for &l in &cfg.sweep.prompt_lengths {
                    out.push(Variant {
                        method: PeftMethod::Vpt(VptConfig {
                            prompt_length: l,
                            ..c.clone()
                        }),
                        value: l.to_string(),
                        prompt_length: Some(l),
                        ..base.clone()
                    });
                }
            }
            (SweepAxis::EmbeddingWay, PeftMethod::Ept(c)) => {
                for w in EmbeddingWay::ALL {
                    out.push(Variant {
                        method: PeftMethod::Ept(EptConfig {
                            embedding_way: w,
                            ..c.clone()
                        }),
                        value: w.as_str().to_string(),
                        ..base.clone()
                    });
                }
            }
            (SweepAxis::Depth, PeftMethod::Ept(c)) => {
                for &o in &cfg.sweep.orderings {
                    for &k in cfg.sweep.depths.as_deref().unwrap_or(&[]) {
                        out.push(Variant {
                            method: PeftMethod::Ept(EptConfig {
                                depth: Some(k),
                                ordering: o,
                                ..c.clone()
                            }),
                            value: k.to_string(),
                            ordering: serde_json::to_value(o)
                                .ok()
                                .and_then(|v| v.as_str().map(String::from))
                                .unwrap_or_default(),
                            ..base.clone()
                        });
                    }
                }
            }
            _ => unreachable!("axis checked against every method"),
        }
    }
    out
}

pub fn sweep(config_path: &Path, axis: SweepAxis, out: &mut dyn std::io::Write) -> CliResult<PathBuf> {
    let Prepared { config: cfg, data } = config::load(config_path)?;
    check_axis(&cfg, &data, axis)?;
    let started = Instant::now();
    let backbone = pretrained_backbone(&cfg.backbone, cfg.backbone_seed)?;
    let slugs = method_slugs(&cfg.methods);
    let variants = expand(&cfg, axis);
    let mut cells = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for e in 0..cfg.episodes {
            for r in 0..cfg.runs {
                cells.push((
                    vi,
                    CellSpec {
                        slot: v.slot,
                        method: v.method.clone(),
                        shots: v.shots,
                        episode: e,
                        run: r,
                    },
                ));
            }
        }
    }
    let specs: Vec<CellSpec> = cells.iter().map(|(_, c)| c.clone()).collect();
    let outcomes = run_cells(&cfg, &backbone, &data, &specs)?;

    write_echo(&cfg)?;
    let mut csv = String::from(
        "slug,method,axis,value,ordering,prompt_length,shots,episode,run,metric_name,metric,trainable_params\n",
    );
    for ((vi, c), o) in cells.iter().zip(&outcomes) {
        let v = &variants[*vi];
        let r = &o.record;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            slugs[c.slot],
            r.method,
            axis.as_str(),
            v.value,
            v.ordering,
            v.prompt_length.map(|p| p.to_string()).unwrap_or_default(),
            c.shots,
            c.episode,
            c.run,
            r.metric_name,
            r.metric,
            r.trainable_params
        )
        .expect("write to String");
    }
    let path = cfg.output_dir.join(format!("sweep_{}.csv", axis.as_str()));
    write_atomic(&path, csv.as_bytes())?;
    writeln!(out, "{} rows -> {}", cells.len(), path.display())?;
    eprintln!("swept {} cells in {:.1}s", cells.len(), started.elapsed().as_secs_f64());
    Ok(path)
}

// ---------------------------------------------------------------- analyze

pub struct AnalyzeOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    /// Per-run result file whose evaluation split is analysed.
    pub run: Option<PathBuf>,
    /// Replace the tuned model by its untouched backbone.
    pub frozen: bool,
    pub bins: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
struct RunSplit {
    episode: Episode,
}

#[derive(Debug, Serialize)]
struct PcaSummary {
    eigenvalues: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
    converged: bool,
}

#[derive(Debug, Serialize)]
struct ScalingSummary {
    layer: usize,
    head: usize,
    mean: f64,
    min: f64,
    max: f64,
}

#[derive(Debug, Serialize)]
struct Oracles {
    prop1_strictly_decreasing: bool,
    prop1_max_ratio_deviation: f64,
    lemma1_trials: usize,
    lemma1_trace_holds: bool,
    lemma1_per_sample_holds: bool,
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    method: String,
    frozen: bool,
    split: String,
    samples: usize,
    num_classes: usize,
    feature_dim: usize,
    intra_class: IntraClassReport,
    pca: PcaSummary,
    scaling: Vec<ScalingSummary>,
    oracles: Oracles,
}

fn default_analysis_dir(ckpt: &Path, frozen: bool) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let suffix = if frozen { "frozen-analysis" } else { "analysis" };
    ckpt.with_file_name(format!("{stem}.{suffix}"))
}

/// The frozen backbone of `model` under a linear head.
fn frozen_model(model: &Model) -> CliResult<Model> {
    let names: Vec<String> = backbone_shapes(&model.backbone).into_iter().map(|(n, _)| n).collect();
    if let Some(n) = names.iter().find(|n| model.trainable.contains(*n)) {
        return Err(CliError::config(
            "--frozen",
            format!("{} tunes backbone tensor `{n}`; its frozen weights are not in the checkpoint", model.method.tag()),
        ));
    }
    let mut store = ParamStore::new();
    for n in &names {
        store.insert(n.clone(), model.params.get(n)?.clone());
    }
    Ok(Model::new(&model.backbone, &PeftMethod::Linear, &store, 0)?)
}

fn check_compatible(cfg: &BackboneConfig, data: &Dataset) -> CliResult<()> {
    let want = [cfg.channels, cfg.image_side, cfg.image_side];
    if let Some(s) = data.samples.iter().find(|s| s.image.shape() != want.as_slice()) {
        return Err(CliError::Runtime(Error::Load(format!(
            "sample {} has shape {:?} but the checkpoint expects {want:?}",
            s.id,
            s.image.shape()
        ))));
    }
    if data.num_classes != cfg.num_classes {
        return Err(CliError::Runtime(Error::Load(format!(
            "dataset has {} classes but the checkpoint head has {}",
            data.num_classes, cfg.num_classes
        ))));
    }
    Ok(())
}

pub fn analyze(opts: &AnalyzeOptions, out: &mut dyn std::io::Write) -> CliResult<PathBuf> {
    if opts.bins == 0 {
        return Err(CliError::config("--bins", "must be positive"));
    }
    let mut model = load_checkpoint(&opts.checkpoint)?;
    if opts.frozen {
        model = frozen_model(&model)?;
    }
    let data = read_dataset(&opts.data, None)?;
    check_compatible(&model.backbone, &data)?;
    let (indices, split) = match &opts.run {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config("--run", format!("{}: {e}", p.display())))?;
            let r: RunSplit = serde_json::from_str(&text).map_err(|e| CliError::config("--run", e.to_string()))?;
            if let Some(&bad) = r.episode.eval.iter().find(|&&i| i >= data.len()) {
                return Err(CliError::config("--run", format!("eval index {bad} outside a dataset of {}", data.len())));
            }
            (r.episode.eval, "eval".to_string())
        }
        None => ((0..data.len()).collect::<Vec<_>>(), "all".to_string()),
    };
    let is_ept = matches!(model.method, PeftMethod::Ept(_));
    let inf = infer(&model, &data, &indices, is_ept)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].primary).collect();
    let ids: Vec<String> = indices.iter().map(|&i| data.samples[i].id.to_string()).collect();
    let feats = LabeledFeatures::new(inf.features, labels.clone(), data.num_classes)?;
    let intra = intra_class_distance(&feats)?;
    let k = feats.dim().min(2);
    let pca = pca_project(&feats, k, opts.seed)?;
    let pc1: Vec<f64> = pca.projections.iter().map(|p| p[0]).collect();
    let hist = feature_histogram(&pc1, opts.bins)?;

    let dir = opts.out.clone().unwrap_or_else(|| default_analysis_dir(&opts.checkpoint, opts.frozen));
    write_atomic(&dir.join("pc1_histogram.csv"), hist.to_csv().as_bytes())?;
    write_atomic(&dir.join("projection.csv"), projections_csv(&ids, &labels, &pca).as_bytes())?;

    // layer -> rows of (sample id, head, column, factor)
    let mut per_layer: BTreeMap<usize, String> = BTreeMap::new();
    let mut stats: BTreeMap<(usize, usize), (f64, f64, f64, usize)> = BTreeMap::new();
    for (id, obs) in ids.iter().zip(&inf.scaling) {
        for o in obs {
            let s = per_layer
                .entry(o.layer)
                .or_insert_with(|| String::from("sample_id,head,column,factor\n"));
            let st = stats.entry((o.layer, o.head)).or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
            for (j, &c) in o.factors.iter().enumerate() {
                writeln!(s, "{id},{},{j},{c}", o.head).expect("write to String");
                st.0 += c;
                st.1 = st.1.min(c);
                st.2 = st.2.max(c);
                st.3 += 1;
            }
        }
    }
    for (layer, csv) in &per_layer {
        write_atomic(&dir.join(format!("scaling_layer{}.csv", layer + 1)), csv.as_bytes())?;
    }
    let scaling = stats
        .into_iter()
        .map(|((layer, head), (sum, min, max, n))| ScalingSummary {
            layer: layer + 1,
            head,
            mean: sum / n as f64,
            min,
            max,
        })
        .collect();

    let p1 = prop1_sweep(1.0, opts.seed, checks::PROP1_POINTS)?;
    let l1 = lemma1_randomized(opts.seed, 200)?;
    let report = AnalysisReport {
        method: model.method.tag().to_string(),
        frozen: opts.frozen,
        split,
        samples: feats.len(),
        num_classes: data.num_classes,
        feature_dim: feats.dim(),
        pca: PcaSummary {
            eigenvalues: pca.eigenvalues.clone(),
            explained_variance_ratio: pca.explained_variance_ratio.clone(),
            converged: pca.converged,
        },
        scaling,
        oracles: Oracles {
            prop1_strictly_decreasing: p1.strictly_decreasing,
            prop1_max_ratio_deviation: p1.max_ratio_deviation,
            lemma1_trials: l1.trials,
            lemma1_trace_holds: l1.trace_holds(),
            lemma1_per_sample_holds: l1.per_sample_holds(),
        },
        intra_class: intra,
    };
    write_stable_json(&dir.join("intra_class.json"), &report)?;
    writeln!(
        out,
        "{} ({}split {}, {} samples): trace {:.6e} -> {}",
        report.method,
        if opts.frozen { "frozen, " } else { "" },
        report.split,
        report.samples,
        report.intra_class.trace,
        dir.display()
    )?;
    Ok(dir)
}

// ---------------------------------------------------------------- synth

pub fn synth(spec: &SynthSpec, seed: u64, dir: &Path, out: &mut dyn std::io::Write) -> CliResult<PathBuf> {
    let data = synth_dataset(spec, seed)?;
    let manifest = write_dataset(dir, &data)?;
    writeln!(out, "{} samples -> {}", data.len(), manifest.display())?;
    Ok(manifest)
}
