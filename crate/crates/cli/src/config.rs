//! Experiment configuration: parsing, cross-field validation and the resolved
//! echo written next to every result set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use eptlab_core::fewshot::{sample_episode_for, synth_dataset, Dataset, SynthSpec, TaskType, TrainConfig};
use eptlab_core::io::read_dataset;
use eptlab_core::peft::{DepthOrdering, PeftMethod, PromptMode};
use eptlab_core::vit::BackboneConfig;

use crate::error::{CliError, CliResult};

pub const DEFAULT_PRESET: &str = "toy-colon";

/// Where samples come from. Exactly one of `preset`, `synth` and `manifest`
/// may be set; none means the default preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Manifest only. Inferred from the label vectors when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    /// Synthetic data only. Defaults to the experiment seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[value(name = "prompt_length")]
    PromptLength,
    #[value(name = "depth")]
    Depth,
    #[value(name = "embedding_way")]
    EmbeddingWay,
    #[value(name = "shots")]
    Shots,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::PromptLength => "prompt_length",
            SweepAxis::Depth => "depth",
            SweepAxis::EmbeddingWay => "embedding_way",
            SweepAxis::Shots => "shots",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub prompt_lengths: Vec<usize>,
    /// Read `prompt_lengths` as VPT-sized prompt counts and convert them to
    /// EPT rows for the current dimensions.
    pub relative_prompt_length: bool,
    /// Defaults to every depth from 1 to the layer count.
    pub depths: Option<Vec<usize>>,
    pub orderings: Vec<DepthOrdering>,
    pub shots: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            prompt_lengths: vec![1, 2, 4, 8],
            relative_prompt_length: false,
            depths: None,
            orderings: vec![DepthOrdering::BottomToTop, DepthOrdering::TopToBottom],
            shots: vec![1, 5, 10],
        }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("eptlab-out")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    backbone: BackboneConfig,
    #[serde(default)]
    backbone_seed: Option<u64>,
    #[serde(default)]
    method: Option<PeftMethod>,
    #[serde(default)]
    methods: Option<Vec<PeftMethod>>,
    #[serde(default)]
    dataset: DatasetConfig,
    #[serde(default = "one")]
    shots: usize,
    #[serde(default = "one")]
    episodes: usize,
    #[serde(default = "one")]
    runs: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default)]
    sweep: SweepConfig,
    #[serde(default = "yes")]
    save_checkpoints: bool,
}

/// A fully resolved experiment. Every default is materialized, so its JSON
/// form fed back to the CLI reproduces the same outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub methods: Vec<PeftMethod>,
    pub dataset: DatasetConfig,
    pub shots: usize,
    pub episodes: usize,
    pub runs: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    pub save_checkpoints: bool,
}

/// Resolved config plus the dataset it names.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub data: Dataset,
}

pub fn load(path: &Path) -> CliResult<Prepared> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
    prepare(&text)
}

pub fn prepare(text: &str) -> CliResult<Prepared> {
    let raw = parse(text)?;
    resolve(raw)
}

fn parse(text: &str) -> CliResult<RawConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "<document>".to_string() } else { path }, e.into_inner().to_string())
    })
}

fn check_positive(field: &str, v: usize) -> CliResult<()> {
    if v == 0 {
        return Err(CliError::config(field, "must be positive"));
    }
    Ok(())
}

fn resolve(raw: RawConfig) -> CliResult<Prepared> {
    raw.backbone.validate()?;
    let methods = match (raw.method, raw.methods) {
        (Some(_), Some(_)) => return Err(CliError::config("methods", "give either `method` or `methods`, not both")),
        (Some(m), None) => vec![m],
        (None, Some(ms)) if ms.is_empty() => return Err(CliError::config("methods", "empty method list")),
        (None, Some(ms)) => ms,
        (None, None) => vec![PeftMethod::Linear],
    };
    for (i, m) in methods.iter().enumerate() {
        m.validate(&raw.backbone).map_err(|e| match CliError::from(e) {
            CliError::Config { field, message } => CliError::config(format!("methods[{i}].{field}"), message),
            other => other,
        })?;
    }
    check_positive("shots", raw.shots)?;
    check_positive("episodes", raw.episodes)?;
    check_positive("runs", raw.runs)?;
    validate_sweep(&raw.sweep, &raw.backbone)?;

    let (dataset, data) = resolve_dataset(&raw.dataset, raw.seed, &raw.backbone)?;
    raw.train.validate(data.task_type)?;
    let mut train = raw.train;
    train.loss = Some(train.resolved_loss(data.task_type));
    let mut sweep = raw.sweep;
    sweep.depths.get_or_insert_with(|| (1..=raw.backbone.num_layers).collect());

    let config = ExperimentConfig {
        backbone_seed: raw.backbone_seed.unwrap_or(raw.seed),
        backbone: raw.backbone,
        methods,
        dataset,
        shots: raw.shots,
        episodes: raw.episodes,
        runs: raw.runs,
        seed: raw.seed,
        train,
        output_dir: raw.output_dir,
        sweep,
        save_checkpoints: raw.save_checkpoints,
    };
    check_shots(&config, &data, config.shots, "shots")?;
    Ok(Prepared { config, data })
}

fn validate_sweep(s: &SweepConfig, backbone: &BackboneConfig) -> CliResult<()> {
    if s.prompt_lengths.is_empty() || s.prompt_lengths.contains(&0) {
        return Err(CliError::config("sweep.prompt_lengths", "need a non-empty list of positive lengths"));
    }
    if let Some(d) = &s.depths {
        if d.is_empty() {
            return Err(CliError::config("sweep.depths", "empty depth list"));
        }
        if let Some(bad) = d.iter().find(|&&k| k == 0 || k > backbone.num_layers) {
            return Err(CliError::config(
                "sweep.depths",
                format!("depth {bad} outside 1..={}", backbone.num_layers),
            ));
        }
    }
    if s.orderings.is_empty() {
        return Err(CliError::config("sweep.orderings", "empty ordering list"));
    }
    if s.shots.is_empty() || s.shots.contains(&0) {
        return Err(CliError::config("sweep.shots", "need a non-empty list of positive shot counts"));
    }
    Ok(())
}

fn resolve_dataset(d: &DatasetConfig, seed: u64, backbone: &BackboneConfig) -> CliResult<(DatasetConfig, Dataset)> {
    let given = [d.preset.is_some(), d.synth.is_some(), d.manifest.is_some()];
    if given.iter().filter(|&&g| g).count() > 1 {
        return Err(CliError::config("dataset", "set only one of `preset`, `synth` and `manifest`"));
    }
    if let Some(path) = &d.manifest {
        if d.seed.is_some() {
            return Err(CliError::config("dataset.seed", "a manifest dataset takes no seed"));
        }
        let data = read_dataset(path, d.task_type)
            .map_err(|e| CliError::config("dataset.manifest", e.to_string()))?;
        let want = [backbone.channels, backbone.image_side, backbone.image_side];
        if let Some(s) = data.samples.iter().find(|s| s.image.shape() != want.as_slice()) {
            return Err(CliError::config(
                "dataset.manifest",
                format!("sample {} has shape {:?}, backbone expects {want:?}", s.id, s.image.shape()),
            ));
        }
        check_classes(data.num_classes, backbone)?;
        let resolved = DatasetConfig {
            manifest: Some(path.clone()),
            task_type: Some(data.task_type),
            ..DatasetConfig::default()
        };
        return Ok((resolved, data));
    }
    if d.task_type.is_some() {
        return Err(CliError::config("dataset.task_type", "only a manifest dataset takes a task type"));
    }
    let spec = match (&d.synth, &d.preset) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => SynthSpec::preset(p)?,
        (None, None) => SynthSpec::preset(DEFAULT_PRESET)?,
    };
    spec.validate()?;
    if spec.image_side != backbone.image_side {
        return Err(CliError::config(
            "dataset.image_side",
            format!("{} differs from backbone.image_side {}", spec.image_side, backbone.image_side),
        ));
    }
    if spec.channels != backbone.channels {
        return Err(CliError::config(
            "dataset.channels",
            format!("{} differs from backbone.channels {}", spec.channels, backbone.channels),
        ));
    }
    check_classes(spec.num_classes, backbone)?;
    let data_seed = d.seed.unwrap_or(seed);
    let data = synth_dataset(&spec, data_seed)?;
    let resolved = DatasetConfig {
        synth: Some(spec),
        seed: Some(data_seed),
        ..DatasetConfig::default()
    };
    Ok((resolved, data))
}

fn check_classes(classes: usize, backbone: &BackboneConfig) -> CliResult<()> {
    if classes != backbone.num_classes {
        return Err(CliError::config(
            "backbone.num_classes",
            format!("{} but the dataset has {classes} classes", backbone.num_classes),
        ));
    }
    Ok(())
}

/// Every episode must leave a non-empty evaluation split at `shots`.
pub fn check_shots(cfg: &ExperimentConfig, data: &Dataset, shots: usize, field: &str) -> CliResult<()> {
    for e in 0..cfg.episodes {
        sample_episode_for(data, shots, cfg.seed, e).map_err(|err| CliError::config(field, err.to_string()))?;
    }
    Ok(())
}

/// Rejects an axis that does not apply to every configured method.
pub fn check_axis(cfg: &ExperimentConfig, data: &Dataset, axis: SweepAxis) -> CliResult<()> {
    for (i, m) in cfg.methods.iter().enumerate() {
        let ok = match (axis, m) {
            (SweepAxis::Shots, _) => true,
            (SweepAxis::PromptLength, PeftMethod::Ept(_) | PeftMethod::Vpt(_)) => true,
            (SweepAxis::EmbeddingWay, PeftMethod::Ept(_)) => true,
            (SweepAxis::Depth, PeftMethod::Ept(c)) => c.mode == PromptMode::Deep && c.layers.is_none(),
            _ => false,
        };
        if !ok {
            let need = match axis {
                SweepAxis::PromptLength => "EPT or VPT",
                SweepAxis::EmbeddingWay => "EPT",
                SweepAxis::Depth => "EPT in deep mode without explicit layers",
                SweepAxis::Shots => unreachable!(),
            };
            return Err(CliError::config(
                format!("methods[{i}]"),
                format!("axis {} needs {need}, got {}", axis.as_str(), m.tag()),
            ));
        }
    }
    if axis == SweepAxis::Shots {
        for &k in &cfg.sweep.shots {
            check_shots(cfg, data, k, "sweep.shots")?;
        }
    }
    Ok(())
}
