use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{synth_dataset, Dataset, Episode, Sample, SynthSpec, TaskType};
use super::metrics::{self, DistributionSummary};
use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_smooth, Evaluation, GradCheckReport};
use crate::params::{Bound, ParamStore};
use crate::peft::{Model, PeftMethod};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::vit::BackboneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

impl LossKind {
    pub fn for_task(task: TaskType) -> Self {
        match task {
            TaskType::SingleLabel => LossKind::CrossEntropy,
            TaskType::MultiLabel => LossKind::BinaryCrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Derived from the task type when absent.
    pub loss: Option<LossKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-4,
            epochs: 20,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, task: TaskType) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if let Some(loss) = self.loss {
            if loss != LossKind::for_task(task) {
                return Err(Error::config(
                    "train.loss",
                    format!("{loss:?} does not match a {task:?} task"),
                ));
            }
        }
        Ok(())
    }

    pub fn resolved_loss(&self, task: TaskType) -> LossKind {
        self.loss.unwrap_or_else(|| LossKind::for_task(task))
    }
}

/// Mean per-sample loss of `samples` under the parameters bound in `b`.
pub fn batch_loss(g: &mut Graph, model: &Model, b: &Bound, samples: &[&Sample], task: TaskType) -> Result<Var> {
    loss_with(g, model, b, samples, task, false)
}

fn loss_with(g: &mut Graph, model: &Model, b: &Bound, samples: &[&Sample], task: TaskType, excess: bool) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut logits = Vec::with_capacity(samples.len());
    for s in samples {
        logits.push(model.forward(g, b, &s.image, false)?.logits);
    }
    let stacked = if logits.len() == 1 { logits[0] } else { g.hstack(&logits)? };
    let total = match LossKind::for_task(task) {
        LossKind::CrossEntropy => {
            let targets: Vec<usize> = samples.iter().map(|s| s.primary).collect();
            if excess {
                g.cross_entropy_excess(stacked, &targets)?
            } else {
                g.cross_entropy(stacked, &targets)?
            }
        }
        LossKind::BinaryCrossEntropy => {
            let c = samples[0].labels.len();
            let mut t = Tensor::zeros(&[c, samples.len()]);
            for (j, s) in samples.iter().enumerate() {
                for (k, &l) in s.labels.iter().enumerate() {
                    t.set(k, j, f64::from(l));
                }
            }
            g.bce_with_logits(stacked, t)?
        }
    };
    g.scale(total, 1.0 / samples.len() as f64)
}

/// Scalar objective over a fixed batch, for the finite-difference oracle. It
/// differs from [`batch_loss`] by a constant for single-label tasks.
pub fn batch_objective<'a>(
    model: &'a Model,
    samples: Vec<&'a Sample>,
    task: TaskType,
) -> impl Fn(&ParamStore, bool) -> Result<Evaluation> + 'a {
    move |params: &ParamStore, want_grad: bool| {
        let mut g = Graph::new();
        let empty = BTreeSet::new();
        let trainable = if want_grad { &model.trainable } else { &empty };
        let b = Bound::bind(&mut g, params, trainable);
        let loss = loss_with(&mut g, model, &b, &samples, task, true)?;
        let value = g.value(loss).data()[0];
        let kinks = Some(g.kink_signature());
        let grads = if want_grad {
            Some(g.backward(loss)?.into_named())
        } else {
            None
        };
        Ok(Evaluation { value, grads, kinks })
    }
}

/// Adaptive moment estimation over named tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn sgd_update(lr: f64, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in grads {
        for (w, &gi) in params.get_mut(name)?.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mini-batch training of the masked parameters of `model` on the episode's
/// train split. Batches are reshuffled each epoch from `seed`.
pub fn train(model: &mut Model, data: &Dataset, episode: &Episode, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate(data.task_type)?;
    if model.trainable.is_empty() {
        return Err(Error::Contract(format!("{} has no trainable parameters", model.method.tag())));
    }
    if episode.train.is_empty() {
        return Err(Error::Contract("episode has an empty train split".into()));
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order = episode.train.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, &format!("shuffle/{epoch}")));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let loss = match batch_loss(&mut g, model, &b, &samples, data.task_type) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            total += value * samples.len() as f64;
            let grads = g.backward(loss)?.into_named();
            match cfg.optimizer {
                OptimizerKind::Adam => adam.update(&mut model.params, &grads)?,
                OptimizerKind::Sgd => sgd_update(cfg.learning_rate, &mut model.params, &grads)?,
            }
            steps += 1;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport { epoch_losses, steps })
}

/// Per-sample outputs gathered in one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Vec<Vec<f64>>,
    /// Final CLS features.
    pub features: Vec<Vec<f64>>,
    pub scaling: Vec<Vec<crate::peft::ScalingObservation>>,
}

pub fn infer(model: &Model, data: &Dataset, indices: &[usize], record_scaling: bool) -> Result<Inference> {
    let mut out = Inference {
        logits: Vec::with_capacity(indices.len()),
        features: Vec::with_capacity(indices.len()),
        scaling: Vec::with_capacity(indices.len()),
    };
    let empty = BTreeSet::new();
    for &i in indices {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &model.params, &empty);
        let o = model.forward(&mut g, &b, &data.samples[i].image, record_scaling)?;
        out.logits.push(g.value(o.logits).data().to_vec());
        out.features.push(g.value(o.cls).data().to_vec());
        out.scaling.push(o.scaling);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy for single-label tasks, mAP for multi-label tasks.
    pub metric: f64,
    pub metric_name: String,
    pub warnings: Vec<String>,
}

pub fn evaluate_scores(logits: &[Vec<f64>], data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    match data.task_type {
        TaskType::SingleLabel => {
            let targets: Vec<usize> = indices.iter().map(|&i| data.samples[i].primary).collect();
            Ok(EvalReport {
                metric: metrics::accuracy(logits, &targets)?,
                metric_name: "acc".into(),
                warnings: vec![],
            })
        }
        TaskType::MultiLabel => {
            let scores: Vec<Vec<f64>> = logits.iter().map(|row| row.iter().map(|&z| sigmoid(z)).collect()).collect();
            let labels: Vec<Vec<u8>> = indices.iter().map(|&i| data.samples[i].labels.clone()).collect();
            let r = metrics::mean_average_precision(&scores, &labels)?;
            Ok(EvalReport {
                metric: r.map,
                metric_name: "mAP".into(),
                warnings: r.warnings,
            })
        }
    }
}

pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    let inf = infer(model, data, indices, false)?;
    evaluate_scores(&inf.logits, data, indices)
}

/// One (episode, run) cell of a multi-run experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub episode: usize,
    pub run: usize,
    pub shots: usize,
    pub metric_name: String,
    pub metric: f64,
    pub epoch_losses: Vec<f64>,
    pub trainable_params: usize,
    pub warnings: Vec<String>,
}

/// Seeds for every cell, derived from one master seed by name.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, &format!("episode/{episode}"))
}

pub fn run_seed(seed: u64, episode: usize, run: usize) -> u64 {
    derive_seed(seed, &format!("run/{episode}/{run}"))
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub record: RunRecord,
    pub model: Model,
    pub episode: Episode,
}

/// Train and evaluate one cell. The backbone is shared; head, method tensors
/// and batch order come from the run seed.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &BackboneConfig,
    backbone: &ParamStore,
    method: &PeftMethod,
    data: &Dataset,
    shots: usize,
    train_cfg: &TrainConfig,
    seed: u64,
    episode_index: usize,
    run_index: usize,
) -> Result<CellOutcome> {
    let episode = sample_episode_for(data, shots, seed, episode_index)?;
    let rs = run_seed(seed, episode_index, run_index);
    let mut model = Model::new(cfg, method, backbone, rs)?;
    let report = train(&mut model, data, &episode, train_cfg, rs)?;
    let eval = evaluate(&model, data, &episode.eval)?;
    Ok(CellOutcome {
        record: RunRecord {
            method: method.tag().to_string(),
            episode: episode_index,
            run: run_index,
            shots,
            metric_name: eval.metric_name,
            metric: eval.metric,
            epoch_losses: report.epoch_losses,
            trainable_params: model.trainable_count(),
            warnings: eval.warnings,
        },
        model,
        episode,
    })
}

pub fn sample_episode_for(data: &Dataset, shots: usize, seed: u64, episode_index: usize) -> Result<Episode> {
    super::data::sample_episode(data, shots, episode_seed(seed, episode_index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRunResult {
    pub records: Vec<RunRecord>,
    pub summary: DistributionSummary,
}

/// `episodes × runs` cells of one method, sequentially.
#[allow(clippy::too_many_arguments)]
pub fn multi_run(
    cfg: &BackboneConfig,
    backbone: &ParamStore,
    method: &PeftMethod,
    data: &Dataset,
    shots: usize,
    episodes: usize,
    runs: usize,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<MultiRunResult> {
    if runs == 0 || episodes == 0 {
        return Err(Error::config("runs", "need at least one episode and one run"));
    }
    let mut records = Vec::with_capacity(episodes * runs);
    for e in 0..episodes {
        for r in 0..runs {
            records.push(run_cell(cfg, backbone, method, data, shots, train_cfg, seed, e, r)?.record);
        }
    }
    let summary = metrics::summarize(&records.iter().map(|r| r.metric).collect::<Vec<_>>())?;
    Ok(MultiRunResult { records, summary })
}

pub const GRADCHECK_ATTEMPTS: usize = 24;

#[derive(Clone, Debug)]
pub struct MethodGradCheck {
    pub report: GradCheckReport,
    /// Base points tried; earlier ones had an entry whose window crossed a ReLU kink.
    pub attempts: usize,
}

/// Finite-difference check of every trainable scalar of `method` on a
/// one-sample batch.
///
/// Prompt tensors are redrawn uniformly in [-1, 1] and zero-initialised method
/// tensors from N(0, 0.1), so every gradient is exercised at an O(1) point. A
/// base point whose `±step` window crosses a ReLU kink for any entry is
/// discarded and the next one, derived from `seed`, is tried.
pub fn method_gradcheck(cfg: &BackboneConfig, method: &PeftMethod, seed: u64, step: f64) -> Result<MethodGradCheck> {
    let spec = SynthSpec {
        num_classes: cfg.num_classes,
        image_side: cfg.image_side,
        channels: cfg.channels,
        samples_per_class: 1,
        ..SynthSpec::toy_colon()
    };
    for attempt in 0..GRADCHECK_ATTEMPTS {
        let s = derive_seed(seed, &format!("gradcheck/{attempt}"));
        let mut model = Model::random(cfg, method, s)?;
        let mut rng = stream(s, "gradcheck-perturb");
        for name in model.trainable.clone() {
            let t = model.params.get_mut(&name)?;
            let shape = t.shape().to_vec();
            if name.starts_with("prompts.") {
                *t = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
            } else if t.data().iter().all(|&v| v == 0.0) {
                *t = Tensor::randn(&shape, 0.0, 0.1, &mut rng);
            }
        }
        let data = synth_dataset(&spec, s)?;
        let sample = &data.samples[attempt % data.samples.len()];
        let f = batch_objective(&model, vec![sample], data.task_type);
        if let Some(report) = finite_diff_check_smooth(f, &model.params, step)? {
            return Ok(MethodGradCheck {
                report,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::Oracle(format!(
        "{}: no kink-free base point in {GRADCHECK_ATTEMPTS} attempts",
        method.tag()
    )))
}
