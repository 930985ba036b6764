//! Synthetic class-conditioned datasets and N-way K-shot episodes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `channels × side × side`.
    pub image: Tensor,
    /// 0/1 indicator per class.
    pub labels: Vec<u8>,
    /// Class the sample was drawn for; episodes stratify on it.
    pub primary: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub task_type: TaskType,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, task_type: TaskType, num_classes: usize) -> Result<Self> {
        for s in &samples {
            if s.labels.len() != num_classes || s.labels.iter().any(|&l| l > 1) {
                return Err(Error::Ingestion(format!(
                    "sample {} has label vector {:?} for {num_classes} classes",
                    s.id, s.labels
                )));
            }
            let positives = s.labels.iter().filter(|&&l| l == 1).count();
            if task_type == TaskType::SingleLabel && positives != 1 {
                return Err(Error::Ingestion(format!(
                    "single-label sample {} has {positives} positives",
                    s.id
                )));
            }
            if s.primary >= num_classes || s.labels[s.primary] != 1 {
                return Err(Error::Ingestion(format!(
                    "sample {} primary class {} is not a positive label",
                    s.id, s.primary
                )));
            }
        }
        Ok(Self {
            samples,
            task_type,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.primary].push(i);
        }
        out
    }
}

/// Gaussian blobs on a ring, one per class, plus uniform pixel noise.
///
/// `margin` is the blob amplitude: at 0 every class has the same image
/// distribution; once it exceeds twice the noise amplitude the class-centre
/// pixels have disjoint supports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub task_type: TaskType,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub channels: usize,
    pub margin: f64,
    /// Pixel noise is uniform on `[-noise, noise]`.
    pub noise: f64,
    pub blob_sigma: f64,
    /// Blob width grows geometrically with the class index, from `blob_sigma`
    /// for class 0 up to `blob_sigma * width_ratio` for the last class. Patch
    /// tokens barely see where a blob sits, so width is what an untrained
    /// backbone can pick up.
    pub width_ratio: f64,
    /// Blob centres move uniformly by up to this many pixels per axis.
    pub jitter: f64,
    /// Multi-label only: chance that each non-primary class is also present.
    pub extra_label_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::toy_colon()
    }
}

impl SynthSpec {
    /// Two-class single-label task.
    pub fn toy_colon() -> Self {
        Self {
            num_classes: 2,
            task_type: TaskType::SingleLabel,
            samples_per_class: 50,
            image_side: 16,
            channels: 1,
            margin: 1.0,
            noise: 1.0,
            blob_sigma: 2.0,
            width_ratio: 2.0,
            jitter: 1.0,
            extra_label_prob: 0.0,
        }
    }

    /// Four-class multi-label task.
    pub fn toy_endo() -> Self {
        Self {
            num_classes: 4,
            task_type: TaskType::MultiLabel,
            samples_per_class: 30,
            extra_label_prob: 0.3,
            ..Self::toy_colon()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy-colon" => Ok(Self::toy_colon()),
            "toy-endo" => Ok(Self::toy_endo()),
            other => Err(Error::config("dataset.name", format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |field: &str, msg: &str| Err(Error::config(format!("dataset.{field}"), msg));
        if self.num_classes < 2 {
            return f("num_classes", "need at least two classes");
        }
        if self.samples_per_class == 0 {
            return f("samples_per_class", "must be positive");
        }
        if self.image_side == 0 || self.channels == 0 {
            return f("image_side", "image must be non-empty");
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return f("margin", "must be finite and non-negative");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return f("noise", "must be finite and non-negative");
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return f("blob_sigma", "must be positive");
        }
        if !(self.width_ratio.is_finite() && self.width_ratio >= 1.0) {
            return f("width_ratio", "must be at least 1");
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return f("jitter", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.extra_label_prob) {
            return f("extra_label_prob", "must lie in [0, 1]");
        }
        if self.task_type == TaskType::SingleLabel && self.extra_label_prob != 0.0 {
            return f("extra_label_prob", "single-label tasks cannot carry extra labels");
        }
        Ok(())
    }

    fn class_sigma(&self, k: usize) -> f64 {
        let t = k as f64 / (self.num_classes - 1) as f64;
        self.blob_sigma * self.width_ratio.powf(t)
    }

    fn class_centre(&self, k: usize) -> (f64, f64) {
        let mid = (self.image_side as f64 - 1.0) / 2.0;
        let radius = self.image_side as f64 / 4.0;
        let angle = std::f64::consts::TAU * k as f64 / self.num_classes as f64;
        (mid + radius * angle.sin(), mid + radius * angle.cos())
    }
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(seed, "dataset");
    let (s, c) = (spec.image_side, spec.num_classes);
    let mut samples = Vec::with_capacity(c * spec.samples_per_class);
    for primary in 0..c {
        for _ in 0..spec.samples_per_class {
            let mut labels = vec![0u8; c];
            labels[primary] = 1;
            if spec.task_type == TaskType::MultiLabel {
                for (k, l) in labels.iter_mut().enumerate() {
                    if k != primary && rng.gen_bool(spec.extra_label_prob) {
                        *l = 1;
                    }
                }
            }
            let mut image = vec![0.0; spec.channels * s * s];
            for (k, _) in labels.iter().enumerate().filter(|(_, &l)| l == 1) {
                let (cy, cx) = spec.class_centre(k);
                let (dy, dx) = if spec.jitter > 0.0 {
                    (
                        rng.gen_range(-spec.jitter..=spec.jitter),
                        rng.gen_range(-spec.jitter..=spec.jitter),
                    )
                } else {
                    (0.0, 0.0)
                };
                let sigma = spec.class_sigma(k);
                let two_var = 2.0 * sigma * sigma;
                for ch in 0..spec.channels {
                    for y in 0..s {
                        for x in 0..s {
                            let r2 = (y as f64 - cy - dy).powi(2) + (x as f64 - cx - dx).powi(2);
                            image[(ch * s + y) * s + x] += spec.margin * (-r2 / two_var).exp();
                        }
                    }
                }
            }
            if spec.noise > 0.0 {
                for px in &mut image {
                    *px += rng.gen_range(-spec.noise..=spec.noise);
                }
            }
            samples.push(Sample {
                id: samples.len(),
                image: Tensor::new(vec![spec.channels, s, s], image)?,
                labels,
                primary,
            });
        }
    }
    Dataset::new(samples, spec.task_type, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Indices into the dataset, grouped by class then draw order.
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub shots: usize,
    pub seed: u64,
}

/// Draws `shots` samples per class without replacement; the rest become the
/// evaluation split.
pub fn sample_episode(d: &Dataset, shots: usize, seed: u64) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::Sampling("shots must be positive".into()));
    }
    let mut rng = stream(seed, "episode");
    let mut train = Vec::with_capacity(shots * d.num_classes);
    let mut taken = vec![false; d.len()];
    for (k, members) in d.class_members().iter().enumerate() {
        if members.len() < shots {
            return Err(Error::Sampling(format!(
                "class {k} has {} samples, fewer than {shots} shots",
                members.len()
            )));
        }
        let picked: Vec<usize> = members.choose_multiple(&mut rng, shots).copied().collect();
        for &i in &picked {
            taken[i] = true;
        }
        train.extend(picked);
    }
    let eval: Vec<usize> = (0..d.len()).filter(|&i| !taken[i]).collect();
    if eval.is_empty() {
        return Err(Error::Sampling(format!(
            "{shots} shots exhaust every class; evaluation split is empty"
        )));
    }
    Ok(Episode {
        train,
        eval,
        shots,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny(per_class: usize) -> Dataset {
        synth_dataset(
            &SynthSpec {
                samples_per_class: per_class,
                image_side: 4,
                ..SynthSpec::toy_colon()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_dataset(&SynthSpec::toy_endo(), 11).unwrap();
        let b = synth_dataset(&SynthSpec::toy_endo(), 11).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&SynthSpec::toy_endo(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_invariants_hold() {
        let d = synth_dataset(&SynthSpec::toy_endo(), 1).unwrap();
        assert!(d.samples.iter().any(|s| s.labels.iter().filter(|&&l| l == 1).count() > 1));
        let d = synth_dataset(&SynthSpec::toy_colon(), 1).unwrap();
        assert!(d.samples.iter().all(|s| s.labels.iter().filter(|&&l| l == 1).count() == 1));
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let spec = SynthSpec {
            num_classes: 1,
            ..SynthSpec::toy_colon()
        };
        assert!(matches!(synth_dataset(&spec, 0), Err(Error::Config { .. })));
        let spec = SynthSpec {
            extra_label_prob: 0.5,
            ..SynthSpec::toy_colon()
        };
        assert!(synth_dataset(&spec, 0).is_err());
    }

    #[test]
    fn one_shot_split_sizes() {
        let d = tiny(10);
        let e = sample_episode(&d, 1, 4).unwrap();
        assert_eq!(e.train.len(), 2);
        assert_eq!(e.eval.len(), 18);
        assert!(e.train.iter().all(|i| !e.eval.contains(i)));
        assert_eq!(e, sample_episode(&d, 1, 4).unwrap());
    }

    #[test]
    fn exhausting_shots_is_sampling_error() {
        let d = tiny(10);
        assert!(matches!(sample_episode(&d, 10, 0), Err(Error::Sampling(_))));
        assert!(matches!(sample_episode(&d, 11, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn one_shot_draws_cover_the_universe_uniformly() {
        // 2 classes × 10 samples, K = 1: C(10,1)² = 100 equally likely train sets.
        let d = tiny(10);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let trials = 20_000;
        for seed in 0..trials {
            *counts.entry(sample_episode(&d, 1, seed).unwrap().train).or_default() += 1;
        }
        assert_eq!(counts.len(), 100);
        let expected = trials as f64 / 100.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 degrees of freedom; the 0.999 quantile is about 148.
        assert!(chi2 < 148.0, "chi2 = {chi2}");
        let collisions = (0..2000u64)
            .filter(|&s| sample_episode(&d, 1, 2 * s).unwrap().train == sample_episode(&d, 1, 2 * s + 1).unwrap().train)
            .count();
        // P(collision) = 1/100; 2000 pairs → mean 20, sd ≈ 4.4.
        assert!((5..=40).contains(&collisions), "{collisions}");
    }
}
