//! The invariant suite behind `eptlab verify`. Every check runs on generated
//! inputs only.

use std::collections::BTreeSet;

use eptlab_core::calibration::{lemma1_randomized, limit_sweep, prop1_factor, prop1_sweep, scaling_sweep_with};
use eptlab_core::fewshot::{method_gradcheck, sample_episode, synth_dataset, infer, train, SynthSpec, TrainConfig};
use eptlab_core::peft::{
    count_prompt_params, embedding_way_transform, pretrained_backbone, prompted_softmax, AdapterConfig,
    EmbeddedPrompt, EmbeddingWay, EptConfig, LoraConfig, Model, PeftMethod, PromptMode, VpConfig, VptConfig,
    PROMPT_PREFIX,
};
use eptlab_core::vit::BackboneConfig;
use eptlab_core::{Result, Tensor};

pub const PROPORTIONALITY_TOL: f64 = 1e-12;
pub const LIMIT_TOL: f64 = 1e-9;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const PROP1_TOL: f64 = 1e-12;
pub const LEMMA1_SLACK: f64 = -1e-9;
pub const ZERO_IMPACT_TOL: f64 = 1e-9;
pub const RATIO_RANGE: (f64, f64) = (3.8, 4.0);

pub const SCALING_INSTANCES: usize = 1000;
pub const LIMIT_INSTANCES: usize = 100;
pub const PROP1_POINTS: usize = 100;
pub const LEMMA1_TRIALS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst value of the checked quantity, compared against `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} worst {:>10.3e}  tol {:>8.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.detail
        )
    }
}

/// Deliberate bugs for mutation testing the suite itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Prompt mass enters the softmax normaliser with the wrong sign.
    SoftmaxSign,
}

/// Prompted softmax whose normaliser subtracts the prompt mass.
fn sign_flipped_prompted_softmax(ktq: &Tensor, p: &EmbeddedPrompt) -> Result<Tensor> {
    let m = embedding_way_transform(ktq, p)?;
    let (rows, cols) = m.dims2()?;
    let d_p = p.rows();
    let mut out = vec![0.0; (rows - d_p) * cols];
    for j in 0..cols {
        let max = (0..rows).map(|i| m.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let prompt: f64 = (0..d_p).map(|i| (m.get(i, j) - max).exp()).sum();
        let kept: f64 = (d_p..rows).map(|i| (m.get(i, j) - max).exp()).sum();
        for i in d_p..rows {
            out[(i - d_p) * cols + j] = (m.get(i, j) - max).exp() / (kept - prompt);
        }
    }
    Tensor::new(vec![rows - d_p, cols], out)
}

pub fn proportionality(seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
    let s = match fault {
        Some(Fault::SoftmaxSign) => scaling_sweep_with(seed, SCALING_INSTANCES, sign_flipped_prompted_softmax)?,
        None => scaling_sweep_with(seed, SCALING_INSTANCES, prompted_softmax)?,
    };
    let worst = s.max_proportional_deviation.max(s.max_l1_gap).max(s.max_l2_gap);
    Ok(CheckOutcome {
        name: "proportionality".into(),
        passed: worst < PROPORTIONALITY_TOL && s.factors_inside_unit_interval(),
        worst,
        tolerance: PROPORTIONALITY_TOL,
        detail: format!(
            "{} instances, column gap {:.3e}, l1 gap {:.3e}, l2 gap {:.3e}, c in [{:.4}, {:.4}]",
            s.instances, s.max_proportional_deviation, s.max_l1_gap, s.max_l2_gap, s.min_factor, s.max_factor
        ),
    })
}

pub fn limit(seed: u64) -> Result<CheckOutcome> {
    let worst = limit_sweep(seed, LIMIT_INSTANCES, -1e9)?;
    Ok(CheckOutcome {
        name: "limit".into(),
        passed: worst < LIMIT_TOL,
        worst,
        tolerance: LIMIT_TOL,
        detail: format!("{LIMIT_INSTANCES} instances at prompt -1e9"),
    })
}

/// Every tuning method under its default hyperparameters, EPT once per way.
pub fn gradient_methods() -> Vec<(String, PeftMethod)> {
    let mut v: Vec<(String, PeftMethod)> = EmbeddingWay::ALL
        .iter()
        .map(|&w| {
            (
                format!("ept-{}", w.as_str()),
                PeftMethod::Ept(EptConfig {
                    embedding_way: w,
                    ..EptConfig::default()
                }),
            )
        })
        .collect();
    v.push((
        "vpt-shallow".into(),
        PeftMethod::Vpt(VptConfig {
            mode: PromptMode::Shallow,
            ..VptConfig::default()
        }),
    ));
    v.push(("vpt-deep".into(), PeftMethod::Vpt(VptConfig::default())));
    v.push(("vp".into(), PeftMethod::Vp(VpConfig::default())));
    v.push(("lora".into(), PeftMethod::Lora(LoraConfig::default())));
    v.push(("adapter".into(), PeftMethod::Adapter(AdapterConfig::default())));
    for m in [PeftMethod::Bias, PeftMethod::Linear, PeftMethod::Partial1, PeftMethod::Mlp3, PeftMethod::Full] {
        v.push((m.tag().to_lowercase(), m));
    }
    v
}

pub fn gradient(label: &str, method: &PeftMethod, seed: u64) -> Result<CheckOutcome> {
    let g = method_gradcheck(&BackboneConfig::default(), method, seed, GRAD_STEP)?;
    let r = &g.report;
    let at = r
        .worst
        .as_ref()
        .map(|(n, i)| format!("{n}[{i}]"))
        .unwrap_or_else(|| "-".into());
    Ok(CheckOutcome {
        name: format!("gradient/{label}"),
        passed: r.passes(GRAD_TOL),
        worst: r.max_rel_error,
        tolerance: GRAD_TOL,
        detail: format!("{} scalars, worst at {at}, base point {}", r.checked, g.attempts),
    })
}

pub fn prop1(seed: u64) -> Result<CheckOutcome> {
    let s = prop1_sweep(1.0, seed, PROP1_POINTS)?;
    let e = std::f64::consts::E;
    let spot0 = (prop1_factor(0.0, 1.0) - 2.0 / 3.0).abs();
    let spot1 = (prop1_factor(1.0, 1.0) - (1.0 + e) / (1.0 + 2.0 * e)).abs();
    let worst = s.max_ratio_deviation.max(spot0).max(spot1);
    Ok(CheckOutcome {
        name: "prop1".into(),
        passed: s.strictly_decreasing && worst < PROP1_TOL,
        worst,
        tolerance: PROP1_TOL,
        detail: format!(
            "{} grid points, min decrease {:.3e}, {} random points, c(1) = {:.6}",
            s.grid_points,
            s.min_decrease,
            s.random_points,
            prop1_factor(1.0, 1.0)
        ),
    })
}

/// Trace form `tr(Σ') ≤ c_k² tr(Σ)`. The worst value is the negated margin.
pub fn lemma1_trace(seed: u64) -> Result<CheckOutcome> {
    let t = lemma1_randomized(seed, LEMMA1_TRIALS)?;
    Ok(CheckOutcome {
        name: "lemma1-trace".into(),
        passed: t.trace_holds() && t.worst_trace_margin >= LEMMA1_SLACK,
        worst: -t.worst_trace_margin,
        tolerance: -LEMMA1_SLACK,
        detail: format!("{} trials, {} failures", t.trials, t.trace_failures),
    })
}

/// Per-sample form `‖c_i x_i - c_k x̄_k‖ ≤ c_k ‖x_i - x̄_k‖`.
pub fn lemma1_per_sample(seed: u64) -> Result<CheckOutcome> {
    let t = lemma1_randomized(seed, LEMMA1_TRIALS)?;
    Ok(CheckOutcome {
        name: "lemma1-per-sample".into(),
        passed: t.per_sample_holds() && t.worst_per_sample_margin >= LEMMA1_SLACK,
        worst: -t.worst_per_sample_margin,
        tolerance: -LEMMA1_SLACK,
        detail: format!(
            "{} trials, {} failures, first at trial {}",
            t.trials,
            t.per_sample_failures,
            t.first_per_sample_failure.map_or("-".into(), |i| i.to_string())
        ),
    })
}

/// ViT-Base geometry with a single attention head, so one EPT prompt spans a
/// whole layer.
pub fn vit_base() -> BackboneConfig {
    BackboneConfig {
        image_side: 224,
        patch_side: 16,
        channels: 3,
        embed_dim: 768,
        num_layers: 12,
        num_heads: 1,
        mlp_hidden_dim: 3072,
        num_classes: 2,
        layer_norm: true,
        output_projection: false,
    }
}

pub struct ParamRatio {
    pub vpt: usize,
    pub ept: usize,
    pub ratio: f64,
}

pub fn param_ratio_counts() -> Result<ParamRatio> {
    let cfg = vit_base();
    let vpt = count_prompt_params(
        &cfg,
        &PeftMethod::Vpt(VptConfig {
            prompt_length: 1,
            mode: PromptMode::Shallow,
            prompt_grad: true,
        }),
    )?;
    let ept = count_prompt_params(
        &cfg,
        &PeftMethod::Ept(EptConfig {
            prompt_length: 1,
            mode: PromptMode::Shallow,
            ..EptConfig::default()
        }),
    )?;
    Ok(ParamRatio {
        vpt,
        ept,
        ratio: vpt as f64 / ept as f64,
    })
}

/// The worst value is the distance of the ratio outside the allowed range.
pub fn param_ratio() -> Result<CheckOutcome> {
    let r = param_ratio_counts()?;
    let (lo, hi) = RATIO_RANGE;
    let outside = (lo - r.ratio).max(r.ratio - hi).max(0.0);
    Ok(CheckOutcome {
        name: "param-ratio".into(),
        passed: r.vpt == 768 && r.ept == 197 && outside == 0.0,
        worst: outside,
        tolerance: 0.0,
        detail: format!("VPT {} vs EPT {} per layer, ratio {:.4}", r.vpt, r.ept, r.ratio),
    })
}

fn cls_features(model: &Model, data: &eptlab_core::fewshot::Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    Ok(infer(model, data, indices, false)?.features)
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut bit_equal = true;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y) {
            worst = worst.max((u - v).abs());
            bit_equal &= u.to_bits() == v.to_bits();
        }
    }
    (worst, bit_equal)
}

/// LoRA and Adapter at init must be bit-identical to the frozen backbone;
/// an empty VPT prompt and EPT prompts at -1e9 must agree within tolerance.
pub fn zero_impact(seed: u64) -> Result<CheckOutcome> {
    let cfg = BackboneConfig::default();
    let backbone = pretrained_backbone(&cfg, seed)?;
    let data = synth_dataset(&SynthSpec::toy_colon(), seed)?;
    let idx: Vec<usize> = (0..data.len()).step_by(10).collect();
    let base = cls_features(&Model::new(&cfg, &PeftMethod::Linear, &backbone, seed)?, &data, &idx)?;

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for m in [PeftMethod::Lora(LoraConfig::default()), PeftMethod::Adapter(AdapterConfig::default())] {
        let f = cls_features(&Model::new(&cfg, &m, &backbone, seed)?, &data, &idx)?;
        let (gap, bits) = max_gap(&base, &f);
        worst = worst.max(gap);
        if !bits {
            failures.push(m.tag().to_string());
        }
    }
    let mut near = vec![(
        "VPT".to_string(),
        Model::new(
            &cfg,
            &PeftMethod::Vpt(VptConfig {
                prompt_length: 0,
                ..VptConfig::default()
            }),
            &backbone,
            seed,
        )?,
    )];
    for way in [EmbeddingWay::PureCat, EmbeddingWay::MultiCat] {
        let method = PeftMethod::Ept(EptConfig {
            embedding_way: way,
            ..EptConfig::default()
        });
        let mut m = Model::new(&cfg, &method, &backbone, seed)?;
        let names: Vec<String> = m.params.names().filter(|n| n.starts_with(PROMPT_PREFIX)).map(String::from).collect();
        for name in names {
            let t = m.params.get_mut(&name)?;
            *t = Tensor::full(t.shape(), -1e9);
        }
        near.push((format!("EPT-{}", way.as_str()), m));
    }
    for (label, m) in &near {
        let (gap, _) = max_gap(&base, &cls_features(m, &data, &idx)?);
        worst = worst.max(gap);
        if gap >= ZERO_IMPACT_TOL {
            failures.push(label.clone());
        }
    }
    Ok(CheckOutcome {
        name: "zero-impact".into(),
        passed: failures.is_empty(),
        worst,
        tolerance: ZERO_IMPACT_TOL,
        detail: if failures.is_empty() {
            format!("LoRA, Adapter bit-identical; VPT, EPT on {} samples", idx.len())
        } else {
            format!("deviating: {}", failures.join(", "))
        },
    })
}

/// Names of parameters outside the trainable mask that `train` changed.
pub fn freeze_violations(method: &PeftMethod, seed: u64) -> Result<(Vec<String>, usize)> {
    let cfg = BackboneConfig::default();
    let backbone = pretrained_backbone(&cfg, seed)?;
    let data = synth_dataset(&SynthSpec::toy_colon(), seed)?;
    let episode = sample_episode(&data, 2, seed)?;
    let mut model = Model::new(&cfg, method, &backbone, seed)?;
    let before = model.params.clone();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &episode, &tc, seed)?;
    let changed: BTreeSet<String> = before.changed_names(&model.params).into_iter().collect();
    let violations = changed.difference(&model.trainable).cloned().collect();
    Ok((violations, changed.len()))
}

pub fn freeze(seed: u64) -> Result<CheckOutcome> {
    let mut bad = Vec::new();
    let methods = gradient_methods();
    for (label, m) in &methods {
        let (v, _) = freeze_violations(m, seed)?;
        if !v.is_empty() {
            bad.push(format!("{label}: {}", v.join(" ")));
        }
    }
    Ok(CheckOutcome {
        name: "freeze".into(),
        passed: bad.is_empty(),
        worst: bad.len() as f64,
        tolerance: 0.0,
        detail: if bad.is_empty() {
            format!("{} methods, frozen tensors bit-identical", methods.len())
        } else {
            bad.join("; ")
        },
    })
}

/// One entry of the suite, runnable on its own.
pub struct Check {
    pub name: String,
    run: Box<dyn Fn(u64, Option<Fault>) -> Result<CheckOutcome>>,
}

impl Check {
    fn new(name: impl Into<String>, run: impl Fn(u64, Option<Fault>) -> Result<CheckOutcome> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }

    pub fn run(&self, seed: u64, fault: Option<Fault>) -> Result<CheckOutcome> {
        (self.run)(seed, fault)
    }

    /// `filter` matches the full name or a group prefix such as `gradient`.
    pub fn selected_by(&self, filter: &str) -> bool {
        self.name == filter || self.name.strip_prefix(filter).is_some_and(|r| r.starts_with('/'))
    }
}

/// Asserted checks in run order.
pub fn suite() -> Vec<Check> {
    let mut v = vec![
        Check::new("proportionality", proportionality),
        Check::new("limit", |s, _| limit(s)),
        Check::new("prop1", |s, _| prop1(s)),
        Check::new("lemma1-trace", |s, _| lemma1_trace(s)),
        Check::new("param-ratio", |_, _| param_ratio()),
        Check::new("zero-impact", |s, _| zero_impact(s)),
    ];
    for (label, m) in gradient_methods() {
        v.push(Check::new(format!("gradient/{label}"), move |s, _| gradient(&label, &m, s)));
    }
    v.push(Check::new("freeze", |s, _| freeze(s)));
    v
}
