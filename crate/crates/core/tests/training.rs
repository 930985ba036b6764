use std::collections::BTreeSet;

use eptlab_core::autodiff::Graph;
use eptlab_core::fewshot::metrics::summarize;
use eptlab_core::fewshot::*;
use eptlab_core::params::Bound;
use eptlab_core::peft::*;
use eptlab_core::vit::BackboneConfig;
use eptlab_core::{Error, Tensor};

fn cfg() -> BackboneConfig {
    BackboneConfig::default()
}

fn colon() -> Dataset {
    synth_dataset(&SynthSpec::toy_colon(), 3).unwrap()
}

/// CLS feature of the first sample under `model`.
fn cls(model: &Model, image: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &model.params, &BTreeSet::new());
    let o = model.forward(&mut g, &b, image, false).unwrap();
    g.value(o.cls).clone()
}

fn all_methods() -> Vec<PeftMethod> {
    let mut v: Vec<PeftMethod> = EmbeddingWay::ALL
        .iter()
        .map(|&w| {
            PeftMethod::Ept(EptConfig {
                embedding_way: w,
                ..EptConfig::default()
            })
        })
        .collect();
    v.extend([
        PeftMethod::Vpt(VptConfig {
            mode: PromptMode::Shallow,
            ..VptConfig::default()
        }),
        PeftMethod::Vpt(VptConfig::default()),
        PeftMethod::Vp(VpConfig::default()),
        PeftMethod::Lora(LoraConfig::default()),
        PeftMethod::Adapter(AdapterConfig::default()),
        PeftMethod::Bias,
        PeftMethod::Linear,
        PeftMethod::Partial1,
        PeftMethod::Mlp3,
        PeftMethod::Full,
    ]);
    v
}

#[test]
fn zero_initialised_injections_leave_the_backbone_bit_identical() {
    let backbone = pretrained_backbone(&cfg(), 1).unwrap();
    let frozen = Model::new(&cfg(), &PeftMethod::Linear, &backbone, 2).unwrap();
    let data = colon();
    for method in [PeftMethod::Lora(LoraConfig::default()), PeftMethod::Adapter(AdapterConfig::default())] {
        let tuned = Model::new(&cfg(), &method, &backbone, 2).unwrap();
        for s in data.samples.iter().take(5) {
            assert!(cls(&frozen, &s.image).bit_eq(&cls(&tuned, &s.image)), "{}", method.tag());
        }
    }
}

#[test]
fn empty_and_vanishing_prompts_match_the_backbone() {
    let backbone = pretrained_backbone(&cfg(), 1).unwrap();
    let frozen = Model::new(&cfg(), &PeftMethod::Linear, &backbone, 2).unwrap();
    let data = colon();
    let vpt = Model::new(
        &cfg(),
        &PeftMethod::Vpt(VptConfig {
            prompt_length: 0,
            ..VptConfig::default()
        }),
        &backbone,
        2,
    )
    .unwrap();
    for way in [EmbeddingWay::PureCat, EmbeddingWay::MultiCat] {
        let mut ept = Model::new(
            &cfg(),
            &PeftMethod::Ept(EptConfig {
                embedding_way: way,
                ..EptConfig::default()
            }),
            &backbone,
            2,
        )
        .unwrap();
        for name in ept.params.names().filter(|n| n.starts_with("prompts.")).map(String::from).collect::<Vec<_>>() {
            let t = ept.params.get_mut(&name).unwrap();
            *t = Tensor::full(t.shape(), -1e9);
        }
        for s in data.samples.iter().take(5) {
            let base = cls(&frozen, &s.image);
            assert!(base.max_abs_diff(&cls(&ept, &s.image)) < 1e-9);
            assert!(base.max_abs_diff(&cls(&vpt, &s.image)) < 1e-9);
        }
    }
}

#[test]
fn only_masked_parameters_move() {
    let data = colon();
    let episode = sample_episode(&data, 2, 4).unwrap();
    let train_cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let backbone = pretrained_backbone(&cfg(), 1).unwrap();
    for method in all_methods() {
        let mut model = Model::new(&cfg(), &method, &backbone, 5).unwrap();
        let before = model.params.clone();
        train(&mut model, &data, &episode, &train_cfg, 6).unwrap();
        let changed = before.changed_names(&model.params);
        for name in &changed {
            assert!(model.trainable.contains(name), "{}: frozen `{name}` moved", method.tag());
        }
        assert!(!changed.is_empty(), "{}: nothing trained", method.tag());
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = colon();
    let episode = sample_episode(&data, 2, 4).unwrap();
    let mut model = Model::random(&cfg(), &PeftMethod::Ept(EptConfig::default()), 1).unwrap();
    let before = model.params.clone();
    let cfg0 = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &episode, &cfg0, 1).unwrap();
    assert!(before.changed_names(&model.params).is_empty());
}

#[test]
fn divergence_names_the_epoch() {
    let data = colon();
    let episode = sample_episode(&data, 4, 4).unwrap();
    let mut model = Model::random(&cfg(), &PeftMethod::Full, 1).unwrap();
    let wild = TrainConfig {
        learning_rate: 1e200,
        optimizer: OptimizerKind::Sgd,
        epochs: 3,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &data, &episode, &wild, 1).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 0..=2, .. }), "{err}");
}

#[test]
fn empty_mask_is_refused() {
    let data = colon();
    let episode = sample_episode(&data, 1, 4).unwrap();
    let mut model = Model::random(&cfg(), &PeftMethod::Linear, 1).unwrap();
    model.trainable.clear();
    assert!(matches!(
        train(&mut model, &data, &episode, &TrainConfig::default(), 1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn ept_loss_falls_over_the_first_epochs() {
    let data = colon();
    let episode = sample_episode(&data, 10, 8).unwrap();
    let mut model = Model::random(&cfg(), &PeftMethod::Ept(EptConfig::default()), 8).unwrap();
    let r = train(&mut model, &data, &episode, &TrainConfig::default(), 8).unwrap();
    assert_eq!(r.epoch_losses.len(), 20);
    for w in r.epoch_losses[..5].windows(2) {
        assert!(w[1] < w[0], "{:?}", r.epoch_losses);
    }
}

#[test]
fn multi_label_evaluation_reports_map() {
    let spec = SynthSpec {
        samples_per_class: 6,
        ..SynthSpec::toy_endo()
    };
    let data = synth_dataset(&spec, 2).unwrap();
    let backbone_cfg = BackboneConfig {
        num_classes: 4,
        ..cfg()
    };
    let backbone = pretrained_backbone(&backbone_cfg, 1).unwrap();
    let quick = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = run_cell(&backbone_cfg, &backbone, &PeftMethod::Linear, &data, 1, &quick, 3, 0, 0).unwrap();
    assert_eq!(out.record.metric_name, "mAP");
    assert!((0.0..=1.0).contains(&out.record.metric));
    assert!(out.record.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn multi_run_summary_recomputes_from_records() {
    let data = colon();
    let quick = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let backbone = pretrained_backbone(&cfg(), 1).unwrap();
    let r = multi_run(&cfg(), &backbone, &PeftMethod::Linear, &data, 2, 2, 2, &quick, 9).unwrap();
    assert_eq!(r.records.len(), 4);
    let again = summarize(&r.records.iter().map(|x| x.metric).collect::<Vec<_>>()).unwrap();
    assert_eq!(again, r.summary);
    let one = multi_run(&cfg(), &backbone, &PeftMethod::Linear, &data, 2, 1, 1, &quick, 9).unwrap();
    assert_eq!(one.summary.variance, 0.0);
    assert_eq!(one.records[0], r.records[0]);
    let twice = multi_run(&cfg(), &backbone, &PeftMethod::Linear, &data, 2, 2, 2, &quick, 9).unwrap();
    assert_eq!(twice, r);
}

#[test]
fn no_margin_means_chance_accuracy() {
    let spec = SynthSpec {
        margin: 0.0,
        samples_per_class: 150,
        ..SynthSpec::toy_colon()
    };
    let data = synth_dataset(&spec, 5).unwrap();
    let backbone = pretrained_backbone(&cfg(), 1).unwrap();
    let quick = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let r = multi_run(&cfg(), &backbone, &PeftMethod::Linear, &data, 5, 3, 1, &quick, 5).unwrap();
    assert!((r.summary.mean - 0.5).abs() <= 0.05, "{:?}", r.summary);
}

/// Logistic regression on raw pixels separates a task whose blobs dwarf the
/// noise.
#[test]
fn raw_pixel_probe_separates_a_wide_margin_task() {
    use eptlab_core::fewshot::train::Adam;
    use eptlab_core::params::ParamStore;
    let spec = SynthSpec {
        margin: 1e3,
        samples_per_class: 10,
        ..SynthSpec::toy_colon()
    };
    let data = synth_dataset(&spec, 6).unwrap();
    let pixels = 16 * 16;
    let mut params = ParamStore::new();
    params.insert("w", Tensor::zeros(&[2, pixels]));
    params.insert("b", Tensor::zeros(&[2, 1]));
    let trainable: BTreeSet<String> = ["w".to_string(), "b".to_string()].into();
    let cols: Vec<f64> = (0..pixels)
        .flat_map(|p| data.samples.iter().map(move |s| s.image.data()[p] / 1e3))
        .collect();
    let x = Tensor::new(vec![pixels, data.len()], cols).unwrap();
    let targets: Vec<usize> = data.samples.iter().map(|s| s.primary).collect();
    let mut adam = Adam::new(0.1);
    let mut correct = 0;
    for _ in 0..100 {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &params, &trainable);
        let xv = g.constant(x.clone());
        let z = g.matmul(b.get("w").unwrap(), xv).unwrap();
        let z = g.add_column(z, b.get("b").unwrap()).unwrap();
        let scores = g.value(z).clone();
        correct = (0..data.len())
            .filter(|&j| (scores.get(1, j) > scores.get(0, j)) == (targets[j] == 1))
            .count();
        let loss = g.cross_entropy(z, &targets).unwrap();
        adam.update(&mut params, &g.backward(loss).unwrap().into_named()).unwrap();
    }
    assert_eq!(correct, data.len());
}
