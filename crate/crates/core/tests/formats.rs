use eptlab_core::fewshot::{synth_dataset, SynthSpec, TaskType};
use eptlab_core::io::*;
use eptlab_core::peft::{EptConfig, Model, PeftMethod};
use eptlab_core::vit::BackboneConfig;
use eptlab_core::Error;

#[test]
fn dataset_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (spec, task) in [(SynthSpec::toy_colon(), TaskType::SingleLabel), (SynthSpec::toy_endo(), TaskType::MultiLabel)] {
        let d = synth_dataset(&spec, 4).unwrap();
        let sub = dir.path().join(format!("{task:?}"));
        let manifest = write_dataset(&sub, &d).unwrap();
        let back = read_dataset(&manifest, Some(task)).unwrap();
        assert_eq!(back.num_classes, d.num_classes);
        assert_eq!(back.task_type, d.task_type);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!((a.id, &a.labels), (b.id, &b.labels));
            assert!(a.image.bit_eq(&b.image));
            // The manifest carries no stratification class; the first positive stands in.
            assert_eq!(a.primary, b.labels.iter().position(|&l| l == 1).unwrap());
        }
        if task == TaskType::SingleLabel {
            assert_eq!(back, d);
        }
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.starts_with("sample_id,label_vector,path\n"));
    }
    let manifest = dir.path().join("SingleLabel/manifest.csv");
    assert_eq!(read_dataset(&manifest, None).unwrap().task_type, TaskType::SingleLabel);
}

#[test]
fn manifest_errors_are_ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.csv");
    std::fs::write(&m, "sample_id,label_vector,path\n0,1;2,x.bin\n").unwrap();
    assert!(matches!(read_dataset(&m, None), Err(Error::Ingestion(_))));
    std::fs::write(&m, "sample_id,label_vector,path\n0,0;1,missing.bin\n").unwrap();
    assert!(matches!(read_dataset(&m, None), Err(Error::Ingestion(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::random(&BackboneConfig::default(), &PeftMethod::Ept(EptConfig::default()), 3).unwrap();
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Load(_))));
}

#[test]
fn atomic_write_leaves_no_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a/b/out.json");
    write_stable_json(&p, &serde_json::json!({"b": 1.5, "a": [1, 2]})).unwrap();
    let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("out.json")]);
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "{\n  \"a\": [\n    1,\n    2\n  ],\n  \"b\": 1.5000000000000000e0\n}\n");
}
