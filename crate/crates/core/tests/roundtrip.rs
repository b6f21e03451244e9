use vtexit::baselines::{evaluate, Method};
use vtexit::gate::{GateConfig, GateWeights, StatusSelector};
use vtexit::io::{load_dataset, load_gates, save_dataset, save_gates, weights_digest, ModelCheckpoint};
use vtexit::synth::{generate_dataset, DataSpec};
use vtexit::{Matrix, Model, ModelConfig, SeededRng};

fn small() -> (ModelConfig, DataSpec) {
    let c = ModelConfig { num_layers: 4, hidden_dim: 16, num_heads: 2, ffn_dim: 32, ..ModelConfig::default() };
    (c, DataSpec { train: 20, val: 5, test: 30, ..DataSpec::default() })
}

#[test]
fn checkpoint_is_bit_exact() {
    let (c, spec) = small();
    let model = Model::random(c, 9).unwrap();
    let mut rng = SeededRng::new(4);
    let codebook = Matrix::from_vec(8, 16, (0..128).map(|_| rng.normal()).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = ModelCheckpoint { model, codebook: Some(codebook.clone()), data_spec: Some(spec), notes: serde_json::Value::Null };
    ck.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(weights_digest(&back.model), weights_digest(&ck.model));
    assert_eq!(back.codebook.unwrap().data(), codebook.data());
}

#[test]
fn saved_gates_and_data_reproduce_evaluation() {
    let (c, spec) = small();
    let model = Model::random(c, 9).unwrap();
    let mut rng = SeededRng::new(4);
    let codebook = Matrix::from_vec(8, 16, (0..128).map(|_| rng.normal()).collect()).unwrap();
    let data = generate_dataset(&spec, 7).unwrap();
    let gates = GateWeights::init(&c, GateConfig::for_model(&c, StatusSelector::default()), 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_gates(&dir.path().join("g.json"), &gates).unwrap();
    save_dataset(&dir.path().join("data"), &data).unwrap();
    let gates2 = load_gates(&dir.path().join("g.json")).unwrap();
    let data2 = load_dataset(&dir.path().join("data")).unwrap();

    let a = evaluate(&model, &codebook, &data.test, Method::Dyvte(&gates)).unwrap();
    let b = evaluate(&model, &codebook, &data2.test, Method::Dyvte(&gates2)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.flops, b.flops);
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ModelCheckpoint::load(&dir.path().join("nope")).unwrap_err().is_io());
    assert!(load_gates(&dir.path().join("nope")).unwrap_err().is_io());
    std::fs::write(dir.path().join("bad.json"), "{").unwrap();
    assert!(!load_gates(&dir.path().join("bad.json")).unwrap_err().is_io());
}
