use aqs_tensor::{OptimizerState, Tensor};
use aqsnet::data::{generate_scenes, make_batch, SceneConfig, SqaTriplet};
use aqsnet::train::{train, train_step, TrainConfig};
use aqsnet::{AqsError, AqsNet, ModelConfig};

fn scenes(n: usize) -> Vec<SqaTriplet> {
    generate_scenes(&SceneConfig::default(), 0, n).unwrap()
}

fn short_run() -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() }
}

#[test]
fn one_epoch_lowers_the_training_loss() {
    let data = scenes(8);
    let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
    let log = train(&mut net, &data, &short_run(), |_| {}).unwrap();
    assert_eq!(log.epochs.len(), 1);
    assert_eq!(log.epochs[0].steps, 4);
    assert!(log.final_loss < log.initial_loss, "{} -> {}", log.initial_loss, log.final_loss);
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = scenes(4);
    let cfg = TrainConfig { epochs: 2, ..short_run() };
    let run = || {
        let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
        let log = train(&mut net, &data, &cfg, |_| {}).unwrap();
        (serde_json::to_string(&log).unwrap(), net.store.digest(""))
    };
    assert_eq!(run(), run());
}

#[test]
fn optimizer_steps_leave_the_frozen_encoder_untouched() {
    let data = scenes(4);
    let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
    let (vit, resnet) = (net.store.digest("vit."), net.store.digest("resnet."));
    let items: Vec<&SqaTriplet> = data.iter().collect();
    let batch = make_batch(&items).unwrap();
    let cfg = TrainConfig::default();
    let mut opt = OptimizerState::new(cfg.adam(), &net.store);
    for step in 0..5 {
        let l = train_step(&mut net, &mut opt, &batch, &cfg.loss, step).unwrap();
        assert!(l.total > 0.0);
    }
    assert_eq!(net.store.digest("vit."), vit);
    assert_ne!(net.store.digest("resnet."), resnet);
}

#[test]
fn overflowing_weights_abort_naming_the_first_bad_op() {
    let data = scenes(2);
    let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
    let id = net.store.id("resnet.stem.conv.weight").unwrap();
    let dims = net.store.value(id).dims().to_vec();
    net.store.set(id, Tensor::full(dims, 3e38)).unwrap();
    let err = train(&mut net, &data, &short_run(), |_| {}).unwrap_err();
    match err {
        AqsError::NonFiniteLoss { op, step, .. } => assert_eq!((op, step), ("conv2d", 0)),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn non_finite_initial_loss_is_reported_at_its_source() {
    let data = scenes(2);
    let items: Vec<&SqaTriplet> = data.iter().collect();
    let batch = make_batch(&items).unwrap();
    let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
    let id = net.store.id("aqsd.head.classifier.bias").unwrap();
    net.store.set(id, Tensor::new(vec![3], vec![f32::NAN, 0.0, 0.0]).unwrap()).unwrap();
    let mut opt = OptimizerState::new(TrainConfig::default().adam(), &net.store);
    let err = train_step(&mut net, &mut opt, &batch, &Default::default(), 7).unwrap_err();
    assert!(matches!(err, AqsError::NonFiniteLoss { step: 7, .. }), "{err}");
    assert!(err.to_string().contains("step 7"));
}

#[test]
fn saved_weights_reload_to_identical_predictions() {
    let data = scenes(2);
    let cfg = ModelConfig::compact();
    let mut net = AqsNet::new(&cfg).unwrap();
    train(&mut net, &data, &short_run(), |_| {}).unwrap();
    let mut bytes = Vec::new();
    net.save(&mut bytes).unwrap();
    let back = AqsNet::load(&cfg, bytes.as_slice()).unwrap();
    assert_eq!(back.store.digest(""), net.store.digest(""));
    let items: Vec<&SqaTriplet> = data.iter().collect();
    let batch = make_batch::<f32>(&items).unwrap();
    assert_eq!(back.predict(&batch.image, &batch.mask).unwrap(), net.predict(&batch.image, &batch.mask).unwrap());
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let mut bytes = Vec::new();
    AqsNet::<f32>::new(&ModelConfig::compact()).unwrap().save(&mut bytes).unwrap();
    assert!(AqsNet::load(&ModelConfig::default(), bytes.as_slice()).is_err());
}

#[test]
fn invalid_training_config_is_rejected() {
    assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"epochs": 3, "bogus": 1}"#).is_err());
    assert_eq!(TrainConfig::from_json(r#"{"epochs": 3}"#).unwrap().epochs, 3);
}
