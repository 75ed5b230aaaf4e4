//! End-to-end training behaviour on the discrete feature problem.

use aat_core::attack::{AttackConfig, Norm};
use aat_core::config::{DataSource, RunConfig};
use aat_core::data::{encode_checkpoint, CheckpointMeta, Dataset};
use aat_core::dilemma::{exact_adversarial_accuracy, exact_standard_accuracy, sample_dataset, DilemmaSpec, LinearSignClassifier};
use aat_core::eval::{accuracy, eval_per_way_adv};
use aat_core::model::{ThreeWayModel, Way};
use aat_core::training::{train, LossConfig, TrainConfig};
use aat_core::Error;

fn dilemma_run() -> (RunConfig, DilemmaSpec, Dataset, Dataset) {
    let cfg = RunConfig::preset("dilemma-default").unwrap();
    let DataSource::Dilemma { spec, train, test, seed } = cfg.data.clone() else {
        panic!("dilemma preset has dilemma data")
    };
    let tr = sample_dataset(&spec, train, seed).unwrap().to_dataset("train").unwrap();
    let te = sample_dataset(&spec, test, seed + 1).unwrap().to_dataset("test").unwrap();
    (cfg, spec, tr, te)
}

fn fit(cfg: &TrainConfig, model: &RunConfig, data: &Dataset) -> ThreeWayModel<f32> {
    let mut m = ThreeWayModel::<f32>::init(&model.model, cfg.seed).unwrap();
    train(&mut m, data, None, cfg, &mut std::io::sink()).unwrap();
    m
}

fn small(data: &Dataset, n: usize) -> Dataset {
    data.select(&(0..n).collect::<Vec<_>>())
}

#[test]
fn zero_epochs_leave_the_model_bit_identical() {
    let (run, _, tr, _) = dilemma_run();
    let mut cfg = run.train.clone();
    cfg.epochs = 0;
    let trained = fit(&cfg, &run, &tr);
    assert!(trained.bit_eq(&ThreeWayModel::init(&run.model, cfg.seed).unwrap()));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (run, _, tr, _) = dilemma_run();
    let mut cfg = run.train.clone();
    cfg.lr = 0.0;
    cfg.epochs = 2;
    let trained = fit(&cfg, &run, &small(&tr, 1000));
    assert!(trained.bit_eq(&ThreeWayModel::init(&run.model, cfg.seed).unwrap()));
}

#[test]
fn seeded_runs_give_byte_identical_checkpoints() {
    let (run, _, tr, _) = dilemma_run();
    let mut cfg = run.train.clone();
    cfg.epochs = 2;
    let data = small(&tr, 1500);
    let meta = CheckpointMeta { spec: run.model.clone(), config_hash: run.hash(), epoch: cfg.epochs, seed: cfg.seed };
    let a = encode_checkpoint(&fit(&cfg, &run, &data), &meta).unwrap();
    let b = encode_checkpoint(&fit(&cfg, &run, &data), &meta).unwrap();
    assert_eq!(a, b);
    cfg.seed = 1;
    assert_ne!(encode_checkpoint(&fit(&cfg, &run, &data), &meta).unwrap(), a);
}

#[test]
fn diverging_run_names_the_term() {
    let (run, _, tr, _) = dilemma_run();
    let mut cfg = run.train.clone();
    cfg.lr = 1e6;
    cfg.epochs = 3;
    cfg.loss = LossConfig::st_only();
    let mut m = ThreeWayModel::<f32>::init(&run.model, 0).unwrap();
    match train(&mut m, &small(&tr, 2000), None, &cfg, &mut std::io::sink()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("'st'") && msg.contains("epoch"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn epoch_log_is_one_json_line_per_epoch() {
    let (run, _, tr, _) = dilemma_run();
    let mut cfg = run.train.clone();
    cfg.epochs = 2;
    let mut m = ThreeWayModel::<f32>::init(&run.model, 0).unwrap();
    let mut sink = Vec::new();
    let logs = train(&mut m, &small(&tr, 500), None, &cfg, &mut sink).unwrap();
    let text = String::from_utf8(sink).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, log) in lines.iter().zip(&logs) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], log.epoch);
        assert!(v["loss"]["as"].is_number() && v["clean"]["robust"].is_number());
    }
}

/// Standard training reaches the Bayes-optimal majority vote.
#[test]
fn standard_way_approaches_the_majority_vote_oracle() {
    let (run, spec, tr, te) = dilemma_run();
    let mut cfg = run.train.clone();
    cfg.loss = LossConfig::st_only();
    let m = fit(&cfg, &run, &tr);
    let oracle = 100.0 * exact_standard_accuracy(&spec, &LinearSignClassifier::h0(&spec)).unwrap();
    let got = accuracy(&m, &te, Way::Standard).unwrap();
    assert!((got - oracle).abs() <= 3.0, "standard way {got:.2} vs oracle {oracle:.4}");
}

/// Adversarial training of the robust way approaches the best robust
/// classifier's accuracy under the same budget.
#[test]
fn robust_way_approaches_the_robust_oracle() {
    let (run, spec, tr, te) = dilemma_run();
    let m = fit(&run.train, &run, &tr);
    let h1 = LinearSignClassifier::h1(&spec);
    let oracle = 100.0 * exact_adversarial_accuracy(&spec, &h1).unwrap();
    let mut attack = AttackConfig::new(Norm::Linf, spec.epsilon, spec.epsilon / 4.0, 10);
    attack.clamp = None;
    let adv = eval_per_way_adv(&m, &te, &attack).unwrap();
    assert!((adv.robust - oracle).abs() <= 5.0, "robust way under attack {:.2} vs oracle {oracle:.4}", adv.robust);
}
