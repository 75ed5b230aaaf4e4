//! Trains one MNIST desk preset on the bundled data and prints the report.
//!
//! cargo run --release -p aat-core --example train_desk -- [preset] [epochs]

use std::path::PathBuf;
use std::time::Instant;

use aat_core::config::RunConfig;
use aat_core::data::load_mnist_split;
use aat_core::eval::full_report;
use aat_core::model::ThreeWayModel;
use aat_core::training::train;

fn main() -> aat_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let preset = args.get(1).map_or("mnist-aat++-desk", String::as_str);
    let mut cfg = RunConfig::preset(preset)?;
    if let Some(e) = args.get(2) {
        cfg.train.epochs = e.parse().expect("epoch count");
    }
    if let Some(lr) = args.get(3) {
        cfg.train.lr = lr.parse().expect("learning rate");
    }
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk");
    let train_set = load_mnist_split(&dir, "train")?;
    let test_set = load_mnist_split(&dir, "t10k")?;
    let mut model = ThreeWayModel::<f32>::init(&cfg.model, cfg.train.seed)?;
    let t = Instant::now();
    train(&mut model, &train_set, Some(&test_set), &cfg.train, &mut std::io::stdout())?;
    eprintln!("trained in {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let report = full_report(&model, &test_set, &cfg.attack_test, Some(cfg.eval.mixture_seed))?;
    print!("{}", report.to_table());
    eprintln!("evaluated in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
