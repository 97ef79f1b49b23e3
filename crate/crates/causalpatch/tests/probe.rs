use causalpatch::blackbox::SmallCnn;
use causalpatch::config::RunConfig;
use causalpatch::run::{grid_for, load_experiment_data};
use causalpatch::selector::{train_selector, SelectorTrainConfig};
use std::time::Instant;

#[test]
fn probe_epoch_timing() {
    let mut cfg = RunConfig::default();
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist");
    cfg.dataset.train_images = format!("{data}/train-images-idx3-ubyte").into();
    cfg.dataset.train_labels = format!("{data}/train-labels-idx1-ubyte").into();
    cfg.dataset.test_images = format!("{data}/t10k-images-idx3-ubyte").into();
    cfg.dataset.test_labels = format!("{data}/t10k-labels-idx1-ubyte").into();
    let (train, _) = load_experiment_data(&cfg).unwrap();
    let grid = grid_for(&cfg, &train).unwrap();
    let blackbox = SmallCnn::new((1, 28, 28), 2, 3).unwrap();
    let sel_cfg = SelectorTrainConfig { epochs: 1, ..Default::default() };
    let t = Instant::now();
    let _ = train_selector(&blackbox, &train, &grid, 4, &sel_cfg).unwrap();
    eprintln!("selector epoch: {:.1}s", t.elapsed().as_secs_f64());
}
