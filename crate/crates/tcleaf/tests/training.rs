//! Training driver behaviour that does not need many epochs.

use tcleaf::dataset::{synth_split, Split};
use tcleaf::train::{train, TrainConfig};
use tcleaf_core::config::ModelConfig;
use tcleaf_core::model::Detector;

fn short(lr: f64, seed: u64) -> TrainConfig {
    TrainConfig { lr, epochs: 1, batch_size: 2, seed, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = ModelConfig::toy();
    let (det, store) = Detector::new(&cfg, 3).unwrap();
    let data = synth_split(4, 0, Split::Train);
    let val = synth_split(2, 0, Split::Val);
    let out = train(&det, store.clone(), &data, &val, &short(0.0, 3), |_| true).unwrap();
    for ((name, before, trainable), (_, after, _)) in store.iter().zip(out.last.iter()) {
        if trainable {
            assert!(before.bit_eq(after), "{name} moved");
        }
    }
}

#[test]
fn fixed_seed_repeats_the_first_epoch_exactly() {
    let cfg = ModelConfig::toy();
    let data = synth_split(4, 1, Split::Train);
    let val = synth_split(2, 1, Split::Val);
    let run = |seed| {
        let (det, store) = Detector::new(&cfg, seed).unwrap();
        train(&det, store, &data, &val, &short(0.001, seed), |_| true).unwrap().log[0]
    };
    let (a, b) = (run(7), run(7));
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_eq!(a, b);
    assert_ne!(a.total, run(8).total);
}

#[test]
fn callback_can_stop_training() {
    let cfg = ModelConfig::toy();
    let (det, store) = Detector::new(&cfg, 0).unwrap();
    let data = synth_split(2, 2, Split::Train);
    let mut seen = 0;
    let tc = TrainConfig { epochs: 5, ..short(0.001, 0) };
    let out = train(&det, store, &data, &data, &tc, |_| {
        seen += 1;
        seen < 2
    })
    .unwrap();
    assert_eq!(out.log.len(), 2);
    assert!(out.best_epoch < 2);
}
