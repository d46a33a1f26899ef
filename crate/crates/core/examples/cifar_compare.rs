//! StandardCNN against StandardCNN+QIM on a CIFAR-10 subset, over several
//! seeds.
//!
//! ```text
//! cargo run --release --example cifar_compare -- [train_n] [test_n] [epochs] [seeds]
//! ```
//! Expects `data/cifar-10-batches-bin/` (see `scripts/fetch_data.sh`).

use std::path::PathBuf;

use qim::data::load_cifar10;
use qim::models::{build_model, Backbone, InputShape, ModelSpec};
use qim::qim::QimConfig;
use qim::train::{fit, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (train_n, test_n, epochs, seeds) = (arg(0, 5000), arg(1, 1000), arg(2, 5), arg(3, 3));
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin");
    let files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_cifar10(&files)?.take(train_n);
    let test = load_cifar10(&[dir.join("test_batch.bin")])?.take(test_n);

    let base = ModelSpec::new(Backbone::StandardCnn, InputShape::new(32, 32, 3), 10);
    let with = base.with_qim(QimConfig::new(128, 10));
    println!("seed  standardcnn  +qim     delta");
    for seed in 0..seeds as u64 {
        let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
        let mut acc = Vec::new();
        for spec in [&base, &with] {
            let mut net = build_model::<f32>(spec, seed)?;
            acc.push(fit(&mut net, &train, &test, &cfg, |_, _| {})?.accuracy);
        }
        println!("{seed:>4}  {:>11}  {:>7}  {:+.4}", acc[0], acc[1], acc[1].percent() - acc[0].percent());
    }
    Ok(())
}
