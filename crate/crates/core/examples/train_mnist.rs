//! Trains StandardCNN (optionally with QIM) on MNIST.
//!
//! ```text
//! cargo run --release --example train_mnist -- [epochs] [train_limit] [qim_filters qim_size [normalize 0|1 [insert_after]]]
//! ```
//! Expects the IDX files under `data/mnist/` (see `scripts/fetch_data.sh`).

use std::path::PathBuf;

use qim::data::load_idx;
use qim::models::{build_model, Backbone, InputShape, ModelSpec};
use qim::qim::QimConfig;
use qim::train::{fit, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let epochs = args.first().copied().unwrap_or(1);
    let limit = args.get(1).copied().unwrap_or(usize::MAX);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?.take(limit);
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;

    let mut spec = ModelSpec::new(Backbone::StandardCnn, InputShape::new(28, 28, 1), 10);
    if let [_, _, c, s, ..] = args[..] {
        let normalize = args.get(4).is_none_or(|&n| n != 0);
        let config = QimConfig::new(c, s).with_normalize(normalize);
        spec = match args.get(5) {
            Some(&at) => spec.with_qim_at(config, at),
            None => spec.with_qim(config),
        };
    }
    let mut net = build_model::<f32>(&spec, 7)?;
    if let Some(q) = net.qim() {
        println!("qim: d={} s={} k={} {}", q.d, q.s, q.k, q.warning.as_deref().unwrap_or(""));
    }
    println!("{} parameters, {} training samples", net.param_count(), train.len());

    let config = TrainConfig { epochs, seed: 7, ..Default::default() };
    let metrics = fit(&mut net, &train, &test, &config, |e, loss| println!("epoch {} loss {loss:.5}", e + 1))?;
    println!("{} test accuracy {} ({:.1}s)", spec.approach(), metrics.accuracy, metrics.wall_seconds);
    Ok(())
}
