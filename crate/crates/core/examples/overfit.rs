//! Memorizes a small MNIST subset with full-batch steps and reports how many
//! steps each model needs to reach 99% train accuracy.
//!
//! ```text
//! cargo run --release --example overfit -- [samples] [steps] [qim_filters qim_size [normalize 0|1 [kernel_scale]]]
//! ```
//! `kernel_scale` multiplies the initial QIM kernels, to probe how the
//! block's output scale affects optimization.

use std::path::PathBuf;

use qim::data::{load_idx, make_batches, BatchPlan};
use qim::models::{build_model, Backbone, InputShape, ModelSpec};
use qim::qim::QimConfig;
use qim::train::{evaluate_dataset, train_step, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, default: usize| args.get(i).map_or(Ok(default), |a| a.parse());
    let (samples, steps) = (num(0, 32)?, num(1, 200)?);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let data = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?.take(samples);

    let mut spec = ModelSpec::new(Backbone::StandardCnn, InputShape::new(28, 28, 1), 10);
    let mut scale = 1.0f32;
    if args.len() >= 4 {
        let normalize = args.get(4).is_none_or(|n| n != "0");
        spec = spec.with_qim(QimConfig::new(args[2].parse()?, args[3].parse()?).with_normalize(normalize));
        scale = args.get(5).map_or(Ok(1.0), |s| s.parse())?;
    }
    let cfg = TrainConfig { batch_size: samples, seed: 7, ..TrainConfig::default() };
    let mut net = build_model::<f32>(&spec, cfg.seed)?;
    for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with("qim.kernels")) {
        p.value = p.value.map(|x| x * scale);
    }
    let mut opt = cfg.optimizer::<f32>();
    let batch = make_batches::<f32>(&data, BatchPlan::sequential(samples))?.next().expect("one batch");
    for step in 1..=steps {
        let loss = train_step(&mut net, &batch, &mut opt)?;
        let acc = evaluate_dataset(&net, &data, samples)?;
        if step % 20 == 0 || acc.percent() >= 99.0 {
            println!("step {step:>4} loss {loss:.5} train accuracy {acc}");
        }
        if acc.percent() >= 99.0 {
            break;
        }
    }
    Ok(())
}
