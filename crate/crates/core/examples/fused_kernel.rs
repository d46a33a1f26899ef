//! Times the dense and fused QIM kernels on one shape and reports their
//! largest disagreement.
//!
//! ```text
//! cargo run --release --example fused_kernel -- [d] [size] [filters] [channels]
//! ```

use std::time::Instant;

use qim::qim::{qim_eval, QimConfig, QimKernel, QimParams};
use qim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (d, size, filters, channels) = (arg(0, 64), arg(1, 10), arg(2, 128), arg(3, 128));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bound = QimConfig::new(filters, size).bind(d)?;
    let params = QimParams::<f64>::init(&bound, channels, &mut rng)?;
    let x = Tensor::from_vec(&[channels, d], (0..channels * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut outputs = Vec::new();
    for kernel in [QimKernel::Dense, QimKernel::Fused] {
        let start = Instant::now();
        let out = qim_eval(&x, &params, &bound, kernel, true)?;
        println!("{kernel:?}: {:.3} ms", start.elapsed().as_secs_f64() * 1e3);
        outputs.push(out.features);
    }
    let diff = outputs[0].data().iter().zip(outputs[1].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |dense - fused| = {diff:.3e}; cheapest for this shape: {:?}", QimKernel::cheapest(&bound, channels));
    Ok(())
}
