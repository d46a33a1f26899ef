//! Runs one QIM block forward and backward on random feature maps and
//! prints the shapes involved.
//!
//! ```text
//! cargo run --example qim_block -- [channels] [side] [filters] [size]
//! ```

use qim::qim::{flatten_maps, qim_backward, qim_forward, QimConfig, QimParams};
use qim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (channels, side, filters, size) = (arg(0, 8), arg(1, 4), arg(2, 6), arg(3, 10));
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let maps: Vec<Tensor<f64>> = (0..channels)
        .map(|_| Tensor::from_vec(&[side, side], (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<qim::Result<_>>()?;
    let vectors = flatten_maps(&maps)?;
    let bound = QimConfig::new(filters, size).bind(vectors.shape()[1])?;
    if let Some(w) = &bound.warning {
        println!("warning: {w}");
    }
    println!("d={} s={} k={} -> {} features", bound.d, bound.s, bound.k, bound.output_len());

    let params = QimParams::init(&bound, channels, &mut rng)?;
    let out = qim_forward(&vectors, &params, &bound)?;
    println!("maps {:?}, features {:?}", out.maps.shape(), out.features.shape());
    println!("first filter [co; ro] = {:.4?}", &out.features.data()[..2 * bound.s]);

    let upstream = Tensor::full(&[bound.output_len()], 1.0);
    let grads = qim_backward(&upstream, &out, &params, &bound)?;
    let norm = |t: &Tensor<f64>| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    println!(
        "|dL/dm| {:.4e}  |dL/dK| {:.4e}  |dL/db| {:.4e}  |dL/dlogits| {:.4e}",
        norm(&grads.vectors),
        norm(&grads.kernels),
        norm(&grads.biases),
        grads.logits.as_ref().map_or(0.0, norm)
    );
    Ok(())
}
