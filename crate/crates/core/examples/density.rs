//! Builds dyads and a softmax-weighted mixture and checks that each is a
//! valid density matrix.
//!
//! ```text
//! cargo run --example density
//! ```

use qim::density::{dyad, mixture, validate_density, MixtureWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> qim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let rho = dyad(&[3.0f64, 4.0], true)?;
    println!("dyad([3, 4]) = {:?}, trace {}", rho.entries().data(), rho.trace());

    let vectors: [&[f64]; 3] = [&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[1.0, 1.0, 1.0]];
    let weights = MixtureWeights::from_logits(&[0.0, 1.0, -1.0])?;
    let mix = mixture(&vectors, &weights, true)?;
    println!("weights {:?}", weights.as_slice());
    for row in mix.entries().data().chunks(3) {
        println!("  {row:.4?}");
    }
    let report = validate_density(&mix, 1000, &mut rng);
    println!("{report:?} passes={}", report.passes());

    // an unnormalized dyad keeps the vector's scale
    let raw = dyad(&[3.0f64, 4.0], false)?;
    println!("unnormalized trace {} (= ‖u‖²)", raw.trace());
    Ok(())
}
