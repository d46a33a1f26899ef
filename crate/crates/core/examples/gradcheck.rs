//! Runs the finite-difference suite over every op, the QIM block and two
//! tiny networks, then prints the worst relative error per input.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed] [seeds]
//! ```

use std::time::Instant;

use qim::gradcheck::gradcheck_suite;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>());
    let seed = args.next().transpose()?.unwrap_or(0);
    let seeds = args.next().transpose()?.unwrap_or(20) as usize;
    let start = Instant::now();
    let report = gradcheck_suite(seed, seeds, &[])?;
    println!("{report}");
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
