//! Runs the density-map ablation (baseline plus a filters × size grid) from
//! a config file and prints the resulting table.
//!
//! ```text
//! cargo run --release --example ablation -- configs/mnist.cfg [grid] [out]
//! ```
//! `grid` uses the CLI syntax, e.g. `counts=32,128;sizes=8,10`.

use std::path::PathBuf;

use qim::cli::{cmd_ablate, Grid, Overrides};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(config) = args.first() else {
        eprintln!("usage: ablation <config> [grid] [out]");
        std::process::exit(2);
    };
    let grid: Grid = match args.get(1).map(|g| g.parse()).transpose() {
        Ok(g) => g.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    let overrides =
        Overrides { out: Some(args.get(2).map_or_else(|| PathBuf::from("runs/ablation"), PathBuf::from)), seed: None };
    match cmd_ablate(&PathBuf::from(config), &grid, &overrides) {
        Ok(rows) => {
            let best =
                rows.iter().skip(1).filter_map(|r| r.accuracy.map(|a| (a, r))).max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((acc, row)) = best {
                println!("best cell: c={:?} s={:?} accuracy {acc:.4}", row.density_maps, row.density_size);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(i32::from(e.exit_code()));
        }
    }
}
