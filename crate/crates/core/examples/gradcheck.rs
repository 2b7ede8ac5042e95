//! Finite-difference check of every differentiable op and the full
//! adaptation objective. `cargo run --release --example gradcheck [seeds]`
use hfr_adapt::gradcheck::{run_suite, TOLERANCE};

fn main() -> hfr_adapt::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let results = run_suite(seeds, None)?;
    for r in &results {
        println!("{:<18} max rel error {:.2e} over {} coordinates", r.op, r.max_rel_error, r.coordinates);
    }
    let ok = results.iter().all(|r| r.passed());
    println!("{} (tolerance {TOLERANCE:e})", if ok { "all passed" } else { "FAILURES" });
    Ok(())
}
