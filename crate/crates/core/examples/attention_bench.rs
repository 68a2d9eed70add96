//! Times one criss-cross pass against one dense pass on the current thread.
//!
//!     cargo run --release --example attention_bench -- [sizes, e.g. 16,32,64]

use xlsor::bench::run_bench;

fn main() -> xlsor::Result<()> {
    let sizes: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "16,32,64".into())
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let report = run_bench(&sizes, 3, 0)?;
    println!("C = {}, C' = {}, best of {}", report.channels, report.reduced_channels, report.repeats);
    for r in &report.results {
        println!(
            "{0:>3}x{0:<3} multiplies x{1:<7.2} time x{2:<7.2} ({3:.4}s dense, {4:.4}s criss-cross)",
            r.size, r.cost_ratio, r.time_ratio, r.nonlocal.seconds, r.crisscross.seconds
        );
    }
    Ok(())
}
