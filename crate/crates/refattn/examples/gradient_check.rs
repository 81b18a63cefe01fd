//! Finite-difference verification of every backward rule, module by module.
//!
//!     cargo run --release --example gradient_check

use refattn::pipeline::selftest::run_gradcheck;

fn main() -> refattn::Result<()> {
    let mut worst: f64 = 0.0;
    for module in ["numerics", "encoder", "rda", "rfa", "losses", "unet"] {
        for line in run_gradcheck(module, 7)? {
            println!(
                "{module:>8} / {:<24} max rel err {:.3e} over {} elements",
                line.name, line.report.max_rel_err, line.report.checked
            );
            assert!(line.passed(), "{} exceeded its tolerance", line.name);
            worst = worst.max(line.report.max_rel_err);
        }
    }
    println!("worst relative error across all checks: {worst:.3e}");
    Ok(())
}
