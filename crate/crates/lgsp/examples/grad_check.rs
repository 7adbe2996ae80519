//! Finite-difference verification of the tape gradients through the whole
//! model, one representative parameter per trainable group.

use lgsp::harness::{self, ExperimentConfig};

fn main() -> lgsp::Result<()> {
    let cfg = ExperimentConfig::default();
    let out = std::path::Path::new("example_out/grad_check");
    let report = harness::grad_check_cmd(&cfg, out)?;
    println!("{:<22} {:>8} {:>14} {:>9}  result", "parameter", "entries", "max rel err", "tol");
    for e in &report.entries {
        println!(
            "{:<22} {:>8} {:>14.3e} {:>9.0e}  {}",
            e.name,
            e.checked,
            e.max_rel_err,
            e.tolerance,
            if e.pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "report written to {}",
        out.join("grad_check.csv").display()
    );
    Ok(())
}
