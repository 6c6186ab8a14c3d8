//! Runs an acceptance suite and prints one line per criterion.
//!
//! ```text
//! cargo run --release --example acceptance_suite [oracle|capture|downstream|mae|all]
//! ```
//!
//! `oracle` (the default) covers the exact-math and determinism checks and
//! finishes in a few minutes. The capture, downstream and MAE suites run
//! the full desk-scale configuration and take hours on one core.

use mrp_lab::acceptance::{run_acceptance, Suite};

fn main() -> mrp_lab::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "oracle".into());
    let suite = Suite::parse(&name)?;
    let scratch = std::env::temp_dir().join(format!("mrp-lab-accept-{}", std::process::id()));
    std::fs::create_dir_all(&scratch)?;

    println!("suite {name}: {:?}", suite.criteria());
    let report = run_acceptance(suite, &scratch, &mut |r| println!("{}", r.line()))?;
    std::fs::remove_dir_all(&scratch)?;
    println!("{}", if report.all_pass() { "all criteria pass" } else { "some criteria FAIL" });
    Ok(())
}
