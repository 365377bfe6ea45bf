//! Runs every oracle suite and prints one line per suite.

use cfvsr::linguistics::LinguisticInventory;
use cfvsr::verify::{run_all, VerifyOptions};

fn main() {
    let inv = LinguisticInventory::bundled();
    let mut failed = false;
    for r in run_all(&VerifyOptions::default(), &inv) {
        println!(
            "{:5} {:18} cases {:5}  max error {:.3e} (tol {:.0e})  {:.2}s",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_error,
            r.tolerance,
            r.seconds
        );
        if let Some(f) = &r.failure {
            println!("      {f}");
        }
        failed |= !r.passed;
    }
    std::process::exit(i32::from(failed));
}
