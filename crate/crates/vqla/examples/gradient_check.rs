//! Runs the f64 gradient-check suite over every differentiable module and
//! prints one line per module.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

fn main() {
    let started = std::time::Instant::now();
    let entries = vqla::gradsuite::run_suite(5, 2024);
    let mut failed = false;
    for entry in &entries {
        println!(
            "{:<16} instances {}  max_rel_error {:.3e}  [{}]",
            entry.module,
            entry.instances,
            entry.max_rel_error,
            if entry.passed() { "pass" } else { "FAIL" }
        );
        failed |= !entry.passed();
    }
    println!(
        "{} modules in {:.1}s (tolerance {:.0e})",
        entries.len(),
        started.elapsed().as_secs_f64(),
        vqla::gradsuite::TOLERANCE
    );
    if failed {
        std::process::exit(3);
    }
}
