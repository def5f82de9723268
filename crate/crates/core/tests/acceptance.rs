//! Acceptance criteria 1-10, one line each. Runs sequentially so the
//! wall-clock budgets are measured without contention.

use pointpose_core::selftest;

fn main() {
    // `cargo test -- --list` and filtered runs should not trigger the suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = 0;
    for id in selftest::ALL {
        let r = selftest::run(id);
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", selftest::ALL.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
