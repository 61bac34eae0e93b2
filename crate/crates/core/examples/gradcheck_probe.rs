use adastate_core::gradcheck::{run_gradcheck, GradcheckOptions};

fn main() {
    let report = run_gradcheck(2024, &GradcheckOptions::default()).unwrap();
    for c in &report.checks {
        println!("{:<36} max_err {:>12.3e}  tol {:>8.1e}  {}", c.name, c.max_rel_err, c.tolerance, if c.passed { "PASS" } else { "FAIL" });
    }
    let broken = run_gradcheck(2024, &GradcheckOptions { break_detach: true }).unwrap();
    let detach = broken.checks.iter().find(|c| c.name == "state-detach").unwrap();
    println!("negative control (broken detach): detach check passed={} (must be false)", detach.passed);
    std::process::exit(if report.all_passed() && !detach.passed { 0 } else { 1 });
}
