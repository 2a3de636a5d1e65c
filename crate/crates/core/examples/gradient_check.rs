//! Central finite differences against the analytic gradients of every
//! objective on a two-task toy model.

use mtpsl::harness::{gradcheck_suite, GradcheckOptions};

fn main() -> mtpsl::Result<()> {
    let opts = GradcheckOptions::default();
    println!("step {:e}, tolerance {:e}, {} coordinates per tensor", opts.step, opts.tolerance, opts.coords_per_param);
    for r in gradcheck_suite(&opts)? {
        println!(
            "{:<26} {:>4} probes  max relative error {:.2e}  {}",
            r.objective,
            r.checked,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
