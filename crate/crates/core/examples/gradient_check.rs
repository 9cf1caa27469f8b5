//! Finite-difference check of the full objective for every ablation mode on
//! the tiny configuration.

use dcl::config::{Config, Mode};
use dcl::gradcheck::gradcheck;

fn main() -> dcl::error::Result<()> {
    let config = Config::tiny();
    for mode in Mode::ALL {
        let t = std::time::Instant::now();
        let r = gradcheck(&config, mode, 1, None)?;
        println!(
            "{:<9} {:>5} entries  max rel error {:.2e} ({})  {:.1}s  {}",
            mode.as_str(),
            r.n_checked,
            r.max_rel_error,
            r.worst_param,
            t.elapsed().as_secs_f64(),
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
