//! Factor-augmented quantile regressions, unstressed and stressed.
//!
//! ```bash
//! cargo run --example quantile_regression
//! ```

use fars::factors::{estimate_mldfm, InitMethod};
use fars::faqr::{compute_fars, Direction};
use fars::synthetic::overlapping_dgp;
use fars::uncertainty::{create_scenario, subsample_estimates, GammaMode};

fn main() -> fars::Result<()> {
    let panel = overlapping_dgp(100, &[12, 16, 14], 0.5, 3);
    let full = estimate_mldfm(&panel.x, &panel.spec, &panel.structure, InitMethod::Cca, 1e-6, 1000)?;
    let subs = subsample_estimates(&panel.x, &panel.spec, &panel.structure, 40, 0.94, InitMethod::Cca, 1e-6, 1000, 7)?;
    let scenario = create_scenario(&full, &subs, 0.95, GammaMode::Bn, 2.0)?;

    let res = compute_fars(&panel.target, &full.factors, 1, 0.05, Some(&scenario), Some(0.05), Direction::Min)?;
    for fit in &res.fits {
        println!("tau {:<5} coefficients {:.3?}", fit.tau, fit.coefficients.as_slice());
        println!("          std.errors   {:.3?}", fit.std_errors.as_slice());
    }

    let base = res.qtau_quantiles.as_ref().expect("qtau forecasts");
    let stressed = res.stressed_qtau_quantiles.as_ref().expect("stressed qtau forecasts");
    println!("\nperiod  q05 unstressed  q05 stressed");
    for t in (0..res.rows()).rev().take(5).rev() {
        println!("{:>6}  {:>14.4}  {:>12.4}", t + 1, base[t], stressed[t]);
    }
    let worst = stressed.iter().zip(base.iter()).map(|(s, b)| s - b).fold(f64::NEG_INFINITY, f64::max);
    println!("max(stressed − unstressed) = {worst:.3e}");
    Ok(())
}
