//! Subsampling-corrected factor uncertainty and confidence-ellipsoid scenarios.
//!
//! ```bash
//! cargo run --example stressed_scenario
//! ```

use fars::factors::{estimate_mldfm, InitMethod};
use fars::synthetic::overlapping_dgp;
use fars::uncertainty::{chi2_quantile, corrected_mse, create_scenario, subsample_estimates, GammaMode};

fn main() -> fars::Result<()> {
    let panel = overlapping_dgp(100, &[15, 25, 20], 0.6, 2);
    let full = estimate_mldfm(&panel.x, &panel.spec, &panel.structure, InitMethod::Cca, 1e-6, 1000)?;

    let subs = subsample_estimates(&panel.x, &panel.spec, &panel.structure, 50, 0.94, InitMethod::Cca, 1e-6, 1000, 42)?;
    println!("{} subsamples of {} variables", subs.len(), subs[0].variables());

    for mode in [GammaMode::Bn, GammaMode::Fpr] {
        let mse = corrected_mse(&full, &subs, mode, 2.0)?;
        let last = mse.per_t.last().expect("at least one period");
        println!("gamma {mode}: MSE diagonal at the last period {:.5?}", last.diagonal().as_slice());
    }

    let r = full.factor_count();
    for alpha in [0.7, 0.95, 0.99] {
        let scenario = create_scenario(&full, &subs, alpha, GammaMode::Bn, 2.0)?;
        println!(
            "alpha {alpha}: chi2_{r} = {:.4} ({:.4}), {} points per period",
            scenario.chi2_value,
            chi2_quantile(r, alpha)?,
            scenario.points_per_period()
        );
    }
    Ok(())
}
