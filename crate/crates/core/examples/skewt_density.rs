//! Skew-t smoothing of five forecast quantiles and the tail-risk readout.
//!
//! ```bash
//! cargo run --example skewt_density
//! ```

use fars::skewt::{compute_density, fit_skewt_traced, quantile_risk, skewt_quantile, SkewTParams};
use nalgebra::DMatrix;

fn main() -> fars::Result<()> {
    let levels = [0.05, 0.25, 0.5, 0.75, 0.95];
    let truth = SkewTParams::new(1.0, 2.0, -3.0, 6.0)?;
    let q: Vec<f64> = levels.iter().map(|&l| skewt_quantile(l, &truth)).collect::<fars::Result<_>>()?;
    println!("quantiles of {truth:?}:\n  {q:.4?}");

    let fit = fit_skewt_traced(&q, &levels)?;
    println!("fitted {:?}\n  loss {:.2e} after {} iterations", fit.params, fit.loss, fit.iterations);

    // Three forecast rows, the last one with crossed quantiles.
    let rows = DMatrix::from_row_slice(
        3,
        5,
        &[
            -3.0, -0.5, 0.8, 1.9, 3.5, //
            -6.0, -2.0, 0.2, 1.5, 2.8, //
            -1.0, -1.2, 0.0, 1.1, 2.0,
        ],
    );
    let density = compute_density(&rows, &levels, 512, 5000, (-15.0, 10.0), 42)?;
    let gar = quantile_risk(&density, 0.05)?;
    for (i, params) in density.params.iter().enumerate() {
        let step = density.grid[1] - density.grid[0];
        let mass: f64 = density.densities.row(i).iter().sum::<f64>() * step;
        println!("row {i}: {params:?}\n  grid mass {mass:.4}, 5% quantile risk {:.4}", gar[i]);
    }
    Ok(())
}
