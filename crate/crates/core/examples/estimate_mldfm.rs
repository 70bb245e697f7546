//! Multi-level factor model on a simulated three-block panel.
//!
//! ```bash
//! cargo run --example estimate_mldfm
//! ```

use fars::factors::{estimate_mldfm, orthonormalize_levels, InitMethod, DEFAULT_MAX_ITER, DEFAULT_TOL};
use fars::synthetic::{overlapping_dgp, trace_r2};

fn main() -> fars::Result<()> {
    // Global factor, a 1-3 factor, and one local factor per block.
    let panel = overlapping_dgp(120, &[20, 30, 25], 0.5, 1);

    for method in [InitMethod::Cca, InitMethod::Pca] {
        let fit = estimate_mldfm(&panel.x, &panel.spec, &panel.structure, method, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        println!("initialization {method}");
        println!("  factors per node:");
        for node in fit.structure.nodes() {
            println!("    {:<8} {}", node.label(), node.count());
        }
        println!("  iterations {}, converged {}", fit.iterations, fit.converged);
        println!("  RSS {:.4} (first {:.4})", fit.rss(), fit.rss_trace[0]);
        println!("  trace R² vs true common component {:.4}", trace_r2(&fit.common_component(), &panel.common));

        let ortho = orthonormalize_levels(&fit)?;
        println!("  columns {:?}", ortho.column_names());
    }
    Ok(())
}
