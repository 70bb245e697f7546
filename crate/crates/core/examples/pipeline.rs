//! Full unstressed and stressed runs from a TOML config, as the `fars`
//! binary performs them.
//!
//! ```bash
//! cargo run --example pipeline -- /tmp/fars_demo
//! cargo run --bin fars -- run-stressed --config /tmp/fars_demo/fars.toml
//! ```

use std::path::PathBuf;

use fars::pipeline::{run_stressed, run_unstressed, PipelineConfig};
use fars::report;
use fars::synthetic::overlapping_dgp;

const CONFIG: &str = r#"
data = "panel.csv"
dep_variable = "GDP"
blocks = [12, 16, 14]
structure = [
  { blocks = [1, 2, 3], count = 1 },
  { blocks = [1, 3], count = 1 },
  { blocks = [1], count = 1 },
  { blocks = [2], count = 1 },
  { blocks = [3], count = 1 },
]
h = 1
qtau = 0.05
alpha = 0.95
n_samples = 50
support = [-15.0, 10.0]
seed = 42
"#;

fn main() -> fars::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("fars_demo"), PathBuf::from);
    std::fs::create_dir_all(&dir).map_err(|e| fars::FarsError::io(&dir, e))?;
    overlapping_dgp(90, &[12, 16, 14], 0.5, 5).write_csv(&dir.join("panel.csv"), "GDP")?;
    let config_path = dir.join("fars.toml");
    std::fs::write(&config_path, CONFIG).map_err(|e| fars::FarsError::io(&config_path, e))?;

    let mut cfg = PipelineConfig::load(&config_path)?;
    cfg.output = dir.join("unstressed");
    let manifest = run_unstressed(&cfg)?;
    println!("{}", report::run_summary(&cfg.layout(), &manifest)?);

    cfg.output = dir.join("stressed");
    let manifest = run_stressed(&cfg)?;
    println!("{}", report::run_summary(&cfg.layout(), &manifest)?);

    let (_, gar) = fars::io::read_risk(&dir.join("unstressed/risk.csv"))?;
    let (_, gis) = fars::io::read_risk(&dir.join("stressed/risk.csv"))?;
    println!("last period: GaR {:.4}, GiS {:.4}", gar[gar.len() - 1], gis[gis.len() - 1]);
    println!("artifacts under {}", dir.display());
    Ok(())
}
