//! Runs every stage of the tiny preset into a scratch run directory, the
//! same way `taca <stage> --config configs/tiny.toml` does one process per
//! stage.
//!
//! `cargo run --release --example pipeline`

use taca::config::ExperimentConfig;
use taca::evalkit::EvalReport;
use taca::pipeline::{run_stage, RunDir, RunOptions, Stage};

fn main() -> taca::Result<()> {
    let cfg = ExperimentConfig::from_toml_str("preset = \"tiny\"\nname = \"example\"\n")?;
    let root = std::env::temp_dir().join("taca_pipeline_example");
    let opts = RunOptions {
        run_dir: Some(root.clone()),
        force: true,
    };
    for stage in Stage::ALL {
        let out = run_stage(&cfg, stage, &opts)?;
        println!("{stage:>18}: {} artifacts", out.artifacts.len());
    }

    let dir = RunDir::new(&root);
    let report = EvalReport::from_json(&std::fs::read_to_string(dir.eval_report()).map_err(|e| {
        taca::Error::Io {
            path: dir.eval_report(),
            source: e,
        }
    })?)?;
    println!("{} mean TER {:.3}, mean MCD {:.3} dB", report.system, report.aggregates.mean_ter, report.aggregates.mean_mcd);
    for s in &report.comparisons {
        println!("{} mean TER {:.3}, mean MCD {:.3} dB", s.system, s.mean_ter, s.mean_mcd);
    }
    println!("run directory: {}", root.display());
    Ok(())
}
