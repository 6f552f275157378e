//! Runs the seconds-scale study preset end to end: cached Phase-1 models,
//! one cell per condition and seed, summary tables and charts.
//!
//! cargo run --release --example smoke_study -- [out-dir]

use std::path::PathBuf;

use cftlab::study::{Condition, ExperimentConfig, PhaseOneSet, Study};
use cftlab::strategies::Strategy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "study-out".into()));
    let mut cfg = ExperimentConfig::smoke();
    cfg.conditions = [PhaseOneSet::A, PhaseOneSet::B]
        .into_iter()
        .flat_map(|phase1| {
            [Strategy::None, Strategy::Gr { fraction: 0.10 }]
                .into_iter()
                .map(move |strategy| Condition { phase1, strategy })
        })
        .collect();
    let study = Study::new(&cfg, &out, 1)?;
    let summary = study.run()?;
    println!("config {} -> {}", summary.config_hash, summary.root.display());
    println!("computed {:?}, reused {:?}", summary.computed, summary.skipped);
    for c in &summary.cells {
        println!(
            "{:<10} seed {}  TA {:.3} -> {:.3}  LA {:.3} -> {:.3}  drift {:.4}",
            c.condition, c.seed, c.ta_phase1, c.ta_phase2, c.la_phase1, c.la_phase2, c.drift_mean
        );
    }
    print!("\n{}", std::fs::read_to_string(summary.root.join("summary.csv"))?);
    Ok(())
}
