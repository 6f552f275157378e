//! Measures how much a second training phase moves the per-layer activation
//! covariance, and projects the layer means of both models to 2-D.
//!
//! cargo run --release --example activation_drift -- [out-dir]

use cftlab::corpus::{synth_generate, BenchmarkSpec, Vocab};
use cftlab::drift::{capture, drift_norms, drift_svg, project2d};
use cftlab::engine::{train_phase, Checkpoint, ModelConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "drift-out".into());
    let bench = synth_generate(&BenchmarkSpec {
        phase1_per_family: 40,
        phase2_per_family: 40,
        ..BenchmarkSpec::default()
    })?;
    let vocab = Vocab::from_datasets(&bench.all());
    let model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let base = Checkpoint::init(&model, &vocab, 0)?;
    let p1 = train_phase(&base, &bench.phase1_b, &cfg, None, None)?.checkpoint;
    let p2 = train_phase(&p1, &bench.phase2_multi_a, &cfg, None, None)?.checkpoint;

    let (s1, s2) = (capture(&p1, &bench.drift_prompts)?, capture(&p2, &bench.drift_prompts)?);
    let report = drift_norms(&s1, &s2)?;
    print!("{}", report.to_csv());
    println!("mean per-layer drift {:.4}", report.mean_layer_diff());

    let proj = project2d(&[s1, s2])?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(format!("{out}/drift.csv"), report.to_csv())?;
    std::fs::write(format!("{out}/drift.svg"), drift_svg("phase 1 -> phase 2", &[("B then multi A".into(), &report)]))?;
    std::fs::write(format!("{out}/projection.csv"), proj.to_csv())?;
    println!("wrote {out}/drift.csv, drift.svg, projection.csv");
    Ok(())
}
