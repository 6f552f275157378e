//! Compares the random and most-changed layer-freezing heuristics and shows
//! that frozen regions survive a second training phase untouched.
//!
//! cargo run --release --example freeze_plans

use cftlab::corpus::{synth_generate, BenchmarkSpec, Vocab};
use cftlab::engine::{train_phase, Checkpoint, ModelConfig, TrainConfig};
use cftlab::strategies::{change_ranking, lf_random, lf_top_changed, Granularity, Region};

fn main() -> Result<(), Box<dyn std::error::Error>> {
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
    let phase1 = train_phase(&base, &bench.phase1_a, &cfg, None, None)?.checkpoint;

    let layers = change_ranking(&base, &phase1, (0..model.n_layers).map(Region::layer))?;
    println!("change per layer during phase 1:");
    for (region, score) in &layers.entries {
        println!("  {region}  {score:.4}");
    }

    let random = lf_random(&model, 2, 7)?;
    println!("\nLF_H1 (random, k=2):\n{}", random.to_text());
    let top = lf_top_changed(&base, &phase1, 2, Granularity::PerKindPerHead)?;
    println!("LF_H2 (top changed Q/K/V heads, k=2 per kind):\n{}", top.to_text());

    let frozen = top.tensor_names(&phase1.layout())?;
    let phase2 = train_phase(&phase1, &bench.phase2_multi_a, &cfg, Some(&top), None)?.checkpoint;
    let unchanged = frozen
        .iter()
        .filter(|n| phase2.tensors[*n].bits_eq(&phase1.tensors[*n]))
        .count();
    println!("after phase 2: {unchanged}/{} frozen tensors bit-identical", frozen.len());
    Ok(())
}
