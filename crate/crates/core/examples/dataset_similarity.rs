//! Dataset embedding similarity between the phase-wise training sets, and
//! parameter distance between models fine-tuned on each from one base.
//!
//! cargo run --release --example dataset_similarity

use cftlab::corpus::{synth_generate, BenchmarkSpec, Vocab};
use cftlab::engine::{train_phase, Checkpoint, ModelConfig, TrainConfig};
use cftlab::similarity::{des, mpd, normalize_mpd, Embedder, SampleSize};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = synth_generate(&BenchmarkSpec {
        phase1_per_family: 60,
        phase2_per_family: 60,
        ..BenchmarkSpec::default()
    })?;
    let emb = Embedder::task_signature();
    let target = &bench.phase2_multi_a;
    for ds in [&bench.phase1_a, &bench.phase1_b, &bench.phase2_multi_b] {
        let s = des(ds, target, &emb, SampleSize::N(100), 0)?;
        println!("DES({}, {}) = {s:.4}", ds.id, target.id);
    }

    let vocab = Vocab::from_datasets(&bench.all());
    let model = ModelConfig {
        n_layers: 2,
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let base = Checkpoint::init(&model, &vocab, 0)?;
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let ft = |ds| train_phase(&base, ds, &cfg, None, None).map(|o| o.checkpoint);
    let (a, b, multi) = (ft(&bench.phase1_a)?, ft(&bench.phase1_b)?, ft(target)?);
    let raw = [mpd(&a, &multi)?, mpd(&b, &multi)?, mpd(&a, &b)?];
    let norm = normalize_mpd(&raw)?;
    for (label, (r, n)) in ["FT(A) vs FT(multi A)", "FT(B) vs FT(multi A)", "FT(A) vs FT(B)"]
        .iter()
        .zip(raw.iter().zip(&norm))
    {
        println!("MPD {label:<22} raw {r:.5}  normalized {n:.3}");
    }
    Ok(())
}
