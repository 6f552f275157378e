//! Trains a small decoder on one instruction set and greedy-decodes a few
//! held-out prompts.
//!
//! cargo run --release --example train_phase

use cftlab::corpus::{synth_generate, BenchmarkSpec, Vocab};
use cftlab::engine::{encode_prompt, train_phase, Checkpoint, Decode, Generator, ModelConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = synth_generate(&BenchmarkSpec {
        phase1_per_family: 80,
        ..BenchmarkSpec::default()
    })?;
    let vocab = Vocab::from_datasets(&bench.all());
    let model = ModelConfig {
        n_layers: 2,
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let base = Checkpoint::init(&model, &vocab, 0)?;
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let out = train_phase(&base, &bench.phase1_b, &cfg, None, None)?;
    println!(
        "{} steps, loss {:.3} -> {:.3}",
        out.log.entries.len(),
        out.log.first_loss().unwrap_or(f64::NAN),
        out.log.last_loss().unwrap_or(f64::NAN)
    );
    let gen = Generator::new(&out.checkpoint)?;
    for ex in bench.eval_ta.examples.iter().filter(|e| bench.phase1_b.examples[0].task_family == e.task_family).take(4) {
        let ids = gen.generate(&encode_prompt(&vocab, ex)?, Decode::Greedy, 12)?;
        println!("{}\n  model: {}\n  gold:  {}", ex.prompt_text(), vocab.detokenize(&ids), ex.output);
    }
    out.checkpoint.save("phase1_b.cftl")?;
    println!("saved phase1_b.cftl ({})", out.checkpoint.id());
    Ok(())
}
