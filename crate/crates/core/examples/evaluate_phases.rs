//! Scores a model on task and language suites before and after a second
//! training phase and reports forgetting.
//!
//! cargo run --release --example evaluate_phases

use cftlab::corpus::{synth_generate, BenchmarkSpec, Vocab};
use cftlab::engine::{train_phase, Checkpoint, Decode, ModelConfig, TrainConfig};
use cftlab::eval::{compare, evaluate_checkpoint, suites_from};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = synth_generate(&BenchmarkSpec {
        phase1_per_family: 60,
        phase2_per_family: 60,
        eval_per_family: 10,
        ..BenchmarkSpec::default()
    })?;
    let vocab = Vocab::from_datasets(&bench.all());
    let model = ModelConfig {
        n_layers: 2,
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let base = Checkpoint::init(&model, &vocab, 0)?;
    let p1 = train_phase(&base, &bench.phase1_b, &cfg, None, None)?.checkpoint;
    let p2 = train_phase(&p1, &bench.phase2_multi_a, &cfg, None, None)?.checkpoint;

    let mut suites = suites_from(&bench.eval_ta);
    suites.extend(suites_from(&bench.eval_la).into_iter().filter(|s| !s.language.is_english()));
    let before = evaluate_checkpoint(&p1, &suites, Decode::Greedy, 12)?;
    let after = evaluate_checkpoint(&p2, &suites, Decode::Greedy, 12)?;
    print!("{}", compare(&before, &after)?.to_csv());
    Ok(())
}
