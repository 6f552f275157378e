//! Runs plain Phase 2 next to generative replay, English replay and a
//! low-rank adapter, all from one Phase-1 model.
//!
//! cargo run --release --example mitigations

use cftlab::corpus::{synth_generate, BenchmarkSpec, Vocab};
use cftlab::engine::{train_phase, Checkpoint, Decode, ModelConfig, TrainConfig};
use cftlab::eval::{evaluate_checkpoint, suites_from};
use cftlab::strategies::{build_phase2_plan, execute_plan, generate_replay, PlanInputs, Strategy};

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

    let replay = generate_replay(&p1, &bench.english_counterpart, Decode::Greedy, 12)?;
    let ex = &replay.dataset.examples[0];
    println!(
        "replay: {} examples, {} empty; e.g. {} -> {}",
        replay.dataset.len(),
        replay.empty_outputs,
        ex.prompt_text(),
        ex.output
    );

    let ta: Vec<_> = suites_from(&bench.eval_ta)
        .into_iter()
        .filter(|s| bench.phase1_b.examples.iter().any(|e| e.task_family == s.family))
        .collect();
    let la: Vec<_> = suites_from(&bench.eval_la)
        .into_iter()
        .filter(|s| !s.language.is_english())
        .collect();
    let ta0 = evaluate_checkpoint(&p1, &ta, Decode::Greedy, 12)?.ta.unwrap_or(0.0);
    println!("phase 1 TA {ta0:.3}");

    let inputs = PlanInputs {
        phase1: Some(&p1),
        english_counterpart: Some(&bench.english_counterpart),
        replay: Some(&replay.dataset),
        ..PlanInputs::new(&bench.phase2_multi_a)
    };
    for strategy in [
        Strategy::None,
        Strategy::Gr { fraction: 0.10 },
        Strategy::Er { fraction: 0.10 },
        Strategy::Lora { rank: 4 },
    ] {
        let plan = build_phase2_plan(strategy, &inputs)?;
        let p2 = execute_plan(&plan, &p1, &cfg)?.checkpoint;
        let t = evaluate_checkpoint(&p2, &ta, Decode::Greedy, 12)?.ta.unwrap_or(0.0);
        let l = evaluate_checkpoint(&p2, &la, Decode::Greedy, 12)?.la.unwrap_or(0.0);
        println!(
            "{:<6} {:>4} train examples  TA {t:.3} (forgetting {:+.3})  LA {l:.3}",
            strategy.label(),
            plan.dataset.len(),
            ta0 - t
        );
    }
    Ok(())
}
