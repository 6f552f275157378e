//! Builds the synthetic multilingual benchmark and writes it as JSONL.
//!
//! cargo run --release --example generate_benchmark -- [out-dir]

use cftlab::corpus::{histograms, synth_generate, BenchmarkSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "benchmark-data".into());
    let spec = BenchmarkSpec {
        phase1_per_family: 60,
        phase2_per_family: 60,
        eval_per_family: 10,
        ..BenchmarkSpec::default()
    };
    let bench = synth_generate(&spec)?;
    for ds in bench.all() {
        let (langs, families) = histograms(&ds.examples);
        println!("{:<20} {:>5} examples  languages {langs:?}", ds.id, ds.len());
        println!("{:<20} families {families:?}", "");
    }
    let ex = &bench.phase2_multi_a.examples[0];
    println!("\nsample: [{}] {} -> {}", ex.language, ex.prompt_text(), ex.output);
    bench.save(&out)?;
    println!("wrote {out}/");
    Ok(())
}
