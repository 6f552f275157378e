use cftlab::corpus::{Dataset, Example, Lang, TaskFamily, Vocab};
use cftlab::engine::{self, attention_targets, Checkpoint, LowRankAdapter, ModelConfig, ProjKind, TrainConfig};
use cftlab::strategies::{FreezeMask, Region};
use proptest::prelude::*;

fn dataset() -> Dataset {
    let items = ["a b c", "c a", "b b a", "c b a c"];
    let ex = items
        .iter()
        .enumerate()
        .map(|(i, s)| Example {
            instruction: "reverse".into(),
            input: format!("{s} ."),
            output: s.split(' ').rev().collect::<Vec<_>>().join(" "),
            language: Lang::EN,
            task_family: TaskFamily::Reverse,
            template_id: i as u64,
        })
        .collect();
    Dataset::new("tiny-reverse", ex, 0)
}

fn setup() -> (Checkpoint, Dataset, TrainConfig) {
    let ds = dataset();
    let vocab = Vocab::from_datasets(&[&ds]);
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab.len(),
        max_seq_len: 24,
    };
    let tc = TrainConfig {
        epochs: 2,
        global_batch_size: 2,
        warmup_steps: 1,
        ..TrainConfig::default()
    };
    (Checkpoint::init(&cfg, &vocab, 1).unwrap(), ds, tc)
}

fn region() -> impl Strategy<Value = Region> {
    prop_oneof![
        (0usize..3).prop_map(Region::layer),
        (0usize..3, 0usize..3, 0usize..2).prop_map(|(l, k, h)| {
            Region::proj(l, [ProjKind::Q, ProjKind::K, ProjKind::V][k], h)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn frozen_tensors_stay_bit_identical(regions in prop::collection::vec(region(), 1..5)) {
        let (base, ds, tc) = setup();
        let mask = FreezeMask::new(regions);
        let frozen = mask.tensor_names(&base.layout()).unwrap();
        let out = engine::train_phase(&base, &ds, &tc, Some(&mask), None).unwrap();
        for (name, t) in &out.checkpoint.tensors {
            let same = t.bits_eq(&base.tensors[name]);
            if frozen.contains(name) {
                prop_assert!(same, "frozen tensor {} changed", name);
            } else if name != "embed" {
                prop_assert!(!same, "trainable tensor {} did not move", name);
            }
        }
    }
}

#[test]
fn adapter_training_leaves_base_untouched() {
    let (base, ds, tc) = setup();
    let adapter = LowRankAdapter::new(&base, &attention_targets(&base.config), 2, 1.0, 7).unwrap();
    let out = engine::train_phase(&base, &ds, &tc, None, Some(&adapter)).unwrap();
    assert!(out.checkpoint.tensors_bit_equal(&base));
    let trained = out.adapter.expect("adapter factors");
    assert!(trained.factors.values().any(|f| f.b.data.iter().any(|v| *v != 0.0)));
}
