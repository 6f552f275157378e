//! Replay mixing: a seeded sample of a replay set combined with a primary set.

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Mixture};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    /// Replay examples are added on top of the primary set.
    #[default]
    Append,
    /// Replay examples replace randomly chosen primary examples.
    Substitute,
}

/// `ceil(fraction * n)`, tolerant of representation error in `fraction`.
pub fn replay_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize
}

pub fn mix(primary: &Dataset, replay: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, CorpusError> {
    mix_with(primary, replay, fraction, seed, MixMode::Append)
}

pub fn mix_with(
    primary: &Dataset,
    replay: &Dataset,
    fraction: f64,
    seed: u64,
    mode: MixMode,
) -> Result<Dataset, CorpusError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let needed = replay_count(fraction, primary.len());
    if needed > replay.len() {
        return Err(CorpusError::ReplayTooSmall {
            needed,
            available: replay.len(),
        });
    }
    let mut r = rng::stream(seed, "corpus.mix.sample");
    let picked = rng::sample_without_replacement(replay.len(), needed, &mut r);
    let mut examples = primary.examples.clone();
    match mode {
        MixMode::Append => examples.extend(picked.iter().map(|&i| replay.examples[i].clone())),
        MixMode::Substitute => {
            let mut r = rng::stream(seed, "corpus.mix.substitute");
            let slots = rng::sample_without_replacement(primary.len(), needed.min(primary.len()), &mut r);
            for (&slot, &i) in slots.iter().zip(&picked) {
                examples[slot] = replay.examples[i].clone();
            }
        }
    }
    let mut r = rng::stream(seed, "corpus.mix.shuffle");
    let order = rng::permutation(examples.len(), &mut r);
    let examples = order.into_iter().map(|i| examples[i].clone()).collect();
    let id = format!("{}+{}@{}", primary.id, replay.id, fraction);
    let mut ds = Dataset::new(id, examples, seed).with_languages(
        primary
            .metadata
            .languages
            .iter()
            .chain(&replay.metadata.languages)
            .copied(),
    );
    ds.metadata.mixture = Some(Mixture {
        primary_id: primary.id.clone(),
        replay_id: replay.id.clone(),
        fraction,
        replay_count: needed,
        mode,
        seed,
    });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, Lang, TaskFamily};
    use proptest::prelude::*;

    fn ds(id: &str, n: usize, lang: u8) -> Dataset {
        let ex = (0..n)
            .map(|i| Example {
                instruction: "copy".into(),
                input: format!("t{i}"),
                output: format!("t{i}"),
                language: Lang(lang),
                task_family: TaskFamily::Copy,
                template_id: i as u64,
            })
            .collect();
        Dataset::new(id, ex, 0)
    }

    #[test]
    fn ten_percent_of_a_thousand() {
        let m = mix(&ds("p", 1000, 1), &ds("r", 500, 0), 0.10, 3).unwrap();
        assert_eq!(m.len(), 1100);
        assert_eq!(m.metadata.language_histogram[&Lang(0)], 100);
        m.validate().unwrap();
    }

    #[test]
    fn zero_fraction_is_a_shuffle() {
        let p = ds("p", 50, 1);
        let m = mix(&p, &ds("r", 5, 0), 0.0, 3).unwrap();
        assert_eq!(m.len(), 50);
        assert_ne!(m.examples, p.examples);
        let mut a = m.examples.clone();
        a.sort_by_key(|e| e.template_id);
        assert_eq!(a, p.examples);
    }

    #[test]
    fn seeded_order_repeats() {
        let (p, r) = (ds("p", 40, 1), ds("r", 40, 0));
        assert_eq!(mix(&p, &r, 0.5, 9).unwrap(), mix(&p, &r, 0.5, 9).unwrap());
    }

    #[test]
    fn small_replay_and_bad_fraction() {
        assert!(matches!(
            mix(&ds("p", 100, 1), &ds("r", 5, 0), 0.1, 0),
            Err(CorpusError::ReplayTooSmall { needed: 10, available: 5 })
        ));
        assert!(matches!(
            mix(&ds("p", 10, 1), &ds("r", 5, 0), 1.5, 0),
            Err(CorpusError::BadFraction(_))
        ));
    }

    #[test]
    fn substitution_keeps_size() {
        let m = mix_with(&ds("p", 100, 1), &ds("r", 50, 0), 0.1, 2, MixMode::Substitute).unwrap();
        assert_eq!(m.len(), 100);
        assert_eq!(m.metadata.language_histogram[&Lang(0)], 10);
    }

    proptest! {
        #[test]
        fn mixed_size_is_primary_plus_ceiling(n in 1usize..400, fi in 0usize..5, seed in any::<u64>()) {
            let pct = [0usize, 5, 10, 50, 100][fi];
            let m = mix(&ds("p", n, 1), &ds("r", 400, 0), pct as f64 / 100.0, seed).unwrap();
            let expect = (pct * n).div_ceil(100);
            prop_assert_eq!(m.len(), n + expect);
        }
    }
}
