//! Deterministic synthetic benchmark: five token-manipulation task families
//! rendered in an English-analog language `L0` and `k` synthetic languages.
//! Language `Lj` spells every `L0` token `t` as `t` followed by a fixed
//! per-language suffix, so alphabets are disjoint and the map is bijective.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Example, Lang, TaskFamily};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Number of synthetic languages `k`; tags are `L1..Lk`.
    pub languages: usize,
    /// Templates per family in each Phase-1 set.
    pub phase1_per_family: usize,
    /// Templates per family in each multilingual Phase-2 set.
    pub phase2_per_family: usize,
    /// Held-out templates per family, rendered in every language.
    pub eval_per_family: usize,
    /// Templates per family in the drift prompt set (`L0` only).
    pub drift_per_family: usize,
    /// Number of content letters (`a`, `b`, ...), at most 26.
    pub letters: usize,
    /// Probability that a synthetic-language example keeps its instruction
    /// word in `L0`.
    pub scaffold_ratio: f64,
    /// Per-language surface suffixes; defaults to `~1..~k`.
    pub suffixes: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            languages: 2,
            phase1_per_family: 400,
            phase2_per_family: 400,
            eval_per_family: 40,
            drift_per_family: 20,
            letters: 12,
            scaffold_ratio: 0.0,
            suffixes: None,
            seed: 0,
        }
    }
}

/// Every dataset produced by [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub phase1_a: Dataset,
    pub phase1_b: Dataset,
    pub phase2_multi_a: Dataset,
    pub phase2_multi_b: Dataset,
    /// `phase2_multi_a` mapped back to `L0`, one example per template.
    pub english_counterpart: Dataset,
    pub eval_ta: Dataset,
    pub eval_la: Dataset,
    pub drift_prompts: Dataset,
}

impl Benchmark {
    pub fn all(&self) -> [&Dataset; 8] {
        [
            &self.phase1_a,
            &self.phase1_b,
            &self.phase2_multi_a,
            &self.phase2_multi_b,
            &self.english_counterpart,
            &self.eval_ta,
            &self.eval_la,
            &self.drift_prompts,
        ]
    }

    /// Writes `<id>.jsonl` for every dataset into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir.as_ref())?;
        for ds in self.all() {
            super::save_dataset(ds, dir.as_ref().join(format!("{}.jsonl", ds.id)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let get = |id: &str| super::load_dataset(dir.as_ref().join(format!("{id}.jsonl")));
        Ok(Self {
            phase1_a: get("phase1_A")?,
            phase1_b: get("phase1_B")?,
            phase2_multi_a: get("phase2_multi_A")?,
            phase2_multi_b: get("phase2_multi_B")?,
            english_counterpart: get("english_counterpart")?,
            eval_ta: get("eval_TA")?,
            eval_la: get("eval_LA")?,
            drift_prompts: get("drift_prompts")?,
        })
    }
}

const WORDS: [&str; 5] = ["copy", "reverse", "lookup", "sort", "extract"];
const PUNCT: [&str; 4] = ["=", ";", "?", "."];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// A task instance over `L0` tokens, independent of surface language.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Instance {
    instruction: Vec<&'static str>,
    input: Vec<&'static str>,
    output: Vec<&'static str>,
}

fn letters(n: usize) -> Vec<&'static str> {
    const ALL: [&str; 26] = [
        "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r", "s", "t", "u",
        "v", "w", "x", "y", "z",
    ];
    ALL[..n].to_vec()
}

/// The `L0` lexicon for a given letter count.
pub fn base_lexicon(n_letters: usize) -> Vec<&'static str> {
    let mut lex = letters(n_letters);
    lex.extend(DIGITS);
    lex.extend(WORDS);
    lex.extend(PUNCT);
    lex
}

fn pow(b: u128, e: u32) -> u128 {
    b.saturating_pow(e)
}

/// Number of distinct instances a family can produce.
fn capacity(family: TaskFamily, n: usize) -> u128 {
    let a = n as u128;
    match family {
        TaskFamily::Copy | TaskFamily::Reverse => (3..=5).map(|l| pow(a, l)).sum(),
        TaskFamily::KvLookup => {
            if n < 3 {
                0
            } else {
                a * (a - 1) * (a - 2) * pow(a, 3) * 3
            }
        }
        TaskFamily::SortDigits => (3..=5).map(|l| pow(10, l)).sum(),
        TaskFamily::ExtractFirst => 3 * (4..=6).map(|l| pow(a, l)).sum::<u128>(),
    }
}

fn sample_instance(family: TaskFamily, lets: &[&'static str], rng: &mut rng::LabRng) -> Instance {
    let pick = |rng: &mut rng::LabRng, pool: &[&'static str], len: usize| -> Vec<&'static str> {
        (0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    match family {
        TaskFamily::Copy | TaskFamily::Reverse => {
            let len = rng.random_range(3..=5);
            let xs = pick(rng, lets, len);
            let mut out = xs.clone();
            let word = if family == TaskFamily::Copy {
                "copy"
            } else {
                out.reverse();
                "reverse"
            };
            let mut input = xs;
            input.push(".");
            Instance {
                instruction: vec![word],
                input,
                output: out,
            }
        }
        TaskFamily::KvLookup => {
            let mut keys = lets.to_vec();
            keys.shuffle(rng);
            keys.truncate(3);
            let vals = pick(rng, lets, 3);
            let q = rng.random_range(0..3);
            let mut input = Vec::new();
            for i in 0..3 {
                if i > 0 {
                    input.push(";");
                }
                input.extend([keys[i], "=", vals[i]]);
            }
            input.extend(["?", keys[q], "."]);
            Instance {
                instruction: vec!["lookup"],
                input,
                output: vec![vals[q]],
            }
        }
        TaskFamily::SortDigits => {
            let len = rng.random_range(3..=5);
            let xs = pick(rng, &DIGITS, len);
            let mut out = xs.clone();
            out.sort();
            let mut input = xs;
            input.push(".");
            Instance {
                instruction: vec!["sort"],
                input,
                output: out,
            }
        }
        TaskFamily::ExtractFirst => {
            let m = rng.random_range(1..=3);
            let len = rng.random_range(4..=6);
            let xs = pick(rng, lets, len);
            let mut input = vec![DIGITS[m]];
            input.extend(&xs);
            input.push(".");
            Instance {
                instruction: vec!["extract"],
                input,
                output: xs[..m].to_vec(),
            }
        }
    }
}

struct Renderer {
    suffixes: Vec<String>,
    scaffold_ratio: f64,
    seed: u64,
}

impl Renderer {
    fn token(&self, t: &str, lang: Lang) -> String {
        format!("{t}{}", self.suffixes[lang.0 as usize])
    }

    fn text(&self, ts: &[&str], lang: Lang) -> String {
        ts.iter().map(|t| self.token(t, lang)).collect::<Vec<_>>().join(" ")
    }

    fn example(&self, inst: &Instance, family: TaskFamily, id: u64, lang: Lang) -> Example {
        let keep_scaffold = !lang.is_english() && self.scaffold_ratio > 0.0 && {
            let key = format!("{family}/{id}/{lang}");
            let h = rng::fnv1a(self.seed, key.as_bytes());
            ((h >> 11) as f64 / (1u64 << 53) as f64) < self.scaffold_ratio
        };
        let ilang = if keep_scaffold { Lang::EN } else { lang };
        Example {
            instruction: self.text(&inst.instruction, ilang),
            input: self.text(&inst.input, lang),
            output: self.text(&inst.output, lang),
            language: lang,
            task_family: family,
            template_id: id,
        }
    }
}

/// Maps one whitespace-tokenized `L0` text into language `lang` using the
/// default suffixes.
pub fn remap(text: &str, lang: Lang) -> String {
    let suffix = default_suffix(lang);
    text.split_whitespace()
        .map(|t| format!("{t}{suffix}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn default_suffix(lang: Lang) -> String {
    if lang.is_english() {
        String::new()
    } else {
        format!("~{}", lang.0)
    }
}

fn check_alphabets(lex: &[&str], suffixes: &[String]) -> Result<(), CorpusError> {
    let rendered: Vec<BTreeSet<String>> = suffixes
        .iter()
        .map(|s| lex.iter().map(|t| format!("{t}{s}")).collect())
        .collect();
    for i in 0..rendered.len() {
        for j in i + 1..rendered.len() {
            let shared: Vec<String> = rendered[i].intersection(&rendered[j]).take(5).cloned().collect();
            if !shared.is_empty() {
                return Err(CorpusError::OverlappingAlphabets {
                    a: Lang(i as u8),
                    b: Lang(j as u8),
                    tokens: shared,
                });
            }
        }
    }
    Ok(())
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.languages == 0 || self.languages > 200 {
            return Err(CorpusError::InvalidSpec("languages must be in 1..=200".into()));
        }
        if !(3..=26).contains(&self.letters) {
            return Err(CorpusError::InvalidSpec("letters must be in 3..=26".into()));
        }
        if !(0.0..=1.0).contains(&self.scaffold_ratio) {
            return Err(CorpusError::InvalidSpec("scaffold_ratio must be in [0, 1]".into()));
        }
        if self.phase1_per_family == 0 || self.phase2_per_family == 0 || self.eval_per_family == 0 {
            return Err(CorpusError::InvalidSpec("split sizes must be positive".into()));
        }
        if self.drift_per_family == 0 {
            return Err(CorpusError::InvalidSpec("drift_per_family must be positive".into()));
        }
        if let Some(s) = &self.suffixes {
            if s.len() != self.languages {
                return Err(CorpusError::InvalidSpec(format!(
                    "{} suffixes given for {} languages",
                    s.len(),
                    self.languages
                )));
            }
            if s.iter().any(|x| x.chars().any(char::is_whitespace)) {
                return Err(CorpusError::InvalidSpec("suffixes may not contain whitespace".into()));
            }
        }
        Ok(())
    }

    pub fn language_tags(&self) -> Vec<Lang> {
        (0..=self.languages).map(|i| Lang(i as u8)).collect()
    }

    fn all_suffixes(&self) -> Vec<String> {
        let mut v = vec![String::new()];
        match &self.suffixes {
            Some(s) => v.extend(s.iter().cloned()),
            None => v.extend((1..=self.languages).map(|i| default_suffix(Lang(i as u8)))),
        }
        v
    }

    pub fn per_family_total(&self) -> usize {
        self.phase1_per_family + self.phase2_per_family + self.eval_per_family + self.drift_per_family
    }
}

/// Template pools of one family, each a list of `(template_id, instance)`.
struct Pools {
    phase1: Vec<(u64, Instance)>,
    phase2: Vec<(u64, Instance)>,
    eval: Vec<(u64, Instance)>,
    drift: Vec<(u64, Instance)>,
}

fn family_pools(spec: &BenchmarkSpec, family: TaskFamily) -> Result<Pools, CorpusError> {
    let total = spec.per_family_total();
    let cap = capacity(family, spec.letters);
    if total as u128 > cap {
        return Err(CorpusError::CapacityExceeded {
            family,
            requested: total,
            capacity: cap,
        });
    }
    let lets = letters(spec.letters);
    let mut rng = rng::stream(spec.seed, &format!("corpus.synth.{family}"));
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(total);
    while all.len() < total {
        let inst = sample_instance(family, &lets, &mut rng);
        if seen.insert(inst.clone()) {
            all.push((all.len() as u64, inst));
        }
    }
    let mut it = all.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    Ok(Pools {
        phase1: take(spec.phase1_per_family),
        phase2: take(spec.phase2_per_family),
        eval: take(spec.eval_per_family),
        drift: take(spec.drift_per_family),
    })
}

fn finish(id: &str, mut examples: Vec<Example>, spec: &BenchmarkSpec) -> Dataset {
    examples.sort_by(|a, b| {
        (a.task_family, a.template_id, a.language).cmp(&(b.task_family, b.template_id, b.language))
    });
    Dataset::new(id, examples, spec.seed)
        .with_languages(spec.language_tags())
        .with_provenance("synth")
}

/// Generates the full benchmark. Pure in `spec`.
pub fn synth_generate(spec: &BenchmarkSpec) -> Result<Benchmark, CorpusError> {
    spec.validate()?;
    let suffixes = spec.all_suffixes();
    check_alphabets(&base_lexicon(spec.letters), &suffixes)?;
    let r = Renderer {
        suffixes,
        scaffold_ratio: spec.scaffold_ratio,
        seed: spec.seed,
    };
    let mut pools = BTreeMap::new();
    for f in TaskFamily::ALL {
        pools.insert(f, family_pools(spec, f)?);
    }
    let k = spec.languages;
    let in_l0 = |fams: &[TaskFamily], pick: fn(&Pools) -> &Vec<(u64, Instance)>| -> Vec<Example> {
        fams.iter()
            .flat_map(|&f| pick(&pools[&f]).iter().map(move |(id, i)| (f, *id, i)))
            .map(|(f, id, i)| r.example(i, f, id, Lang::EN))
            .collect()
    };
    // round-robin over L1..Lk across the concatenated family pools
    let multi = |fams: &[TaskFamily]| -> Vec<Example> {
        fams.iter()
            .flat_map(|&f| pools[&f].phase2.iter().map(move |(id, i)| (f, *id, i)))
            .enumerate()
            .map(|(n, (f, id, i))| r.example(i, f, id, Lang((1 + n % k) as u8)))
            .collect()
    };
    let all_langs: Vec<Example> = TaskFamily::ALL
        .iter()
        .flat_map(|&f| pools[&f].eval.iter().map(move |(id, i)| (f, *id, i)))
        .flat_map(|(f, id, i)| (1..=k).map(move |l| (f, id, i, Lang(l as u8))))
        .map(|(f, id, i, l)| r.example(i, f, id, l))
        .collect();

    Ok(Benchmark {
        phase1_a: finish("phase1_A", in_l0(&TaskFamily::SET_A, |p| &p.phase1), spec),
        phase1_b: finish("phase1_B", in_l0(&TaskFamily::SET_B, |p| &p.phase1), spec),
        phase2_multi_a: finish("phase2_multi_A", multi(&TaskFamily::SET_A), spec),
        phase2_multi_b: finish("phase2_multi_B", multi(&TaskFamily::SET_B), spec),
        english_counterpart: finish("english_counterpart", in_l0(&TaskFamily::SET_A, |p| &p.phase2), spec),
        eval_ta: finish("eval_TA", in_l0(&TaskFamily::ALL, |p| &p.eval), spec),
        eval_la: finish("eval_LA", all_langs, spec),
        drift_prompts: finish("drift_prompts", in_l0(&TaskFamily::ALL, |p| &p.drift), spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            languages: 2,
            phase1_per_family: 30,
            phase2_per_family: 31,
            eval_per_family: 10,
            drift_per_family: 4,
            seed: 5,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn remap_is_a_token_bijection() {
        let ex = "copy a b c";
        assert_eq!(remap(ex, Lang(1)), "copy~1 a~1 b~1 c~1");
        assert_eq!(remap(ex, Lang::EN), ex);
    }

    #[test]
    fn multilingual_split_is_balanced() {
        let b = synth_generate(&small()).unwrap();
        let h = &b.phase2_multi_a.metadata.language_histogram;
        assert_eq!(h.len(), 2);
        let (lo, hi) = (h.values().min().unwrap(), h.values().max().unwrap());
        assert!(hi - lo <= 1, "{h:?}");
        assert!(!h.contains_key(&Lang::EN));
    }

    #[test]
    fn families_follow_the_set_split() {
        let b = synth_generate(&small()).unwrap();
        let fams = |d: &Dataset| d.metadata.family_histogram.keys().copied().collect::<Vec<_>>();
        assert_eq!(fams(&b.phase1_a), TaskFamily::SET_A.to_vec());
        assert_eq!(fams(&b.phase1_b), TaskFamily::SET_B.to_vec());
        assert_eq!(fams(&b.phase2_multi_a), TaskFamily::SET_A.to_vec());
    }

    #[test]
    fn counterpart_is_parallel() {
        let b = synth_generate(&small()).unwrap();
        let keys: Vec<_> = b.phase2_multi_a.examples.iter().map(Example::key).collect();
        let en: Vec<_> = b.english_counterpart.examples.iter().map(Example::key).collect();
        assert_eq!(keys, en);
        for (m, e) in b.phase2_multi_a.examples.iter().zip(&b.english_counterpart.examples) {
            assert_eq!(remap(&e.output, m.language), m.output);
            assert_eq!(remap(&e.input, m.language), m.input);
        }
    }

    #[test]
    fn eval_templates_never_train() {
        let b = synth_generate(&small()).unwrap();
        let train: BTreeSet<_> = [&b.phase1_a, &b.phase1_b, &b.phase2_multi_a, &b.phase2_multi_b]
            .iter()
            .flat_map(|d| d.examples.iter().map(Example::key))
            .collect();
        for d in [&b.eval_ta, &b.eval_la] {
            assert!(d.examples.iter().all(|e| !train.contains(&e.key())));
        }
    }

    #[test]
    fn alphabets_are_disjoint() {
        let b = synth_generate(&small()).unwrap();
        let mut by_lang: BTreeMap<Lang, BTreeSet<String>> = BTreeMap::new();
        for d in b.all() {
            for e in &d.examples {
                let set = by_lang.entry(e.language).or_default();
                for t in [&e.instruction, &e.input, &e.output] {
                    set.extend(t.split_whitespace().map(str::to_string));
                }
            }
        }
        let langs: Vec<_> = by_lang.keys().copied().collect();
        for i in 0..langs.len() {
            for j in i + 1..langs.len() {
                assert!(by_lang[&langs[i]].is_disjoint(&by_lang[&langs[j]]));
            }
        }
    }

    #[test]
    fn gold_outputs_solve_the_task() {
        let b = synth_generate(&small()).unwrap();
        for e in &b.phase1_a.examples {
            let inp: Vec<&str> = e.input.split_whitespace().collect();
            let body = &inp[..inp.len() - 1];
            match e.task_family {
                TaskFamily::Copy => assert_eq!(e.output, body.join(" ")),
                TaskFamily::Reverse => {
                    let r: Vec<&str> = body.iter().rev().copied().collect();
                    assert_eq!(e.output, r.join(" "));
                }
                TaskFamily::KvLookup => {
                    let q = body[body.len() - 1];
                    let pos = [0, 4, 8].into_iter().find(|&i| body[i] == q).unwrap();
                    assert_eq!(e.output, body[pos + 2]);
                }
                _ => unreachable!(),
            }
        }
        for e in &b.phase1_b.examples {
            let inp: Vec<&str> = e.input.split_whitespace().collect();
            let body = &inp[..inp.len() - 1];
            match e.task_family {
                TaskFamily::SortDigits => {
                    let mut s = body.to_vec();
                    s.sort();
                    assert_eq!(e.output, s.join(" "));
                }
                TaskFamily::ExtractFirst => {
                    let m: usize = body[0].parse().unwrap();
                    assert_eq!(e.output, body[1..=m].join(" "));
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn scaffold_keeps_instruction_words_in_l0() {
        let spec = BenchmarkSpec {
            scaffold_ratio: 1.0,
            ..small()
        };
        let b = synth_generate(&spec).unwrap();
        assert!(b.phase2_multi_a.examples.iter().all(|e| !e.instruction.contains('~')));
        assert!(b.phase2_multi_a.examples.iter().all(|e| e.input.contains('~')));
    }

    #[test]
    fn errors() {
        let spec = BenchmarkSpec {
            suffixes: Some(vec!["~x".into(), "~x".into()]),
            ..small()
        };
        assert!(matches!(
            synth_generate(&spec),
            Err(CorpusError::OverlappingAlphabets { .. })
        ));
        let spec = BenchmarkSpec {
            suffixes: Some(vec!["".into(), "~2".into()]),
            ..small()
        };
        assert!(matches!(
            synth_generate(&spec),
            Err(CorpusError::OverlappingAlphabets { .. })
        ));
        let spec = BenchmarkSpec {
            letters: 3,
            phase1_per_family: 400,
            ..small()
        };
        assert!(matches!(
            synth_generate(&spec),
            Err(CorpusError::CapacityExceeded {
                family: TaskFamily::Copy,
                ..
            })
        ));
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_generate(&small()).unwrap(), synth_generate(&small()).unwrap());
    }
}
