//! Zero-shot task-ability and language-ability evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, Lang, TaskFamily};
use crate::engine::{encode_prompt, Checkpoint, Decode, EngineError, Generator};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("suite {suite}: tokens not in the model vocabulary: {tokens:?}")]
    VocabularyMismatch { suite: String, tokens: Vec<String> },
    #[error("suite {0} is empty")]
    EmptySuite(String),
    #[error("suite sets differ: {0:?}")]
    SuiteMismatch(Vec<String>),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn counts<'a>(toks: &[&'a str]) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for t in toks {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

fn f1(overlap: usize, np: usize, ng: usize) -> f64 {
    match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / np as f64;
            let r = overlap as f64 / ng as f64;
            2.0 * p * r / (p + r)
        }
    }
}

/// Harmonic mean of multiset precision and recall.
pub fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    let mut remaining = counts(gold);
    let mut overlap = 0;
    for t in pred {
        if let Some(c) = remaining.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1(overlap, pred.len(), gold.len())
}

/// Unigram-overlap F1 with counts clipped to the reference.
pub fn rouge1(pred: &[&str], gold: &[&str]) -> f64 {
    let (cp, cg) = (counts(pred), counts(gold));
    let overlap = cp.iter().map(|(t, n)| (*n).min(cg.get(t).copied().unwrap_or(0))).sum();
    f1(overlap, pred.len(), gold.len())
}

pub fn exact_match(pred: &[&str], gold: &[&str]) -> f64 {
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    TokenF1,
    Rouge1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::ExactMatch, Metric::TokenF1, Metric::Rouge1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ExactMatch => "exact_match",
            Metric::TokenF1 => "token_f1",
            Metric::Rouge1 => "rouge1",
        }
    }

    pub fn for_family(family: TaskFamily) -> Metric {
        match family {
            TaskFamily::ExtractFirst => Metric::Rouge1,
            _ => Metric::ExactMatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuite {
    pub id: String,
    pub examples: Vec<Example>,
    pub language: Lang,
    pub family: TaskFamily,
    pub primary: Metric,
}

/// One suite per `(language, family)` cell of `ds`, ids like `L1/copy`.
pub fn suites_from(ds: &Dataset) -> Vec<EvalSuite> {
    ds.cells()
        .into_iter()
        .map(|(language, family)| EvalSuite {
            id: format!("{language}/{family}"),
            examples: ds
                .examples
                .iter()
                .filter(|e| e.language == language && e.task_family == family)
                .cloned()
                .collect(),
            language,
            family,
            primary: Metric::for_family(family),
        })
        .collect()
}

/// Produces a whitespace-tokenized response to a zero-shot prompt.
pub trait Responder {
    fn id(&self) -> String;
    /// Surface tokens absent from the responder's vocabulary.
    fn unknown_tokens(&self, ex: &Example) -> Vec<String>;
    fn respond(&self, ex: &Example) -> Result<String, EvalError>;
    fn decode(&self) -> Decode;
}

/// Greedy or top-k generation from a checkpoint.
pub struct ModelResponder<'a> {
    ckpt: &'a Checkpoint,
    generator: Generator,
    decode: Decode,
    max_new: usize,
    id: String,
}

impl<'a> ModelResponder<'a> {
    pub fn new(ckpt: &'a Checkpoint, decode: Decode, max_new: usize) -> Result<Self, EvalError> {
        Ok(Self {
            generator: Generator::new(ckpt)?,
            ckpt,
            decode,
            max_new,
            id: ckpt.id(),
        })
    }
}

impl Responder for ModelResponder<'_> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn unknown_tokens(&self, ex: &Example) -> Vec<String> {
        let v = &self.ckpt.vocab;
        [&ex.instruction, &ex.input, &ex.output]
            .iter()
            .flat_map(|s| v.tokenize(s).unknown_tokens)
            .collect()
    }

    fn respond(&self, ex: &Example) -> Result<String, EvalError> {
        let prompt = encode_prompt(&self.ckpt.vocab, ex)?;
        let out = self.generator.generate(&prompt, self.decode, self.max_new)?;
        Ok(self.ckpt.vocab.detokenize(&out))
    }

    fn decode(&self) -> Decode {
        self.decode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScore {
    pub id: String,
    pub language: Lang,
    pub family: TaskFamily,
    pub primary: Metric,
    pub n: usize,
    pub exact_match: f64,
    pub token_f1: f64,
    pub rouge1: f64,
}

impl SuiteScore {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::ExactMatch => self.exact_match,
            Metric::TokenF1 => self.token_f1,
            Metric::Rouge1 => self.rouge1,
        }
    }

    pub fn score(&self) -> f64 {
        self.get(self.primary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub suites: Vec<SuiteScore>,
    /// Mean primary score over `L0` suites.
    pub ta: Option<f64>,
    /// Mean primary score over `L1..Lk` suites.
    pub la: Option<f64>,
    pub la_by_language: BTreeMap<Lang, f64>,
    pub decode: Decode,
    pub timestamp: String,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

impl EvalReport {
    pub fn from_scores(model_id: String, suites: Vec<SuiteScore>, decode: Decode) -> Self {
        let ta = mean(suites.iter().filter(|s| s.language.is_english()).map(SuiteScore::score));
        let la = mean(suites.iter().filter(|s| !s.language.is_english()).map(SuiteScore::score));
        let langs: BTreeSet<Lang> = suites.iter().map(|s| s.language).filter(|l| !l.is_english()).collect();
        let la_by_language = langs
            .into_iter()
            .filter_map(|l| mean(suites.iter().filter(|s| s.language == l).map(SuiteScore::score)).map(|m| (l, m)))
            .collect();
        Self {
            model_id,
            suites,
            ta,
            la,
            la_by_language,
            decode,
            timestamp: unix_timestamp(),
        }
    }

    pub fn suite(&self, id: &str) -> Option<&SuiteScore> {
        self.suites.iter().find(|s| s.id == id)
    }

    /// `suite,language,family,metric,score` rows, then aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,language,family,metric,score\n");
        for sc in &self.suites {
            for m in Metric::ALL {
                let _ = writeln!(s, "{},{},{},{},{:.6}", sc.id, sc.language, sc.family, m.name(), sc.get(m));
            }
        }
        if let Some(ta) = self.ta {
            let _ = writeln!(s, "TA,L0,all,primary,{ta:.6}");
        }
        for (l, v) in &self.la_by_language {
            let _ = writeln!(s, "LA,{l},all,primary,{v:.6}");
        }
        if let Some(la) = self.la {
            let _ = writeln!(s, "LA,all,all,primary,{la:.6}");
        }
        s
    }
}

/// Scores every suite zero-shot. Tokens outside the responder's vocabulary
/// are reported before any generation runs.
pub fn evaluate(responder: &dyn Responder, suites: &[EvalSuite]) -> Result<EvalReport, EvalError> {
    for s in suites {
        if s.examples.is_empty() {
            return Err(EvalError::EmptySuite(s.id.clone()));
        }
        let unknown: BTreeSet<String> = s.examples.iter().flat_map(|e| responder.unknown_tokens(e)).collect();
        if !unknown.is_empty() {
            return Err(EvalError::VocabularyMismatch {
                suite: s.id.clone(),
                tokens: unknown.into_iter().collect(),
            });
        }
    }
    let mut scores = Vec::with_capacity(suites.len());
    for s in suites {
        let (mut em, mut f, mut r) = (0.0, 0.0, 0.0);
        for ex in &s.examples {
            let pred = responder.respond(ex)?;
            let p: Vec<&str> = pred.split_whitespace().collect();
            let g: Vec<&str> = ex.output.split_whitespace().collect();
            em += exact_match(&p, &g);
            f += token_f1(&p, &g);
            r += rouge1(&p, &g);
        }
        let n = s.examples.len() as f64;
        scores.push(SuiteScore {
            id: s.id.clone(),
            language: s.language,
            family: s.family,
            primary: s.primary,
            n: s.examples.len(),
            exact_match: em / n,
            token_f1: f / n,
            rouge1: r / n,
        });
    }
    Ok(EvalReport::from_scores(responder.id(), scores, responder.decode()))
}

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    suites: &[EvalSuite],
    decode: Decode,
    max_new: usize,
) -> Result<EvalReport, EvalError> {
    evaluate(&ModelResponder::new(ckpt, decode, max_new)?, suites)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Improve,
    Decline,
    Unchanged,
}

impl Change {
    pub fn of(delta: f64) -> Change {
        if delta > 0.0 {
            Change::Improve
        } else if delta < 0.0 {
            Change::Decline
        } else {
            Change::Unchanged
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Change::Improve => "improve",
            Change::Decline => "decline",
            Change::Unchanged => "unchanged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub id: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    pub change: Change,
}

impl DeltaRow {
    fn new(id: impl Into<String>, before: f64, after: f64) -> Self {
        let delta = after - before;
        Self {
            id: id.into(),
            before,
            after,
            delta,
            change: Change::of(delta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub suites: Vec<DeltaRow>,
    pub ta: Option<DeltaRow>,
    pub la: Option<DeltaRow>,
    /// `TA(before) - TA(after)`.
    pub forgetting: Option<f64>,
}

pub fn compare(phase1: &EvalReport, phase2: &EvalReport) -> Result<Comparison, EvalError> {
    let a: BTreeSet<&str> = phase1.suites.iter().map(|s| s.id.as_str()).collect();
    let b: BTreeSet<&str> = phase2.suites.iter().map(|s| s.id.as_str()).collect();
    if a != b {
        return Err(EvalError::SuiteMismatch(
            a.symmetric_difference(&b).map(|s| s.to_string()).collect(),
        ));
    }
    let suites = phase1
        .suites
        .iter()
        .map(|s| DeltaRow::new(&s.id, s.score(), phase2.suite(&s.id).expect("same ids").score()))
        .collect();
    let agg = |x: Option<f64>, y: Option<f64>, id: &str| match (x, y) {
        (Some(x), Some(y)) => Some(DeltaRow::new(id, x, y)),
        _ => None,
    };
    Ok(Comparison {
        suites,
        ta: agg(phase1.ta, phase2.ta, "TA"),
        la: agg(phase1.la, phase2.la, "LA"),
        forgetting: phase1.ta.zip(phase2.ta).map(|(x, y)| x - y),
    })
}

impl Comparison {
    /// Side-by-side table; the aggregate rows average the suites' primary
    /// metrics, which mixes metric types.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,phase1,phase2,delta,change\n");
        for r in self.suites.iter().chain(&self.ta).chain(&self.la) {
            let _ = writeln!(s, "{},{:.6},{:.6},{:+.6},{}", r.id, r.before, r.after, r.delta, r.change.name());
        }
        if let Some(f) = self.forgetting {
            let _ = writeln!(s, "forgetting,,,{f:+.6},");
        }
        s.push_str("# TA and LA average the primary metric of each suite (exact match or rouge1)\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn metric_examples() {
        assert!((token_f1(&w("a b c"), &w("a b d")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1(&w("a b"), &w("a b")), 1.0);
        assert!((token_f1(&w("a a b"), &w("a b")) - 0.8).abs() < 1e-15);
        assert_eq!(token_f1(&[], &[]), 1.0);
        assert_eq!(token_f1(&w("a"), &[]), 0.0);
        assert_eq!(rouge1(&w("x y"), &w("x y")), 1.0);
        assert_eq!(rouge1(&w("x y"), &w("p q")), 0.0);
        assert_eq!(rouge1(&w("x y"), &w("x z")), 0.5);
        assert_eq!(exact_match(&w("a b"), &w("a b")), 1.0);
        assert_eq!(exact_match(&w("b a"), &w("a b")), 0.0);
    }

    /// Answers with the prompt input minus its final `.`.
    struct Echo;

    impl Responder for Echo {
        fn id(&self) -> String {
            "echo".into()
        }
        fn unknown_tokens(&self, ex: &Example) -> Vec<String> {
            ex.input.split_whitespace().filter(|t| t.contains('!')).map(String::from).collect()
        }
        fn respond(&self, ex: &Example) -> Result<String, EvalError> {
            let t: Vec<&str> = ex.input.split_whitespace().collect();
            Ok(t[..t.len().saturating_sub(1)].join(" "))
        }
        fn decode(&self) -> Decode {
            Decode::Greedy
        }
    }

    fn dataset() -> Dataset {
        let b = crate::corpus::synth_generate(&crate::corpus::BenchmarkSpec {
            phase1_per_family: 5,
            phase2_per_family: 5,
            eval_per_family: 6,
            drift_per_family: 2,
            ..Default::default()
        })
        .unwrap();
        let mut ex = b.eval_ta.examples.clone();
        ex.extend(b.eval_la.examples.iter().cloned());
        Dataset::new("all", ex, 0)
    }

    #[test]
    fn echo_solves_copy() {
        let suites = suites_from(&dataset());
        let r = evaluate(&Echo, &suites).unwrap();
        assert_eq!(r.suite("L0/copy").unwrap().exact_match, 1.0);
        assert_eq!(r.suite("L2/copy").unwrap().exact_match, 1.0);
        assert!(r.suite("L0/reverse").unwrap().exact_match < 1.0);
        let ta = mean(r.suites.iter().filter(|s| s.language == Lang::EN).map(|s| s.score())).unwrap();
        assert!((r.ta.unwrap() - ta).abs() < 1e-12);
        let la = mean(r.la_by_language.values().copied()).unwrap();
        assert!((r.la.unwrap() - la).abs() < 1e-12);
        let again = evaluate(&Echo, &suites).unwrap();
        assert_eq!(r.suites, again.suites);
    }

    #[test]
    fn unknown_tokens_are_listed() {
        let mut suites = suites_from(&dataset());
        suites[0].examples[0].input = "a! b .".into();
        match evaluate(&Echo, &suites) {
            Err(EvalError::VocabularyMismatch { tokens, .. }) => assert_eq!(tokens, vec!["a!".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    fn report(ta: f64, la: f64) -> EvalReport {
        let s = |id: &str, lang, v| SuiteScore {
            id: id.into(),
            language: Lang(lang),
            family: TaskFamily::Copy,
            primary: Metric::ExactMatch,
            n: 1,
            exact_match: v,
            token_f1: v,
            rouge1: v,
        };
        EvalReport::from_scores("m".into(), vec![s("L0/copy", 0, ta), s("L1/copy", 1, la)], Decode::Greedy)
    }

    #[test]
    fn comparison_examples() {
        let same = compare(&report(0.5, 0.5), &report(0.5, 0.5)).unwrap();
        assert!(same.suites.iter().all(|r| r.delta == 0.0));
        let c = compare(&report(0.8, 0.2), &report(0.6, 0.5)).unwrap();
        assert!((c.forgetting.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(c.ta.as_ref().unwrap().change, Change::Decline);
        let la = c.la.unwrap();
        assert!((la.delta - 0.3).abs() < 1e-12);
        assert_eq!(la.change, Change::Improve);
        let mut other = report(0.1, 0.1);
        other.suites.pop();
        assert!(matches!(compare(&report(0.1, 0.1), &other), Err(EvalError::SuiteMismatch(_))));
    }
}
