//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 3 9`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error;
use std::path::{Path, PathBuf};
use std::time::Instant;
use std::{env, fs, process};

use cftlab::corpus::{synth_generate, Vocab};
use cftlab::drift::{self, ActivationSummary, Pooling};
use cftlab::engine::{self, attention_targets, merge_adapter, Checkpoint, LowRankAdapter, ModelConfig, ProjKind};
use cftlab::similarity::{des, mpd_with, normalize_mpd, Embedder, MpdMode, SampleSize};
use cftlab::strategies::{
    build_phase2_plan, execute_plan, lf_top_changed, Granularity, PlanInputs, Region, Strategy,
};
use cftlab::study::{CellMetrics, ExperimentConfig, Study, StudySummary};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn Error>>;

fn main() {
    let wanted: BTreeSet<u32> = env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut study: Option<Result<TimedStudy, String>> = None;
    let mut failed = 0;
    for n in 1..=10u32 {
        if !on(n) {
            continue;
        }
        let (name, outcome): (&str, Outcome) = match n {
            1 => ("gradient fidelity", gradient_fidelity()),
            2 => ("freeze invariance", freeze_invariance()),
            3 => ("metric algebra", metric_algebra()),
            4 => ("definition oracles", definition_oracles()),
            9 => ("adapter correctness", adapter_correctness()),
            10 => ("reproducibility", reproducibility()),
            _ => {
                let s = study.get_or_insert_with(|| full_study().map_err(|e| e.to_string()));
                let outcome = match s {
                    Err(e) => Err(format!("study failed: {e}").into()),
                    Ok(s) => match n {
                        5 => similarity_ordering(s),
                        6 => forgetting(s),
                        7 => mitigation(s),
                        _ => drift_direction(s),
                    },
                };
                let name = match n {
                    5 => "similarity ordering",
                    6 => "forgetting direction",
                    7 => "mitigation direction",
                    _ => "drift direction",
                };
                (name, outcome)
            }
        };
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!("criterion {n:>2} {name:<22} {}  {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        process::exit(1);
    }
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let (rel, abs) = common::gradient_check(0..10);
    let secs = t.elapsed().as_secs_f64();
    Ok((
        rel <= 1e-4 && secs < 60.0,
        format!("max rel err {rel:.2e} (abs {abs:.2e}) over 10 seeds in {secs:.1}s"),
    ))
}

fn freeze_invariance() -> Outcome {
    let cfg = ExperimentConfig::smoke();
    let bench = synth_generate(&cfg.benchmark)?;
    let vocab = Vocab::from_datasets(&bench.all());
    let model = ModelConfig {
        n_layers: 4,
        ..cfg.model.clone()
    };
    let base = Checkpoint::init(&model, &vocab, 0)?;
    let phase1 = engine::train_phase(&base, &bench.phase1_a, &cfg.phase1, None, None)?.checkpoint;
    let strategies = [
        Strategy::LfH1 { k: 2, seed: 3 },
        Strategy::LfH2 {
            k: 2,
            granularity: Granularity::PerKindPerHead,
        },
        Strategy::LfH2 {
            k: 1,
            granularity: Granularity::Layer,
        },
        Strategy::LfH2 {
            k: 3,
            granularity: Granularity::CombinedPool,
        },
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for strategy in strategies {
        let inputs = PlanInputs {
            base: Some(&base),
            phase1: Some(&phase1),
            ..PlanInputs::new(&bench.phase2_multi_a)
        };
        let plan = build_phase2_plan(strategy, &inputs)?;
        let mask = plan.freeze_mask.as_ref().ok_or("plan without a mask")?;
        let frozen = mask.tensor_names(&phase1.layout())?;
        let out = execute_plan(&plan, &phase1, &cfg.phase2)?.checkpoint;
        let (mut kept, mut moved) = (0, 0);
        for (name, t) in &out.tensors {
            let same = t.bits_eq(&phase1.tensors[name]);
            if frozen.contains(name) {
                pass &= same;
                kept += same as usize;
            } else {
                pass &= !same;
                moved += !same as usize;
            }
        }
        let label = match strategy {
            Strategy::LfH2 { granularity, .. } => format!("LF_H2 {granularity:?}"),
            other => other.label(),
        };
        details.push(format!(
            "{label}: {kept}/{} frozen kept, {moved}/{} trainable moved",
            frozen.len(),
            out.tensors.len() - frozen.len()
        ));
    }
    Ok((pass, details.join("; ")))
}

fn random_checkpoint(rng: &mut ChaCha8Rng, model: &ModelConfig, vocab: &Vocab) -> Result<Checkpoint, Box<dyn Error>> {
    let mut c = Checkpoint::init(model, vocab, rng.random())?;
    for t in c.tensors.values_mut() {
        let scale: f32 = rng.random_range(0.0..2.0);
        for v in &mut t.data {
            *v += scale * rng.random_range(-1.0..1.0f32);
        }
    }
    Ok(c)
}

fn tiny_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 8,
        vocab_size: vocab.len(),
        max_seq_len: 16,
    }
}

fn metric_algebra() -> Outcome {
    let bench = synth_generate(&ExperimentConfig::smoke().benchmark)?;
    let sets = bench.all();
    let mut des_err: f64 = 0.0;
    let mut des_self: f64 = 0.0;
    let mut des_max: f64 = 0.0;
    for emb in [Embedder::task_signature(), Embedder::hashed_ngram(5)] {
        for a in &sets {
            des_self = des_self.max((des(a, a, &emb, SampleSize::All, 0)? - 1.0).abs());
            for b in &sets {
                let ab = des(a, b, &emb, SampleSize::All, 0)?;
                let ba = des(b, a, &emb, SampleSize::All, 0)?;
                des_err = des_err.max((ab - ba).abs());
                des_max = des_max.max(ab.abs());
            }
        }
    }

    let vocab = Vocab::build(["a", "b", "c"]);
    let model = tiny_model(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mpd_ok = true;
    let mut worst_slack = f64::INFINITY;
    for i in 0..100 {
        let (a, mut b, c) = (
            random_checkpoint(&mut rng, &model, &vocab)?,
            random_checkpoint(&mut rng, &model, &vocab)?,
            random_checkpoint(&mut rng, &model, &vocab)?,
        );
        if i % 4 == 0 {
            // midpoint: the triangle inequality is tight
            for (name, t) in b.tensors.iter_mut() {
                for (k, v) in t.data.iter_mut().enumerate() {
                    *v = 0.5 * (a.tensors[name].data[k] + c.tensors[name].data[k]);
                }
            }
        }
        for mode in [MpdMode::TensorWise, MpdMode::ScalarWise] {
            let d = |x: &Checkpoint, y: &Checkpoint| mpd_with(x, y, mode);
            mpd_ok &= d(&a, &a)? == 0.0 && d(&b, &b)? == 0.0;
            mpd_ok &= d(&a, &b)? == d(&b, &a)? && d(&a, &c)? == d(&c, &a)?;
            for (x, y, z) in [(&a, &b, &c), (&b, &c, &a), (&c, &a, &b)] {
                let slack = d(x, y)? + d(y, z)? - d(x, z)?;
                worst_slack = worst_slack.min(slack);
                mpd_ok &= slack >= -1e-12;
            }
        }
    }

    let mut norm_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..10);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        if raw.iter().all(|x| *x == 0.0) {
            continue;
        }
        let normed = normalize_mpd(&raw)?;
        norm_ok &= normed.iter().copied().fold(0.0, f64::max) == 1.0;
    }
    let pass = des_err <= 1e-12 && des_self <= 1e-9 && des_max <= 1.0 + 1e-12 && mpd_ok && norm_ok;
    Ok((
        pass,
        format!(
            "DES asym {des_err:.1e}, |DES(D,D)-1| {des_self:.1e}, max|DES| {des_max:.6}; \
             MPD pseudometric on 100 triples {}, min triangle slack {worst_slack:.2e}; normalized max = 1 {}",
            if mpd_ok { "ok" } else { "violated" },
            if norm_ok { "ok" } else { "violated" }
        ),
    ))
}

fn cov_oracle(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    centred.transpose() * &centred / (n as f64 - 1.0)
}

fn max_gap(a: &[f64], b: &DMatrix<f64>) -> f64 {
    let d = b.ncols();
    a.iter()
        .enumerate()
        .map(|(k, v)| (v - b[(k / d, k % d)]).abs())
        .fold(0.0, f64::max)
}

fn random_pooled(rng: &mut ChaCha8Rng, n: usize, l: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| {
            (0..l)
                .map(|layer| (0..d).map(|j| rng.random_range(-1.0..1.0) * (1.0 + (layer + j) as f64 * 0.3)).collect())
                .collect()
        })
        .collect()
}

fn summary(name: &str, pooled: &[Vec<Vec<f64>>]) -> Result<ActivationSummary, Box<dyn Error>> {
    Ok(drift::summarize(name, "prompts", pooled, Pooling::PositionMean)?)
}

fn definition_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut cov_gap, mut global_gap, mut drift_gap, mut pca_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (n, l, d) = (rng.random_range(3..12), rng.random_range(2..6), rng.random_range(2..7));
        let pa = random_pooled(&mut rng, n, l, d);
        let pb = random_pooled(&mut rng, n, l, d);
        let (sa, sb) = (summary("a", &pa)?, summary("b", &pb)?);
        let layer_rows = |p: &[Vec<Vec<f64>>], layer: usize| p.iter().map(|r| r[layer].clone()).collect::<Vec<_>>();
        let means = |p: &[Vec<Vec<f64>>]| {
            (0..l)
                .map(|layer| {
                    let rows = layer_rows(p, layer);
                    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect()
                })
                .collect::<Vec<Vec<f64>>>()
        };
        for layer in 0..l {
            cov_gap = cov_gap.max(max_gap(&sa.per_layer_cov[layer], &cov_oracle(&layer_rows(&pa, layer))));
        }
        let (ga, gb) = (cov_oracle(&means(&pa)), cov_oracle(&means(&pb)));
        global_gap = global_gap.max(max_gap(&drift::global_cov(&sa)?, &ga));

        let report = drift::drift_norms(&sa, &sb)?;
        drift_gap = drift_gap.max((report.global_cov_diff - (&ga - &gb).norm()).abs());
        for layer in 0..l {
            let want = (cov_oracle(&layer_rows(&pa, layer)) - cov_oracle(&layer_rows(&pb, layer))).norm();
            drift_gap = drift_gap.max((report.per_layer_diff[layer] - want).abs());
        }

        if d >= 2 {
            let proj = drift::project2d(&[sa.clone(), sb.clone()])?;
            let stacked: Vec<Vec<f64>> = sa.x.iter().chain(&sb.x).cloned().collect();
            let eig = SymmetricEigen::new(cov_oracle(&stacked));
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
            let lead = eig.eigenvalues[order[0]].max(1e-300);
            if eig.eigenvalues[order[1]] <= 1e-6 * lead || (d > 2 && eig.eigenvalues[order[1]] - eig.eigenvalues[order[2]] <= 1e-6 * lead) {
                continue;
            }
            let projector = |cols: [Vec<f64>; 2]| {
                DMatrix::from_fn(d, d, |i, j| cols[0][i] * cols[0][j] + cols[1][i] * cols[1][j])
            };
            let want = projector([0, 1].map(|k| eig.eigenvectors.column(order[k]).iter().copied().collect()));
            let got = projector(proj.axes.clone());
            pca_gap = pca_gap.max((got - want).amax());
        }
    }

    let vocab = Vocab::build(["a", "b", "c"]);
    let model = ModelConfig {
        n_layers: 4,
        n_heads: 3,
        d_model: 12,
        ..tiny_model(&vocab)
    };
    let mut select_ok = true;
    for _ in 0..30 {
        let base = random_checkpoint(&mut rng, &model, &vocab)?;
        let phase1 = random_checkpoint(&mut rng, &model, &vocab)?;
        for (granularity, k) in [
            (Granularity::PerKindPerHead, rng.random_range(1..=6)),
            (Granularity::Layer, rng.random_range(1..=4)),
            (Granularity::CombinedPool, rng.random_range(1..=12)),
        ] {
            let got = lf_top_changed(&base, &phase1, k, granularity)?.regions;
            select_ok &= got == top_changed_oracle(&base, &phase1, k, granularity, &model);
        }
    }
    let pass = cov_gap <= 1e-12 && global_gap <= 1e-12 && drift_gap <= 1e-12 && pca_gap <= 1e-8 && select_ok;
    Ok((
        pass,
        format!(
            "per-layer cov {cov_gap:.1e}, global cov {global_gap:.1e}, drift norms {drift_gap:.1e}, \
             PCA projector {pca_gap:.1e}, top-changed selection {}",
            if select_ok { "identical" } else { "differs" }
        ),
    ))
}

/// Scores each region by the L2 norm of its parameter change, found by
/// tensor name, and keeps the top `k` of each pool.
fn top_changed_oracle(
    base: &Checkpoint,
    phase1: &Checkpoint,
    k: usize,
    granularity: Granularity,
    model: &ModelConfig,
) -> BTreeSet<Region> {
    let score = |prefix: &str| -> f64 {
        base.tensors
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .flat_map(|(name, t)| t.data.iter().zip(&phase1.tensors[name].data))
            .map(|(a, b)| (f64::from(*b) - f64::from(*a)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let proj_pool = |kind: ProjKind| -> Vec<(Region, f64)> {
        (0..model.n_layers)
            .flat_map(|l| (0..model.n_heads).map(move |h| (l, h)))
            .map(|(l, h)| (Region::proj(l, kind, h), score(&format!("layer{l}.head{h}.{kind}"))))
            .collect()
    };
    let pools: Vec<Vec<(Region, f64)>> = match granularity {
        Granularity::Layer => vec![(0..model.n_layers)
            .map(|l| (Region::layer(l), score(&format!("layer{l}."))))
            .collect()],
        Granularity::PerKindPerHead => ProjKind::ALL.iter().map(|&kind| proj_pool(kind)).collect(),
        Granularity::CombinedPool => vec![ProjKind::ALL.iter().flat_map(|&kind| proj_pool(kind)).collect()],
    };
    let mut out = BTreeSet::new();
    for mut pool in pools {
        pool.sort_by(|a, b| b.1.total_cmp(&a.1));
        out.extend(pool.iter().take(k).map(|e| e.0));
    }
    out
}

fn adapter_correctness() -> Outcome {
    let vocab = Vocab::build(["a", "b", "c", "d", "e"]);
    let model = ModelConfig {
        d_model: 12,
        ..tiny_model(&vocab)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut identity = true;
    for seed in 0..5 {
        let base = Checkpoint::init(&model, &vocab, seed)?;
        let mut ad = LowRankAdapter::new(&base, &attention_targets(&model), 3, 0.5, seed)?;
        for f in ad.factors.values_mut() {
            for v in f.a.data.iter_mut().chain(f.b.data.iter_mut()) {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let merged = merge_adapter(&base, &ad)?;
        let tokens: Vec<u32> = (0..10).map(|_| rng.random_range(0..vocab.len() as u32)).collect();
        let composed = engine::forward_with_adapter(&base, &ad, &tokens)?.logits;
        let direct = engine::forward(&merged, &tokens, false)?.logits;
        worst = composed.iter().zip(&direct).fold(worst, |m, (a, b)| m.max((a - b).abs()));

        for f in ad.factors.values_mut() {
            f.a.data.fill(0.0);
        }
        identity &= merge_adapter(&base, &ad)?.tensors_bit_equal(&base);
    }
    Ok((
        worst <= 1e-6 && identity,
        format!(
            "merged vs composed logits max gap {worst:.2e}; A=0 merge bit-identical {}",
            if identity { "yes" } else { "no" }
        ),
    ))
}

struct TimedStudy {
    summary: StudySummary,
    secs: f64,
    _dir: tempfile::TempDir,
}

impl TimedStudy {
    fn cell(&self, condition: &str, seed: u64) -> Result<&CellMetrics, Box<dyn Error>> {
        self.summary
            .cell(condition, seed)
            .ok_or_else(|| format!("missing cell {condition}/{seed}").into())
    }

    fn seeds(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.summary.cells.iter().map(|c| c.seed).collect();
        set.into_iter().collect()
    }

    /// Seeds where `pred` holds, out of all seeds.
    fn count(&self, pred: impl Fn(u64) -> Result<bool, Box<dyn Error>>) -> Result<(usize, usize), Box<dyn Error>> {
        let seeds = self.seeds();
        let mut hits = 0;
        for &s in &seeds {
            hits += pred(s)? as usize;
        }
        Ok((hits, seeds.len()))
    }
}

fn full_study() -> Result<TimedStudy, Box<dyn Error>> {
    eprintln!("running the paper-analog study (all conditions, 5 seeds)...");
    let dir = tempfile::tempdir()?;
    let t = Instant::now();
    let study = Study::new(&ExperimentConfig::paper_analog(), dir.path(), 1)?;
    let summary = study.run()?;
    Ok(TimedStudy {
        summary,
        secs: t.elapsed().as_secs_f64(),
        _dir: dir,
    })
}

fn similarity_ordering(s: &TimedStudy) -> Outcome {
    let mut des_hits = 0;
    let mut mpd_hits = 0;
    let mut rows = Vec::new();
    for seed in &s.summary.similarity {
        let find = |a: &str| {
            seed.reports
                .iter()
                .find(|r| r.a == a && r.b == "FT(phase2_multi_A)")
                .ok_or(format!("no {a} row for seed {}", seed.seed))
        };
        let (ra, rb) = (find("FT(phase1_A)")?, find("FT(phase1_B)")?);
        let (da, db) = (ra.des.unwrap_or(f64::NAN), rb.des.unwrap_or(f64::NAN));
        let (ma, mb) = (
            ra.mpd_normalized.unwrap_or(f64::NAN),
            rb.mpd_normalized.unwrap_or(f64::NAN),
        );
        des_hits += (da > db) as usize;
        mpd_hits += (ma < mb) as usize;
        rows.push(format!("s{}: DES {da:.3}>{db:.3} MPD {ma:.3}<{mb:.3}", seed.seed));
    }
    let n = s.summary.similarity.len();
    Ok((
        n == 5 && des_hits == n && mpd_hits == n,
        format!("DES {des_hits}/{n}, MPD {mpd_hits}/{n} [{}]", rows.join("; ")),
    ))
}

fn forgetting(s: &TimedStudy) -> Outcome {
    let (dis, n) = s.count(|seed| Ok(s.cell("B-none", seed)?.forgetting > s.cell("A-none", seed)?.forgetting))?;
    let (la, _) = s.count(|seed| {
        let c = s.cell("A-none", seed)?;
        Ok(c.la_phase2 > c.la_phase1)
    })?;
    let mean = |cond: &str, f: fn(&CellMetrics) -> f64| -> Result<f64, Box<dyn Error>> {
        let seeds = s.seeds();
        let mut total = 0.0;
        for &seed in &seeds {
            total += f(s.cell(cond, seed)?);
        }
        Ok(total / seeds.len() as f64)
    };
    Ok((
        dis >= 4 && la >= 4 && s.secs < 1800.0,
        format!(
            "dissimilar > similar forgetting {dis}/{n} (mean {:.3} vs {:.3}); similar LA up {la}/{n} \
             (mean {:.3} -> {:.3}); study took {:.0}s",
            mean("B-none", |c| c.forgetting)?,
            mean("A-none", |c| c.forgetting)?,
            mean("A-none", |c| c.la_phase1)?,
            mean("A-none", |c| c.la_phase2)?,
            s.secs
        ),
    ))
}

fn mitigation(s: &TimedStudy) -> Outcome {
    let seeds = s.seeds();
    let mean = |cond: &str, f: fn(&CellMetrics) -> f64| -> Result<f64, Box<dyn Error>> {
        let mut total = 0.0;
        for &seed in &seeds {
            total += f(s.cell(cond, seed)?);
        }
        Ok(total / seeds.len() as f64)
    };
    let plain_la = mean("B-none", |c| c.la_phase2)?;
    let mut pass = true;
    let mut details = Vec::new();
    for cond in ["B-GR_10", "B-LF_H2"] {
        let (hits, n) = s.count(|seed| Ok(s.cell(cond, seed)?.forgetting < s.cell("B-none", seed)?.forgetting))?;
        let la = mean(cond, |c| c.la_phase2)?;
        pass &= hits >= 4 && (la - plain_la).abs() <= 0.05;
        details.push(format!(
            "{cond}: less forgetting {hits}/{n} (mean {:.3} vs {:.3}), LA {la:.3} vs {plain_la:.3}",
            mean(cond, |c| c.forgetting)?,
            mean("B-none", |c| c.forgetting)?
        ));
    }
    Ok((pass, details.join("; ")))
}

fn drift_direction(s: &TimedStudy) -> Outcome {
    let (dis, n) = s.count(|seed| Ok(s.cell("B-none", seed)?.drift_mean > s.cell("A-none", seed)?.drift_mean))?;
    let mut pass = dis >= 4;
    let mut details = vec![format!("dissimilar > similar {dis}/{n}")];
    for cond in ["B-GR_10", "B-LF_H2"] {
        let (hits, _) = s.count(|seed| Ok(s.cell(cond, seed)?.drift_mean < s.cell("B-none", seed)?.drift_mean))?;
        pass &= hits >= 4;
        details.push(format!("{cond} lowers drift {hits}/{n}"));
    }
    Ok((pass, details.join("; ")))
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, Box<dyn Error>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "svg" | "cftl")) {
                out.insert(path.strip_prefix(root)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn reproducibility() -> Outcome {
    eprintln!("running the paper-analog preset twice for seed 0...");
    let cfg = ExperimentConfig {
        seeds: vec![0],
        ..ExperimentConfig::paper_analog()
    };
    let mut trees = Vec::new();
    let mut summaries = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let summary = Study::new(&cfg, dir.path(), 1)?.run()?;
        let tables: Vec<Vec<u8>> = ["summary.csv", "summary_by_seed.csv", "similarity.csv"]
            .iter()
            .map(|f| fs::read(summary.root.join(f)))
            .collect::<Result<_, _>>()?;
        summaries.push(tables);
        trees.push(files_under(&summary.root)?);
    }
    let tables_equal = summaries[0] == summaries[1];
    let differing: Vec<String> = trees[0]
        .iter()
        .filter(|(p, bytes)| trees[1].get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let same_set = trees[0].len() == trees[1].len();

    let tmp = tempfile::tempdir()?;
    let mut roundtrip = true;
    let mut checked = 0;
    for (path, bytes) in trees[0].iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "cftl")) {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let file = tmp.path().join("copy.cftl");
        ckpt.save(&file)?;
        let back = Checkpoint::load(&file)?;
        roundtrip &= back.tensors_bit_equal(&ckpt) && back.to_bytes() == *bytes && fs::read(&file)? == *bytes;
        if !roundtrip {
            return Ok((false, format!("checkpoint {} does not round-trip", path.display())));
        }
        checked += 1;
    }
    Ok((
        tables_equal && differing.is_empty() && same_set && roundtrip,
        format!(
            "summary CSVs identical {}; {} of {} artifacts differ{}; {checked} checkpoints round-trip bit-exact",
            if tables_equal { "yes" } else { "no" },
            differing.len(),
            trees[0].len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" ({})", differing.join(", "))
            }
        ),
    ))
}

