//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Golden report layouts live in `tests/fixtures/report_layout.txt`; set
//! `THINSLICE_UPDATE_GOLDEN=1` to regenerate them after an intended change.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use thinslice::config::RunConfig;
use thinslice::corpus::{binarize, registry, Corpus, SignalType, SliceKey};
use thinslice::ensemble::{
    ensemble_evaluate, evaluate_fold, l1_logistic_fit, logo_folds, penalized_logistic_fit, task_matrix, CdOptions,
    EnsembleOptions, Penalty,
};
use thinslice::fixture::write_fixture;
use thinslice::inference::{
    read_journal, run_experiment, ParseStatus, PredictionRecord, RunOptions, JOURNAL_FILE, PREDICTIONS_FILE,
};
use thinslice::metrics::{balanced_accuracy, correctness_matrix, parity_ratio, Confusion};
use thinslice::mixedglm::{
    fit_binomial_glmm, logistic_irls, odds_ratio_row, odds_ratio_table, Coding, GlmmData, GlmmSpec, OrSort,
};
use thinslice::promptkit::{
    compile_prompt, render_transcript, valid_configurations, BankThresholds, Configuration, FewShotBank,
    PromptCompiler, PromptStrategy,
};
use thinslice::report::{build_report, Analysis, ReportBundle, ReportInputs, ReportOptions};
use thinslice::stats::{chi_squared_independence, fisher_exact_2x2, mann_whitney_u, significance_stars, MwMode};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// Shared fixture study

struct Study {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    corpus: Corpus,
    configs: Vec<Configuration>,
    records: Vec<PredictionRecord>,
    run_dirs: [PathBuf; 2],
    bundles: [ReportBundle; 2],
    run_time: Duration,
}

fn report(study_cfg: &RunConfig, corpus: &Corpus, records: &[PredictionRecord]) -> ReportBundle {
    let configs = study_cfg.selected_configs().unwrap();
    let tasks = study_cfg.selected_tasks().unwrap();
    let lexicon = study_cfg.load_lexicon().unwrap();
    let inputs = ReportInputs {
        corpus,
        records,
        configs: &configs,
        tasks: &tasks,
        lexicon: lexicon.as_ref(),
        options: ReportOptions {
            q: study_cfg.analysis.q,
            lambda: study_cfg.analysis.lambda,
            penalty: study_cfg.analysis.penalty,
        },
    };
    build_report(&inputs, &Analysis::ALL).unwrap()
}

fn study() -> Study {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_fixture(dir.path(), 7).unwrap();
    let cfg = RunConfig::load(&paths.config).unwrap();
    assert!(cfg.validate().is_clean());
    let corpus = cfg.load_corpus().unwrap();
    let configs = cfg.selected_configs().unwrap();
    let tasks = cfg.selected_tasks().unwrap();
    let compiler = cfg.build_compiler(&corpus, &configs).unwrap();
    let backends = cfg.build_backends(&configs).unwrap();
    let mut records = Vec::new();
    let mut bundles = Vec::new();
    let mut run_dirs = Vec::new();
    for mif in [1, 8] {
        let run_dir = dir.path().join(format!("run_{mif}"));
        std::fs::create_dir_all(&run_dir).unwrap();
        let options = RunOptions {
            max_in_flight: mif,
            max_new_keys: None,
        };
        let summary = run_experiment(&corpus, &configs, &tasks, &backends, &compiler, &run_dir, &options).unwrap();
        bundles.push(report(&cfg, &corpus, &summary.records));
        records = summary.records;
        run_dirs.push(run_dir);
    }
    Study {
        _dir: dir,
        cfg,
        corpus,
        configs,
        records,
        run_dirs: run_dirs.try_into().unwrap(),
        bundles: bundles.try_into().unwrap(),
        run_time: start.elapsed(),
    }
}

// ---------------------------------------------------------------------------
// 1. Configuration matrix

fn configuration_matrix(s: &Study) -> Outcome {
    let start = Instant::now();
    let ids: Vec<String> = valid_configurations().iter().map(Configuration::config_id).collect();
    let expected = [
        "FLAN-ZS", "FLAN-FS", "Gemma-ZS", "Gemma-FS", "Gemma-COT", "LLaMA-ZS", "LLaMA-FS", "LLaMA-COT", "LLaMA-FSCOT",
    ];
    ensure!(ids == expected, "valid configurations {ids:?}");
    let slice = &s.corpus.slices[0];
    let task = &registry()[0];
    let bank = FewShotBank::from_corpus(&s.corpus, &BankThresholds::default());
    let mut rejected = Vec::new();
    for id in ["FLAN-COT", "FLAN-FSCOT", "Gemma-FSCOT"] {
        let config: Configuration = id.parse().map_err(|e| format!("{id}: {e}"))?;
        ensure!(!config.is_valid(), "{id} reported valid");
        ensure!(compile_prompt(config, task, slice, Some(&bank), 1).is_err(), "{id} compiled");
        rejected.push(id);
    }
    for c in valid_configurations() {
        compile_prompt(c, task, slice, Some(&bank), 1).map_err(|e| format!("{c}: {e}"))?;
    }
    let strategies = PromptStrategy::ALL.len() * 3;
    ensure!(strategies - rejected.len() == ids.len(), "matrix is not 12 minus 3");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("9 configurations, {} excluded pairs rejected, {elapsed:.1?}", rejected.len()))
}

// ---------------------------------------------------------------------------
// 2. Binarization

fn binarization(_: &Study) -> Outcome {
    let mut checked = 0;
    for task in registry() {
        for raw in 1..=6 {
            let expected = match task.signal_type {
                SignalType::TypeI => u8::from(raw >= 4),
                SignalType::TypeII => u8::from(raw >= 2),
            };
            let got = binarize(task, f64::from(raw)).map_err(|e| e.to_string())?;
            ensure!(got == expected, "{} raw {raw}: got {got}, want {expected}", task.signal_id);
            checked += 1;
        }
        ensure!(binarize(task, 0.0).is_err() && binarize(task, 7.0).is_err(), "out-of-range accepted");
    }
    let types: BTreeSet<_> = registry().iter().map(|t| t.signal_type).collect();
    ensure!(types.len() == 2, "registry covers one signal type only");
    Ok(format!("{checked} (task, score) pairs over both signal types"))
}

// ---------------------------------------------------------------------------
// 3. End-to-end determinism

fn determinism(s: &Study) -> Outcome {
    ensure!(s.corpus.slices.len() >= 56, "only {} slices", s.corpus.slices.len());
    let expected_labels = s.corpus.slices.len() * registry().len();
    ensure!(s.corpus.labels.len() == expected_labels, "label coverage {}", s.corpus.labels.len());
    let [a, b] = &s.run_dirs;
    let pa = std::fs::read(a.join(PREDICTIONS_FILE)).map_err(|e| e.to_string())?;
    let pb = std::fs::read(b.join(PREDICTIONS_FILE)).map_err(|e| e.to_string())?;
    ensure!(pa == pb, "sorted prediction files differ");
    let sorted = |dir: &Path| -> Result<Vec<u8>, String> {
        let records = read_journal(dir.join(JOURNAL_FILE)).map_err(|e| e.to_string())?;
        thinslice::report::canonical_predictions(&records).map_err(|e| e.to_string())
    };
    ensure!(sorted(a)? == sorted(b)?, "journals differ after sorting");
    let [ra, rb] = &s.bundles;
    ensure!(ra.artifacts == rb.artifacts, "report bundles differ");
    ensure!(s.run_time < Duration::from_secs(120), "took {:?}", s.run_time);
    Ok(format!(
        "{} slices, {} records, {} report files identical at max_in_flight 1 and 8, {:.1?}",
        s.corpus.slices.len(),
        s.records.len(),
        ra.artifacts.len(),
        s.run_time
    ))
}

// ---------------------------------------------------------------------------
// 4. Statistics oracles

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Two-sided Fisher p by summing every table no more likely than the observed.
fn fisher_oracle(t: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = t;
    let (r1, c1, n) = (a + b, a + c, a + b + c + d);
    let pmf = |x: u64| choose(r1, x) * choose(n - r1, c1 - x) / choose(n, c1);
    let observed = pmf(a);
    let lo = c1.saturating_sub(n - r1);
    (lo..=r1.min(c1)).map(pmf).filter(|&p| p <= observed * (1.0 + 1e-9)).sum()
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn statistics(_: &Study) -> Outcome {
    let f = fisher_exact_2x2([[3, 1], [1, 3]]).map_err(|e| e.to_string())?;
    let oracle = fisher_oracle([[3, 1], [1, 3]]);
    ensure!(close(f.p_value, 0.4857, 1e-3), "Fisher p {}", f.p_value);
    ensure!(close(f.p_value, oracle, 1e-9), "Fisher p {} vs oracle {oracle}", f.p_value);

    let mut cases = 0;
    for n in 2..=10usize {
        for nx in 1..n {
            let all = subsets(n, nx);
            let u_of = |xs: &[usize]| xs.iter().map(|&i| (i + 1) as f64).sum::<f64>() - (nx * (nx + 1)) as f64 / 2.0;
            let us: Vec<f64> = all.iter().map(|xs| u_of(xs)).collect();
            for xs in &all {
                let u = u_of(xs);
                let lower = us.iter().filter(|&&v| v <= u).count() as f64;
                let upper = us.iter().filter(|&&v| v >= u).count() as f64;
                let oracle = (2.0 * lower.min(upper) / us.len() as f64).min(1.0);
                let x: Vec<f64> = xs.iter().map(|&i| i as f64).collect();
                let y: Vec<f64> = (0..n).filter(|i| !xs.contains(i)).map(|i| i as f64).collect();
                let mw = mann_whitney_u(&x, &y, MwMode::Exact).map_err(|e| e.to_string())?;
                ensure!(close(mw.result.p_value, oracle, 1e-9), "MW {x:?} vs {y:?}: {} vs {oracle}", mw.result.p_value);
                cases += 1;
            }
        }
    }

    let chi = chi_squared_independence(&[vec![10.0, 20.0], vec![20.0, 10.0]]).map_err(|e| e.to_string())?;
    ensure!(close(chi.statistic, 6.6667, 1e-3), "chi2 {}", chi.statistic);
    for t in [
        vec![vec![1.0, 2.0], vec![2.0, 4.0]],
        vec![vec![3.0, 6.0, 9.0], vec![1.0, 2.0, 3.0]],
        vec![vec![5.0, 5.0], vec![5.0, 5.0], vec![10.0, 10.0]],
    ] {
        let r = chi_squared_independence(&t).map_err(|e| e.to_string())?;
        ensure!(r.statistic.abs() < 1e-12, "proportional table gives {}", r.statistic);
    }
    Ok(format!(
        "Fisher p {:.4}, {cases} tie-free Mann-Whitney cases exact, chi2 {:.4}",
        f.p_value, chi.statistic
    ))
}

// ---------------------------------------------------------------------------
// 5. GLMM

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn glmm(_: &Study) -> Outcome {
    let start = Instant::now();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(60..160);
        let levels = rng.random_range(2..5usize);
        let mut data = GlmmData::new(&["fixed", "r1", "r2"]);
        let mut rows = Vec::new();
        for i in 0..n {
            let l = i % levels;
            let y = rng.random::<f64>() < 0.3 + 0.1 * l as f64;
            data.push(y, &[format!("L{l}"), format!("a{}", rng.random_range(0..6)), format!("b{}", rng.random_range(0..4))])
                .map_err(|e| e.to_string())?;
            rows.push((l, y));
        }
        let mut spec = GlmmSpec::new("fixed", Coding::Reference("L0".into()), &["r1", "r2"]);
        spec.options.fixed_variances = Some(vec![0.0, 0.0]);
        let fit = fit_binomial_glmm(&data, &spec).map_err(|e| e.to_string())?;
        let x = DMatrix::from_fn(n, levels, |i, j| if j == 0 || rows[i].0 == j { 1.0 } else { 0.0 });
        let y: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.1))).collect();
        let irls = logistic_irls(&x, &y, None).map_err(|e| e.to_string())?;
        for j in 0..levels {
            let c = fit.coef(&format!("L{j}")).ok_or("missing level")?;
            ensure!(close(c, irls.coefficients[j], 1e-4), "seed {seed} L{j}: {c} vs {}", irls.coefficients[j]);
        }
    }

    let mut recovered = 0;
    let mut worst = String::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let mut data = GlmmData::new(&["level", "group"]);
        for g in 0..50 {
            let u = normal.sample(&mut rng);
            for i in 0..100 {
                let level = if i % 2 == 0 { "A" } else { "B" };
                let eta = -0.2 + if level == "B" { 0.35 } else { 0.0 } + u;
                data.push(rng.random::<f64>() < sigmoid(eta), &[level, &format!("g{g}")])
                    .map_err(|e| e.to_string())?;
            }
        }
        let spec = GlmmSpec::new("level", Coding::Reference("A".into()), &["group"]);
        let fit = fit_binomial_glmm(&data, &spec).map_err(|e| e.to_string())?;
        let beta = fit.coef("B").ok_or("missing B")?;
        let sd = fit.variance("group").ok_or("missing group")?.sqrt();
        if close(beta, 0.35, 0.15) && close(sd, 0.5, 0.2) {
            recovered += 1;
        } else {
            worst = format!(" (seed {seed}: beta {beta:.3}, sd {sd:.3})");
        }
    }
    ensure!(recovered >= 9, "recovered in {recovered}/10 seeds{worst}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("20/20 zero-variance fits match IRLS, recovery in {recovered}/10 seeds, {elapsed:.1?}"))
}

// ---------------------------------------------------------------------------
// 6. Odds ratios

fn odds_ratios(s: &Study) -> Outcome {
    let a = odds_ratio_row("a", -1.141, false);
    let b = odds_ratio_row("b", 0.567, false);
    ensure!(close(a.odds_ratio, 0.320, 0.002), "exp(-1.141) = {}", a.odds_ratio);
    ensure!(close(b.odds_ratio, 1.762, 0.002), "exp(0.567) = {}", b.odds_ratio);
    let mut data = GlmmData::new(&["task", "visit"]);
    let cells = correctness_matrix(&s.records, &s.corpus.labels).map_err(|e| e.to_string())?;
    for c in &cells.cells {
        data.push(c.correct, &[c.signal_id.as_str(), c.visit_id.as_str()]).map_err(|e| e.to_string())?;
    }
    let fit = fit_binomial_glmm(&data, &GlmmSpec::new("task", Coding::CellMeans, &["visit"])).map_err(|e| e.to_string())?;
    let rows = odds_ratio_table(&fit, OrSort::AscendingOr);
    ensure!(rows.iter().all(|r| r.odds_ratio == r.coef.exp()), "odds ratio is not exp(coef)");
    ensure!(rows.windows(2).all(|w| w[0].odds_ratio <= w[1].odds_ratio), "rows not ascending");
    Ok(format!(
        "-1.141 -> {:.3}, 0.567 -> {:.3}; exp relation exact on {} fitted rows",
        a.odds_ratio,
        b.odds_ratio,
        rows.len()
    ))
}

// ---------------------------------------------------------------------------
// 7. Ensemble

fn synthetic_records(corpus: &Corpus, configs: &[Configuration], seed: u64, oracle: Option<usize>) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (key, label) in &corpus.labels.labels {
        for (j, c) in configs.iter().enumerate() {
            let p = if oracle == Some(j) { label.binary } else { u8::from(rng.random::<bool>()) };
            out.push(PredictionRecord {
                visit_id: key.visit_id.clone(),
                slice_index: key.slice_index,
                signal_id: key.signal_id.clone(),
                config_id: c.config_id(),
                prediction: Some(p),
                parse_status: ParseStatus::Direct,
                abstain_reason: None,
                raw_text: p.to_string(),
                positive_logprob: None,
                negative_logprob: None,
                error: None,
                timestamp_ms: None,
            });
        }
    }
    out
}

fn mean_ba(corpus: &Corpus, configs: &[Configuration], records: &[PredictionRecord], lambda: f64) -> Result<f64, String> {
    let tasks: Vec<_> = registry().iter().collect();
    let opts = EnsembleOptions {
        lambda,
        ..EnsembleOptions::default()
    };
    let rep = ensemble_evaluate(records, &corpus.labels, &corpus.metadata, configs, &tasks, &opts)
        .map_err(|e| e.to_string())?;
    let means: Vec<f64> = rep.tasks.iter().filter_map(|t| t.summary.map(|m| m.mean)).collect();
    ensure!(!means.is_empty(), "no task produced a score");
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

fn ensemble(s: &Study) -> Outcome {
    let planted = mean_ba(&s.corpus, &s.configs, &synthetic_records(&s.corpus, &s.configs, 1, Some(4)), 0.01)?;
    ensure!(planted >= 0.95, "planted oracle mean BA {planted:.3}");

    let mut random = Vec::new();
    for seed in 0..10 {
        let ba = mean_ba(&s.corpus, &s.configs, &synthetic_records(&s.corpus, &s.configs, 100 + seed, None), 0.01)?;
        ensure!((0.4..=0.6).contains(&ba), "random configurations seed {seed}: mean BA {ba:.3}");
        random.push(ba);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..9).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect()).collect();
    let y: Vec<u8> = x.iter().map(|r| u8::from(rng.random::<f64>() < 0.2 + 0.5 * r[0])).collect();
    let big = l1_logistic_fit(&x, &y, 1e3, CdOptions::default()).map_err(|e| e.to_string())?;
    ensure!(big.weights.iter().all(|&w| w == 0.0), "weights {:?}", big.weights);
    let rate = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
    ensure!(close(big.intercept, (rate / (1.0 - rate)).ln(), 1e-6), "intercept {}", big.intercept);

    let design = DMatrix::from_fn(x.len(), 10, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let irls = logistic_irls(&design, &yf, None).map_err(|e| e.to_string())?;
    let zero = penalized_logistic_fit(&x, &y, 0.0, Penalty::L1, CdOptions::default()).map_err(|e| e.to_string())?;
    let tiny = penalized_logistic_fit(&x, &y, 1e-9, Penalty::L1, CdOptions::default()).map_err(|e| e.to_string())?;
    for fit in [&zero, &tiny] {
        let coefs = std::iter::once(fit.intercept).chain(fit.weights.iter().copied());
        for (a, b) in coefs.zip(&irls.coefficients) {
            ensure!(close(a, *b, 1e-4), "lambda {}: {a} vs IRLS {b}", fit.lambda);
        }
    }
    let lo = random.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = random.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "planted oracle {planted:.3}; random {lo:.3}..{hi:.3} over 10 seeds; lambda 1e3 zeroes weights; lambda 0 and coordinate descent match IRLS"
    ))
}

// ---------------------------------------------------------------------------
// 8. Fairness

fn confusion(recall_pct: u64) -> Confusion {
    Confusion {
        tp: recall_pct,
        fn_: 100 - recall_pct,
        tn: recall_pct,
        fp: 100 - recall_pct,
    }
}

fn fairness(_: &Study) -> Outcome {
    let mut seen = Vec::new();
    for (a, b) in [(79, 100), (80, 100), (81, 100), (72, 90)] {
        let ba_a = balanced_accuracy(&confusion(a)).map_err(|e| e.to_string())?.value;
        let ba_b = balanced_accuracy(&confusion(b)).map_err(|e| e.to_string())?.value;
        let ratio = a as f64 / b as f64;
        let expect = ratio < 0.8 - 1e-9;
        for r in [parity_ratio(ba_a, ba_b), parity_ratio(ba_b, ba_a)] {
            ensure!(r.flagged == expect, "{ba_a} vs {ba_b}: flagged {}", r.flagged);
            ensure!(close(r.dpr.unwrap_or(f64::NAN), ratio, 1e-12), "dpr {:?}", r.dpr);
        }
        seen.push(format!("{ratio:.2}:{}", if expect { "flag" } else { "ok" }));
    }
    Ok(seen.join(" "))
}

// ---------------------------------------------------------------------------
// 9. Correctness aggregation

fn aggregation(s: &Study) -> Outcome {
    let m = correctness_matrix(&s.records, &s.corpus.labels).map_err(|e| e.to_string())?;
    let possible = s.configs.len() * registry().len();
    ensure!(possible == 180, "{possible} possible predictions per slice");
    ensure!(m.per_slice.len() == s.corpus.slices.len(), "{} slices aggregated", m.per_slice.len());
    for p in &m.per_slice {
        ensure!(p.answered + p.abstained == 180, "{}#{}: {} + {}", p.visit_id, p.slice_index, p.answered, p.abstained);
        ensure!(p.correct <= p.answered, "{}#{} correct above answered", p.visit_id, p.slice_index);
    }
    let unanswered = s.records.iter().filter(|r| !r.is_answered()).count();
    ensure!(unanswered > 0, "the fixture should produce abstentions");
    ensure!(m.total_abstained() == unanswered, "{} vs {unanswered}", m.total_abstained());
    let bundle = &s.bundles[0];
    let summary: serde_json::Value =
        serde_json::from_str(&bundle.artifact("summary.json").ok_or("no summary")?.contents).map_err(|e| e.to_string())?;
    ensure!(summary["abstained"] == unanswered, "summary reports {}", summary["abstained"]);
    let table2 = &bundle.artifact("table2_overall.md").ok_or("no table 2")?.contents;
    ensure!(table2.contains(&unanswered.to_string()), "Table 2 does not report abstentions");
    let hist = &bundle.artifact("fig2_correct_histogram.csv").ok_or("no histogram")?.contents;
    let in_hist: usize = hist
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<usize>().ok())
        .sum();
    ensure!(in_hist == s.corpus.slices.len(), "histogram holds {in_hist} slices");
    let best = m.per_slice.iter().map(|p| p.correct).max().unwrap_or(0);
    Ok(format!("180 cells per slice; best slice {best}/180; {unanswered} abstentions reported"))
}

// ---------------------------------------------------------------------------
// 10. Leakage

fn leakage(s: &Study) -> Outcome {
    let bank = FewShotBank::from_corpus(&s.corpus, &BankThresholds::default());
    let fs: Vec<Configuration> = valid_configurations().into_iter().filter(|c| c.strategy.uses_examples()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let config = fs[rng.random_range(0..fs.len())];
        let task = &registry()[rng.random_range(0..registry().len())];
        let slice = &s.corpus.slices[rng.random_range(0..s.corpus.slices.len())];
        let mut compiler = PromptCompiler::new(Some(bank.clone()), rng.random());
        compiler.k_per_class = rng.random_range(1..=2);
        let p = compiler.compile(config, task, slice).map_err(|e| format!("draw {i}: {e}"))?;
        ensure!(!p.example_sources.is_empty(), "draw {i}: no examples");
        ensure!(p.example_sources.iter().all(|v| v != &slice.visit_id), "draw {i}: example from {}", slice.visit_id);
        for other in s.corpus.slices.iter().filter(|o| o.visit_id == slice.visit_id && o.slice_index != slice.slice_index) {
            ensure!(!p.full_text.contains(&render_transcript(other)), "draw {i}: sibling slice text in prompt");
        }
    }

    let keys: Vec<SliceKey> = s.corpus.slices.iter().map(|sl| sl.key()).collect();
    let folds = logo_folds(&keys, &s.corpus.metadata).map_err(|e| e.to_string())?;
    let opts = EnsembleOptions {
        lambda: 0.01,
        ..EnsembleOptions::default()
    };
    let mut checked = 0;
    for task in registry() {
        let matrix = task_matrix(&s.records, &s.corpus.labels, &s.configs, task);
        for fold in &folds {
            let train: BTreeSet<_> = fold.train_keys.iter().map(|k| &k.visit_id).collect();
            ensure!(fold.test_keys.iter().all(|k| !train.contains(&k.visit_id)), "visit on both sides of a fold");
            let base = evaluate_fold(&matrix, fold, &opts).map_err(|e| e.to_string())?;
            let Some(model) = &base.model else { continue };
            let test: BTreeSet<_> = fold.test_keys.iter().collect();
            let mut perturbed = matrix.clone();
            for (k, (x, y)) in perturbed.keys.iter().zip(perturbed.features.iter_mut().zip(perturbed.labels.iter_mut())) {
                if test.contains(k) {
                    x.iter_mut().for_each(|v| *v = 1.0 - *v);
                    *y = 1 - *y;
                }
            }
            let again = evaluate_fold(&perturbed, fold, &opts).map_err(|e| e.to_string())?;
            ensure!(again.model.as_ref() == Some(model), "{} fold {}: test rows moved the weights", task.signal_id, fold.held_out_group);
            checked += 1;
        }
    }
    // Control: the same perturbation on training rows does move the fit.
    let matrix = task_matrix(&s.records, &s.corpus.labels, &s.configs, &registry()[0]);
    let fold = &folds[0];
    let base = evaluate_fold(&matrix, fold, &opts).map_err(|e| e.to_string())?;
    let train: BTreeSet<_> = fold.train_keys.iter().collect();
    let mut perturbed = matrix.clone();
    for (k, y) in perturbed.keys.iter().zip(perturbed.labels.iter_mut()) {
        if train.contains(k) {
            *y = 1 - *y;
        }
    }
    let moved = evaluate_fold(&perturbed, fold, &opts).map_err(|e| e.to_string())?;
    ensure!(moved.model != base.model, "training perturbation had no effect");
    Ok(format!("1000 few-shot compilations leak-free; {checked} task folds unaffected by test perturbation"))
}

// ---------------------------------------------------------------------------
// 11. Report layout

const GOLDEN: &str = "tests/fixtures/report_layout.txt";

fn data_lines(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

fn split(line: &str) -> Vec<String> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
    r.records().next().and_then(|r| r.ok()).map(|r| r.iter().map(str::to_string).collect()).unwrap_or_default()
}

/// Header and row-label column of every table, with the row-label column
/// sorted when the table orders rows by value.
fn layout(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    for a in &bundle.artifacts {
        if a.file_name.ends_with(".csv") && a.file_name.starts_with("table") || a.file_name == "ensemble.csv" {
            let lines = data_lines(&a.contents);
            let header = split(lines[0]);
            let label_col = usize::from(header[0] == "section");
            let mut labels: Vec<String> = lines[1..].iter().map(|l| split(l)[label_col].clone()).collect();
            if a.file_name.starts_with("table5") {
                labels.sort();
            }
            out.push_str(&format!("{}\n  columns: {}\n  rows: {}\n", a.file_name, header.join(" | "), labels.join(" | ")));
        } else if a.file_name.ends_with(".md") {
            let header = a.contents.lines().find(|l| l.starts_with("| ")).unwrap_or("");
            out.push_str(&format!("{}\n  header: {header}\n", a.file_name));
        }
    }
    out
}

fn is_mean_sd(cell: &str) -> bool {
    let c = cell.trim_end_matches(" †");
    let Some((mean, sd)) = c.split_once(" (") else { return false };
    let Some(sd) = sd.strip_suffix(')') else { return false };
    let three = |s: &str| s.split_once('.').is_some_and(|(_, d)| d.len() == 3) && s.parse::<f64>().is_ok();
    let two = |s: &str| s.split_once('.').is_some_and(|(_, d)| d.len() == 2) && s.parse::<f64>().is_ok();
    three(mean) && two(sd)
}

fn table_rows(bundle: &ReportBundle, name: &str) -> Result<Vec<Vec<String>>, String> {
    let a = bundle.artifact(name).ok_or(format!("missing {name}"))?;
    Ok(data_lines(&a.contents).into_iter().map(split).collect())
}

fn published_layouts(bundle: &ReportBundle) -> Result<(), String> {
    let task_names: Vec<String> = registry().iter().map(|t| t.display_name.to_string()).collect();
    let ids: Vec<String> = valid_configurations().iter().map(Configuration::config_id).collect();

    let t2 = table_rows(bundle, "table2_overall.csv")?;
    let mut want: Vec<String> = vec!["section".into(), "Social Signal".into()];
    want.extend(ids.iter().cloned());
    want.push("Ensemble (LOGO)".into());
    ensure!(t2[0] == want, "Table 2 columns {:?}", t2[0]);
    ensure!(t2.len() == 23, "Table 2 has {} rows", t2.len());
    ensure!(t2[1..21].iter().map(|r| r[1].clone()).collect::<Vec<_>>() == task_names, "Table 2 rows");
    ensure!(t2[21][..2] == ["", "MEAN"] && t2[22][..2] == ["", "STD"], "Table 2 summary rows");
    ensure!(
        t2[1..16].iter().all(|r| r[0] == "Type-I Signals") && t2[16..21].iter().all(|r| r[0] == "Type-II Signals"),
        "Table 2 sections"
    );
    ensure!(t2[1..21].iter().all(|r| r[11] == "--" || is_mean_sd(&r[11])), "Table 2 ensemble cells");
    let md2 = &bundle.artifact("table2_overall.md").ok_or("no md")?.contents;
    ensure!(md2.contains("| MEAN |") && md2.contains("| STD |"), "Table 2 summary rows");
    ensure!(md2.contains("**") && md2.contains("<u>"), "Table 2 best/second-best emphasis");

    for (name, rows) in [
        ("table3_model.csv", vec!["FLAN-T5 (reference)", "Gemma2-2b", "LLaMA3.1-405B"]),
        ("table3_prompt.csv", vec!["Zero Shot (reference)", "Few Shot", "Chain of Thought", "Few Shot with Chain of Thought"]),
    ] {
        let t = table_rows(bundle, name)?;
        ensure!(t[0] == ["", "Coef. (log)", "Odds Ratio"], "{name} columns {:?}", t[0]);
        ensure!(t[1..].iter().map(|r| r[0].as_str()).collect::<Vec<_>>() == rows, "{name} rows");
    }
    let t3 = table_rows(bundle, "table3_config.csv")?;
    ensure!(t3.len() == 10 && t3[1][0] == "FLAN-ZS (reference)", "Table 3 configuration rows");

    let t4 = table_rows(bundle, "table4_difficulty.csv")?;
    ensure!(t4[0] == ["Feature", "Description (example words)", "Hard", "Easy", "U-statistic"], "Table 4 columns");
    ensure!(t4[1..4].iter().map(|r| r[0].as_str()).collect::<Vec<_>>() == ["WPS", "AllPunc", "Period"], "Table 4 rows");
    ensure!(t4[1..].iter().all(|r| is_mean_sd(&r[2]) && is_mean_sd(&r[3])), "Table 4 mean (sd) cells");

    let t5 = table_rows(bundle, "table5_task_difficulty.csv")?;
    ensure!(t5[0][..4] == ["Social Signal (task)", "Coef. (log)", "Odds Ratio (OR)", "abs(1-OR)"], "Table 5 columns");
    let ors: Vec<f64> = t5[1..].iter().filter_map(|r| r[2].parse().ok()).collect();
    ensure!(ors.len() == 20 && ors.windows(2).all(|w| w[0] <= w[1]), "Table 5 not sorted by OR");

    let t6 = table_rows(bundle, "table6_fairness.csv")?;
    ensure!(t6[0].len() == 6 && t6.len() == 21, "Table 6 shape");
    ensure!(t6[1..].iter().all(|r| is_mean_sd(&r[1]) && is_mean_sd(&r[2])), "Table 6 label cells");

    let t7 = table_rows(bundle, "table7_segment_labels.csv")?;
    ensure!(t7[0] == ["Social Signal", "Start", "Middle", "End", "Statistic χ²(2)"], "Table 7 columns");
    ensure!(t7[1..].iter().all(|r| r[1..4].iter().all(|c| is_mean_sd(c))), "Table 7 mean (sd) cells");

    let t8 = table_rows(bundle, "table8_segment_accuracy.csv")?;
    ensure!(t8[0] == ["Social Signal", "Start", "Middle", "End"], "Table 8 columns");
    ensure!(t8.last().is_some_and(|r| r[0] == "Averaged Performance"), "Table 8 averaged row");
    ensure!(t8[1..].iter().all(|r| r[1..].iter().all(|c| c == "--" || is_mean_sd(c))), "Table 8 cells");
    Ok(())
}

/// Plants a race effect and a segment effect, then checks the stars they
/// earn in the fairness and segment tables.
fn star_conventions(s: &Study) -> Result<(), String> {
    let mut corpus = s.corpus.clone();
    for (key, label) in corpus.labels.labels.iter_mut() {
        let slice = s.corpus.slice(&SliceKey { visit_id: key.visit_id.clone(), slice_index: key.slice_index });
        let non_white = corpus.metadata[&key.visit_id].patient_race == thinslice::corpus::PatientRace::NonWhite;
        match key.signal_id.as_str() {
            "patient_sadness" => label.binary = u8::from(non_white),
            "provider_warmth" => {
                label.binary = u8::from(slice.is_some_and(|sl| sl.segment == thinslice::corpus::Segment::Start))
            }
            _ => {}
        }
    }
    let bundle = report(&s.cfg, &corpus, &s.records);
    let t6 = table_rows(&bundle, "table6_fairness.csv")?;
    let sadness = t6.iter().find(|r| r[0].starts_with("Patient Sadness")).ok_or("no sadness row")?;
    let n_nw = s.corpus.slices.iter().filter(|sl| ["v03", "v06", "v09"].contains(&sl.visit_id.as_str())).count() as u64;
    let n_w = s.corpus.slices.len() as u64 - n_nw;
    let p = fisher_exact_2x2([[n_nw, 0], [0, n_w]]).map_err(|e| e.to_string())?.p_value;
    ensure!(sadness[0] == format!("Patient Sadness {}", significance_stars(p)), "sadness row {:?} for p {p}", sadness[0]);
    ensure!(significance_stars(p) == "***", "planted race effect p {p}");
    let plain = t6.iter().filter(|r| !r[0].contains('*')).count();
    ensure!(plain >= 15, "unexpected stars in Table 6");

    let t7 = table_rows(&bundle, "table7_segment_labels.csv")?;
    let warmth = t7.iter().find(|r| r[0] == "Provider Warmth").ok_or("no warmth row")?;
    ensure!(warmth[4].ends_with(" ***"), "warmth statistic {:?}", warmth[4]);
    let md8 = &bundle.artifact("table8_segment_accuracy.md").ok_or("no md")?.contents;
    ensure!(md8.contains("| **Provider Warmth** |"), "Table 8 does not bold the significant signal");
    ensure!(!md8.contains("| **Patient Sadness** |"), "Table 8 bolds a non-significant signal");
    Ok(())
}

fn report_fidelity(s: &Study) -> Outcome {
    let bundle = &s.bundles[0];
    published_layouts(bundle)?;
    star_conventions(s)?;
    let got = layout(bundle);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("THINSLICE_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, &got).map_err(|e| e.to_string())?;
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want != got {
        let diff = want
            .lines()
            .zip(got.lines())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("want `{a}`, got `{b}`"))
            .unwrap_or_else(|| "length differs".into());
        return Err(format!("layout differs from golden: {diff}"));
    }
    let tables = got.lines().filter(|l| !l.starts_with(' ')).count();
    Ok(format!("{tables} table layouts match golden; mean (sd) cells and star conventions hold"))
}

// ---------------------------------------------------------------------------

fn main() {
    let s = study();
    let criteria: [(&str, fn(&Study) -> Outcome); 11] = [
        ("configuration matrix", configuration_matrix),
        ("binarization", binarization),
        ("end-to-end determinism", determinism),
        ("statistics oracles", statistics),
        ("mixed model", glmm),
        ("odds ratios", odds_ratios),
        ("ensemble", ensemble),
        ("fairness", fairness),
        ("correctness aggregation", aggregation),
        ("leakage", leakage),
        ("report fidelity", report_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&s))).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
