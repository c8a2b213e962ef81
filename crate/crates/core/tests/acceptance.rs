//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{
    brute_force_valid, expected, flat_forest, forest, mask_of, random_forest, satisfies_rules,
    shapley,
};
use counterlens::analysis::{group_by, RunRow, SegmentState};
use counterlens::attribution::{kernel_shap, kernel_weight};
use counterlens::bench::{
    grammar_new_errors, load_corpus, run_benchmark, BenchConfig, LanguageToolClient,
};
use counterlens::engine::{
    count_valid, enumerate_valid, realize_batch, ValidCount, VectorSampler, DEFAULT_CAP,
};
use counterlens::evaluator::{estimate_outcome, Evaluator, Operator};
use counterlens::gateway::StubModel;
use counterlens::segment::SegmentKind;
use counterlens::service::runner::{execute_run, write_artifacts, RunConfig, ARTIFACT_FILES};

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ms(d: Duration) -> String {
    format!("{:.1} ms", d.as_secs_f64() * 1e3)
}

fn short_listings() -> Outcome {
    let listings = [
        ("medqa_01", 24),
        ("medqa_02", 12),
        ("multinews_01", 14),
        ("finqa_01", 5),
        ("finqa_02", 8),
        ("tinytextbooks_01", 9),
        ("tinytextbooks_02", 18),
    ];
    let wants: Vec<BTreeSet<String>> = listings.iter().map(|(n, _)| expected(n)).collect();
    let t0 = Instant::now();
    let mut bad = Vec::new();
    for ((name, size), want) in listings.iter().zip(&wants) {
        let f = forest(name);
        let vs = enumerate_valid(&f, DEFAULT_CAP).unwrap();
        let got: BTreeSet<String> = realize_batch(&f, &vs)
            .unwrap()
            .into_iter()
            .map(|c| c.text)
            .collect();
        if &got != want || got.len() != *size {
            bad.push(format!("{name} ({} vs {size})", got.len()));
        }
    }
    let took = t0.elapsed();
    let ok = bad.is_empty() && took < Duration::from_secs(1);
    verdict(
        ok,
        format!("7 listings, mismatches {bad:?}, {} (< 1 s)", ms(took)),
    )
}

fn neck_pain_components() -> Outcome {
    let f = forest("neck_pain");
    let n = f.segments().count();
    let dummies: Vec<String> = f
        .segments()
        .filter(|s| s.kind == SegmentKind::Dummy)
        .map(|s| f.text(s.id))
        .collect();
    let and_lines = f.outline().lines().filter(|l| l.contains("[and]")).count();
    verdict(
        n == 7 && dummies.len() == 1 && and_lines == 1,
        format!("{n} components, dummies {dummies:?}"),
    )
}

fn rule_validity() -> Outcome {
    let t0 = Instant::now();
    let mut draws = 0;
    let mut violations = 0;
    let mut compared = 0;
    let mut mismatched = 0;
    for i in 0..200u64 {
        let n = 2 + (i as usize % 29);
        let f = random_forest(0xACCE_0000 + i, n);
        let sampler = VectorSampler::new(&f, &Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        for _ in 0..50 {
            draws += 1;
            if !satisfies_rules(&f, &sampler.draw(&mut rng).bits) {
                violations += 1;
            }
        }
        if f.dimension() <= 12 {
            compared += 1;
            let got: BTreeSet<_> = enumerate_valid(&f, 1 << 20).unwrap().into_iter().collect();
            if got != brute_force_valid(&f) {
                mismatched += 1;
            }
        }
    }
    let took = t0.elapsed();
    verdict(
        draws == 10_000 && violations == 0 && mismatched == 0 && compared > 0 && took < Duration::from_secs(30),
        format!(
            "{draws} draws, {violations} violations; {compared} forests with M <= 12, {mismatched} enumeration mismatches; {} (< 30 s)",
            ms(took)
        ),
    )
}

fn uniform_sampling() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, name) in ["medqa_01", "billsum_01", "neck_pain"].iter().enumerate() {
        let f = forest(name);
        let cells = count_valid(&f).exact().unwrap() as usize;
        let sampler = VectorSampler::new(&f, &Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let mut freq: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *freq.entry(sampler.draw(&mut rng).bits).or_default() += 1;
        }
        let e = draws as f64 / cells as f64;
        // Unseen cells contribute e each.
        let stat: f64 = freq
            .values()
            .map(|&o| (o as f64 - e).powi(2) / e)
            .sum::<f64>()
            + (cells - freq.len()) as f64 * e;
        let p = ChiSquared::new((cells - 1) as f64).unwrap().sf(stat);
        ok &= p > 0.001 && freq.len() == cells;
        parts.push(format!("{name}: {cells} cells, chi2 {stat:.1}, p {p:.3}"));
    }
    let took = t0.elapsed();
    ok &= took < Duration::from_secs(10);
    verdict(ok, format!("{}; {} (< 10 s)", parts.join("; "), ms(took)))
}

fn records(m: usize, f: &dyn Fn(u32) -> f64) -> Vec<(Vec<bool>, f64)> {
    let fl = flat_forest(m);
    let vs = enumerate_valid(&fl, 1 << 12).unwrap();
    vs.iter()
        .map(|v| (v.bits.clone(), f(mask_of(&v.bits))))
        .collect()
}

fn kernel_shap_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_oracle: f64 = 0.0;
    let mut worst_local: f64 = 0.0;
    for i in 0..50 {
        let m = 2 + i % 7;
        let table: Vec<f64> = (0..1u32 << m).map(|_| rng.gen::<f64>()).collect();
        let f = |mask: u32| table[mask as usize];
        let recs = records(m, &f);
        let ids: Vec<u32> = (1..=m as u32).collect();
        let r = kernel_shap(&recs, &ids).unwrap();
        let oracle = shapley(m, &f);
        for (a, b) in r.phi.iter().zip(&oracle) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
        let full = f((1 << m) - 1);
        worst_local = worst_local.max((r.phi0 + r.phi.iter().sum::<f64>() - full).abs());
    }
    let mut worst_additive: f64 = 0.0;
    for m in 1..=8usize {
        let coef: Vec<f64> = (0..m)
            .map(|_| rng.gen_range(-0.3..0.7) / m as f64)
            .collect();
        let f = |mask: u32| {
            0.3 + (0..m)
                .filter(|&j| mask >> j & 1 == 1)
                .map(|j| coef[j])
                .sum::<f64>()
        };
        let recs = records(m, &f);
        let ids: Vec<u32> = (1..=m as u32).collect();
        let r = kernel_shap(&recs, &ids).unwrap();
        for (a, b) in r.phi.iter().zip(&coef) {
            worst_additive = worst_additive.max((a - b).abs());
        }
        worst_local = worst_local.max((r.phi0 + r.phi.iter().sum::<f64>() - f((1 << m) - 1)).abs());
    }
    let took = t0.elapsed();
    verdict(
        worst_oracle <= 1e-6 && worst_additive <= 1e-9 && worst_local <= 1e-9 && took < Duration::from_secs(60),
        format!(
            "oracle max |dphi| {worst_oracle:.2e} (<= 1e-6), additive {worst_additive:.2e} (<= 1e-9), local accuracy {worst_local:.2e} (<= 1e-9); {} (< 60 s)",
            ms(took)
        ),
    )
}

fn kernel_weights() -> Outcome {
    let w41 = kernel_weight(4, 1).unwrap();
    let mut asym = Vec::new();
    for m in 2..=12 {
        for s in 1..m {
            if kernel_weight(m, s).unwrap() != kernel_weight(m, m - s).unwrap() {
                asym.push((m, s));
            }
        }
    }
    verdict(
        w41 == 0.25 && asym.is_empty(),
        format!("w(4,1) = {w41}, asymmetric pairs {asym:?}"),
    )
}

fn bench_grammar_and_speed() -> Outcome {
    let base = common::spawn_languagetool();
    let checker = LanguageToolClient::new(&base).unwrap();
    let corpus = load_corpus(&common::fixtures_dir()).unwrap();
    let report = run_benchmark(&corpus, &BenchConfig::default(), Some(&checker)).unwrap();
    let total: usize = report.sentences.iter().map(|s| s.counterfactuals).sum();
    let clean: usize = report.sentences.iter().filter_map(|s| s.grammatical).sum();
    let flagged: Vec<&str> = report
        .sentences
        .iter()
        .filter(|s| s.grammatical != Some(s.counterfactuals))
        .map(|s| s.name.as_str())
        .collect();
    let slowest = report
        .sentences
        .iter()
        .map(|s| s.engine_ms)
        .fold(0.0, f64::max);
    let rate = 1.0 - clean as f64 / total as f64;
    // The checker must be able to see the damage a bad realizer would do.
    let probe = grammar_new_errors(
        "The patient reports pain.",
        "the patient reports and , .",
        &checker,
    )
    .unwrap();
    verdict(
        report.sentences.len() == 10 && report.failures.is_empty() && rate == 0.0 && slowest < 50.0 && probe > 0,
        format!(
            "{} sentences, {total} counterfactuals, new-error rate {:.2}% (= 0%), flagged {flagged:?}, checker probe {probe} errors, slowest engine time {slowest:.2} ms (< 50 ms)",
            report.sentences.len(),
            rate * 100.0
        ),
    )
}

fn end_to_end_determinism(rt: &tokio::runtime::Runtime) -> Outcome {
    // Deterministic but prompt-dependent answers so attributions are not trivial.
    let model = StubModel::from_fn("hash-stub", |r| {
        let h = r.prompt.bytes().fold(r.sample_index as u64, |a, b| {
            a.wrapping_mul(31).wrapping_add(b as u64)
        });
        Ok(if h % 3 == 0 {
            "yes".into()
        } else {
            "no".into()
        })
    });
    let evs = vec![Evaluator::new(Operator::Equal, "yes").unwrap()];
    let f = forest("billsum_01");
    let cfg = RunConfig {
        seed: 7,
        cap: 32,
        sample: 24,
        ..RunConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let progress = Default::default();
        let out = rt
            .block_on(execute_run(
                &f,
                "Summarize: {input}",
                &evs,
                &cfg,
                &model,
                &model,
                &progress,
            ))
            .unwrap();
        write_artifacts(d.path(), &out).unwrap();
    }
    let differing: Vec<&str> = ARTIFACT_FILES
        .iter()
        .copied()
        .filter(|name| {
            std::fs::read(dirs[0].path().join(name)).unwrap()
                != std::fs::read(dirs[1].path().join(name)).unwrap()
        })
        .collect();
    let shap = std::fs::read_to_string(dirs[0].path().join("shap.json")).unwrap();
    let has_phi = shap.contains("\"phi\"");
    verdict(
        differing.is_empty() && has_phi,
        format!(
            "{} artifact files compared, differing {differing:?}",
            ARTIFACT_FILES.len()
        ),
    )
}

fn outcome_arithmetic(rt: &tokio::runtime::Runtime) -> Outcome {
    let ev = Evaluator::new(Operator::Equal, "yes").unwrap();
    let mut got = Vec::new();
    for k in 0..=5u32 {
        let stub = StubModel::first_k(k, "Yes", "No");
        let (rec, _) = rt.block_on(estimate_outcome(0, "prompt", &ev, 5, &stub, &stub));
        got.push((k, rec.outcome));
    }
    let ok = got.iter().all(|(k, o)| *o == Some(*k as f64 / 5.0));
    verdict(ok, format!("{got:?}"))
}

fn group_by_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut runs = 0;
    let mut groups = 0;
    let mut mismatches = 0;
    let mut seed = 0u64;
    while runs < 500 {
        seed += 1;
        let f = random_forest(0x6B00_0000 + seed, 2 + (seed as usize % 10));
        let vars = f.variable_ids();
        if vars.is_empty() || !matches!(count_valid(&f), ValidCount::Exact(c) if c <= 256) {
            continue;
        }
        runs += 1;
        let vs = enumerate_valid(&f, 256).unwrap();
        let rows: Vec<RunRow> = realize_batch(&f, &vs)
            .unwrap()
            .into_iter()
            .map(|c| RunRow {
                cf_id: c.id,
                outcome: Some(0.0),
                word_count: c.word_count,
                bits: c.vector.bits,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(0..=vars.len().min(3));
        let mut pool = vars.clone();
        let mut sel = Vec::new();
        for _ in 0..k {
            sel.push(pool.remove(rng.gen_range(0..pool.len())));
        }
        for g in group_by(&f, &rows, &sel).unwrap() {
            groups += 1;
            let members: Vec<&RunRow> = rows
                .iter()
                .filter(|r| g.member_cf_ids.contains(&r.cf_id))
                .collect();
            let mut want = Vec::new();
            for (col, id) in vars.iter().enumerate() {
                if sel.contains(id) {
                    continue;
                }
                let first = members[0].bits[col];
                if members.iter().all(|r| r.bits[col] == first) {
                    want.push((
                        *id,
                        if first {
                            SegmentState::Included
                        } else {
                            SegmentState::Excluded
                        },
                    ));
                }
            }
            let got: Vec<_> = g
                .influenced_segments
                .iter()
                .map(|s| (s.id, s.state))
                .collect();
            if got != want {
                mismatches += 1;
            }
        }
    }
    let took = t0.elapsed();
    verdict(
        mismatches == 0 && took < Duration::from_secs(10),
        format!(
            "{runs} runs, {groups} groups, {mismatches} mismatches; {} (< 10 s)",
            ms(took)
        ),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let criteria: Vec<(&str, Criterion)> = vec![
        (
            "short expected listings reproduce exactly",
            Box::new(short_listings),
        ),
        (
            "neck-pain sentence has 7 components with one [and]",
            Box::new(neck_pain_components),
        ),
        (
            "sampled and enumerated vectors obey the rules",
            Box::new(rule_validity),
        ),
        (
            "sampling is uniform over valid vectors",
            Box::new(uniform_sampling),
        ),
        (
            "kernel SHAP matches exact Shapley values",
            Box::new(kernel_shap_correctness),
        ),
        ("kernel weights", Box::new(kernel_weights)),
        (
            "bench: no new grammar errors, engine < 50 ms/sentence",
            Box::new(bench_grammar_and_speed),
        ),
        (
            "end-to-end runs are byte-identical",
            Box::new(|| end_to_end_determinism(&rt)),
        ),
        ("outcome is k/n", Box::new(|| outcome_arithmetic(&rt))),
        (
            "group-by influenced segments match brute force",
            Box::new(group_by_oracle),
        ),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
