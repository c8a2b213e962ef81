use std::collections::BTreeSet;

use super::*;
use crate::conllu::parse_conllu_strict;
use crate::rules::RemovabilityRuleTable;

fn forest(name: &str) -> SegmentForest {
    let path = format!(
        "{}/../../fixtures/{name}.conllu",
        env!("CARGO_MANIFEST_DIR")
    );
    let src = std::fs::read_to_string(path).unwrap();
    let p = parse_conllu_strict(&src).unwrap().remove(0);
    SegmentForest::from_parse(&p, &RemovabilityRuleTable::default()).unwrap()
}

fn texts(f: &SegmentForest, vs: &[CounterfactualVector]) -> Vec<String> {
    realize_batch(f, vs)
        .unwrap()
        .into_iter()
        .map(|c| c.text)
        .collect()
}

fn full(f: &SegmentForest) -> CounterfactualVector {
    CounterfactualVector {
        bits: vec![true; f.dimension()],
        choices: vec![0; f.len()],
    }
}

#[test]
fn counts_match_listing_sizes() {
    for (name, n) in [
        ("medqa_01", 24),
        ("finqa_01", 5),
        ("finqa_02", 8),
        ("multinews_01", 14),
    ] {
        assert_eq!(count_valid(&forest(name)), ValidCount::Exact(n), "{name}");
    }
}

#[test]
fn full_vector_reproduces_prototype() {
    for name in [
        "neck_pain",
        "medqa_01",
        "medqa_02",
        "billsum_01",
        "billsum_02",
        "finqa_02",
    ] {
        let f = forest(name);
        let cf = realize_text(&f, &full(&f)).unwrap();
        assert_eq!(cf.text, f.doc().text, "{name}");
    }
}

#[test]
fn known_realizations() {
    let f = forest("medqa_01");
    // bits: 23-year-old, pregnant, at.., with.., upon..
    let v = CounterfactualVector {
        bits: vec![false, true, false, false, false],
        choices: vec![0; 6],
    };
    assert_eq!(
        realize_text(&f, &v).unwrap().text,
        "A pregnant woman presents."
    );

    let f = forest("multinews_01");
    let all = texts(&f, &enumerate_valid(&f, DEFAULT_CAP).unwrap());
    assert!(all.contains(&"He fails horribly at humor.".to_string()));
    assert!(all.contains(&"He fails.".to_string()));
}

#[test]
fn enumeration_is_sorted_and_distinct() {
    let f = forest("billsum_01");
    let vs = enumerate_valid(&f, DEFAULT_CAP).unwrap();
    assert!(vs.windows(2).all(|w| w[0] < w[1]));
    for v in &vs {
        validate_vector(&f, v).unwrap();
    }
    let set: BTreeSet<String> = texts(&f, &vs).into_iter().collect();
    assert_eq!(set.len(), vs.len());
}

#[test]
fn root_only_forest_has_one_vector() {
    let f = forest("neck_pain").merge_branch(0).unwrap().forest;
    assert_eq!(f.dimension(), 0);
    let vs = enumerate_valid(&f, DEFAULT_CAP).unwrap();
    assert_eq!(vs.len(), 1);
    assert_eq!(realize_text(&f, &vs[0]).unwrap().text, f.doc().text);
}

#[test]
fn cap_exceeded() {
    let f = forest("billsum_01");
    assert!(matches!(
        enumerate_valid(&f, 10),
        Err(EngineError::CapExceeded {
            count: ValidCount::Exact(56),
            cap: 10
        })
    ));
    let vs = generate_vectors(&f, 10, 7, 1).unwrap();
    assert_eq!(vs.len(), 7);
}

#[test]
fn alternatives_multiply_leaf_factor() {
    let f = forest("neck_pain");
    let base = count_valid(&f).exact().unwrap();
    let g = f
        .configure_alternatives(6, &["in the stomach".into()])
        .unwrap();
    let vs = enumerate_valid(&g, DEFAULT_CAP).unwrap();
    assert!(vs.len() as u128 > base);
    let t = texts(&g, &vs);
    assert!(t.contains(&"The patient reports intense pain in the stomach.".to_string()));
}

#[test]
fn replacement_is_verbatim() {
    let f = forest("medqa_01")
        .configure_alternatives(
            3,
            &[
                "at 30 weeks gestation".into(),
                "at 38 weeks gestation".into(),
            ],
        )
        .unwrap();
    let mut v = CounterfactualVector {
        bits: vec![false, false, true, false, false],
        choices: vec![0; 6],
    };
    v.choices[3] = 2;
    assert_eq!(
        realize_text(&f, &v).unwrap().text,
        "A woman at 38 weeks gestation presents."
    );
}

#[test]
fn invalid_vectors_rejected() {
    let f = forest("medqa_01");
    let orphan = CounterfactualVector {
        bits: vec![false, false, false, false, true],
        choices: vec![0; 6],
    };
    assert!(matches!(
        realize_text(&f, &orphan),
        Err(EngineError::InvalidVector(Violation::OrphanIncluded {
            child: 5,
            parent: 4
        }))
    ));
    let short = CounterfactualVector {
        bits: vec![true],
        choices: vec![0; 6],
    };
    assert!(matches!(
        validate_vector(&f, &short),
        Err(Violation::BitLength { .. })
    ));

    let np = forest("neck_pain");
    let mut empty_dummy = full(&np);
    for b in empty_dummy.bits.iter_mut().skip(1) {
        *b = false;
    }
    assert_eq!(
        validate_vector(&np, &empty_dummy),
        Err(Violation::EmptyDummy(1))
    );
    let mut dropped = full(&np);
    dropped.bits[0] = false;
    assert!(matches!(
        validate_vector(&np, &dropped),
        Err(Violation::UnremovableDropped {
            child: 1,
            parent: 0
        })
    ));
}

#[test]
fn sampling_is_deterministic_and_exhaustive() {
    let f = forest("billsum_01");
    let a = sample_valid(&f, 20, 42).unwrap();
    let b = sample_valid(&f, 20, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 20);
    let all = sample_valid(&f, 1000, 3).unwrap();
    assert_eq!(all, enumerate_valid(&f, DEFAULT_CAP).unwrap());
}

#[test]
fn constraints_and_locks() {
    let f = forest("medqa_01");
    let mut c = Constraints::new();
    c.insert(5, Lock::Included);
    // upon urination forces with burning: 4 free combinations of the rest
    assert_eq!(count_valid_with(&f, &c).unwrap(), ValidCount::Exact(8));
    let locked = f.set_lock(2, Some(Lock::Excluded)).unwrap();
    assert_eq!(count_valid(&locked), ValidCount::Exact(12));
    for v in enumerate_valid(&locked, DEFAULT_CAP).unwrap() {
        assert!(!v.bits[1]);
    }
    c.insert(4, Lock::Excluded);
    assert_eq!(count_valid_with(&f, &c).unwrap(), ValidCount::Exact(0));
    assert!(matches!(
        sample_valid_with(&f, &c, 1, 0),
        Err(EngineError::Infeasible)
    ));
    let mut bad = Constraints::new();
    bad.insert(40, Lock::Included);
    assert_eq!(
        count_valid_with(&f, &bad),
        Err(EngineError::UnknownSegment(40))
    );
}

#[test]
fn jsonl_round_trip() {
    let f = forest("finqa_01");
    let cfs = realize_batch(&f, &enumerate_valid(&f, DEFAULT_CAP).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &cfs).unwrap();
    let src = String::from_utf8(buf).unwrap();
    assert_eq!(src.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(src.lines().next().unwrap()).unwrap();
    for key in ["id", "bits", "choices", "text", "word_count"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(read_jsonl(&src).unwrap(), cfs);
}

#[test]
fn saturating_count_flags_overflow() {
    assert!(ValidCount::Saturated.exceeds(usize::MAX));
    assert_eq!(ValidCount::Exact(5).exact(), Some(5));
    assert!(!ValidCount::Exact(5).exceeds(5));
}
