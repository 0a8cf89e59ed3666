use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use proptest::prelude::*;

use super::*;
use crate::alignment::serialize_graph;

fn spec(task: TaskKind, sizes: [usize; 3]) -> GeneratorSpec {
    GeneratorSpec::new(task, 11, sizes)
}

fn pairs(records: &[Record]) -> Vec<&PairRecord> {
    records
        .iter()
        .map(|r| match r {
            Record::Pair(p) => p,
            other => panic!("expected pair, got {}", other.task()),
        })
        .collect()
}

fn roundtrip(records: &[Record]) -> Vec<Record> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save(&path, records).unwrap();
    load(&path).unwrap()
}

#[test]
fn every_kind_round_trips() {
    for task in [TaskKind::Pair, TaskKind::Qa, TaskKind::Retrieval] {
        let recs = generate_split(&spec(task, [6, 2, 2]), Split::Train).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(roundtrip(&recs), recs, "{task}");
        for r in &recs {
            r.validate(DEFAULT_NODE_CAP).unwrap();
        }
    }
}

const DEFAULT_NODE_CAP: usize = crate::graph::DEFAULT_MAX_NODES;

#[test]
fn pair_sizes_below_two_are_rejected() {
    assert!(matches!(
        generate(&spec(TaskKind::Pair, [1, 4, 4])),
        Err(Error::Config(_))
    ));
    assert!(generate(&spec(TaskKind::Pair, [2, 2, 2])).is_ok());
}

#[test]
fn pairs_are_balanced_and_negatives_mismatch() {
    for n in [1usize, 5, 40] {
        let recs = generate_split(&spec(TaskKind::Pair, [2 * n, 2, 2]), Split::Train).unwrap();
        let ps = pairs(&recs);
        assert_eq!(ps.iter().filter(|p| p.label).count(), n);
        assert_eq!(ps.iter().filter(|p| !p.label).count(), n);
        for p in ps {
            let own = serialize_graph(&p.graph).unwrap();
            // Serialization-match oracle.
            assert_eq!(p.label, p.text == own, "{}", p.id);
        }
    }
}

#[test]
fn graph_sensitive_labels_follow_topic_oracle() {
    let mut s = spec(TaskKind::Pair, [400, 2, 2]);
    s.variant = PairVariant::GraphSensitive;
    let recs = generate_split(&s, Split::Train).unwrap();
    let ps = pairs(&recs);
    assert_eq!(ps.iter().filter(|p| p.label).count(), 200);
    for p in &ps {
        // Topic-match oracle: one relation family per graph, compared with the named topic.
        let g = pair_topic_of_graph(&p.graph).unwrap();
        let t = pair_topic_of_text(&p.text).unwrap();
        assert_eq!(p.label, g == t, "{}", p.id);
        assert!(t < s.topics / 2);
        assert_eq!(p.linked.len(), p.graph.node_count());
    }
    // The text alone carries no label signal: every topic text is about half positive.
    for topic in 0..s.topics / 2 {
        let with: Vec<_> = ps.iter().filter(|p| pair_topic_of_text(&p.text) == Some(topic)).collect();
        let pos = with.iter().filter(|p| p.label).count() as f64;
        let frac = pos / with.len() as f64;
        assert!((0.4..=0.6).contains(&frac), "topic {topic}: {frac}");
    }
}

#[test]
fn noise_flips_labels() {
    let mut s = spec(TaskKind::Pair, [400, 2, 2]);
    s.noise = 0.25;
    let recs = generate_split(&s, Split::Train).unwrap();
    let flipped = pairs(&recs)
        .iter()
        .filter(|p| p.label != (p.text == serialize_graph(&p.graph).unwrap()))
        .count();
    assert!((60..=140).contains(&flipped), "{flipped}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for task in [TaskKind::Pair, TaskKind::Qa, TaskKind::Retrieval] {
        let s = spec(task, [12, 4, 4]);
        let mut bytes = Vec::new();
        for run in 0..2 {
            let path = dir.path().join(format!("{task}-{run}.jsonl"));
            save(&path, &generate_split(&s, Split::Dev).unwrap()).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1], "{task}");
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate_split(&other, Split::Dev).unwrap(), generate_split(&s, Split::Dev).unwrap());
    }
}

#[test]
fn splits_are_disjoint() {
    for task in [TaskKind::Pair, TaskKind::Qa, TaskKind::Retrieval] {
        let all = generate(&spec(task, [10, 6, 6])).unwrap();
        let mut ids = HashSet::new();
        for (_, recs) in &all {
            for r in recs {
                assert!(ids.insert(r.id().to_string()), "{} repeated", r.id());
            }
        }
        assert_eq!(ids.len(), 22);
    }
}

#[test]
fn qa_gold_matches_path_oracle() {
    let recs = generate_split(&spec(TaskKind::Qa, [150, 2, 2]), Split::Train).unwrap();
    for r in &recs {
        let Record::Qa(q) = r else { panic!() };
        assert_eq!(q.choices.len(), 5);
        assert_eq!(qa_gold_oracle(q), Some(q.gold), "{}", q.id);
        assert_eq!(q.linked.len(), 1);
        let names: BTreeSet<&str> = q.choices.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(names.len(), 5);
        assert!(q.question.contains(&q.graph.nodes[q.linked[0]].name));
    }
}

#[test]
fn qa_choice_count_is_configurable() {
    let mut s = spec(TaskKind::Qa, [20, 2, 2]);
    s.choices = 3;
    for r in generate_split(&s, Split::Test).unwrap() {
        let Record::Qa(q) = r else { panic!() };
        assert_eq!(q.choices.len(), 3);
    }
    s.choices = 1;
    assert!(generate(&s).is_err());
}

#[test]
fn retrieval_has_one_motif_sharing_positive() {
    let recs = generate_split(&spec(TaskKind::Retrieval, [40, 2, 2]), Split::Train).unwrap();
    for r in &recs {
        let Record::Retrieval(q) = r else { panic!() };
        assert_eq!(q.candidates.len(), 10);
        let relevant: Vec<_> = q.candidates.iter().filter(|c| c.gain == 1.0).collect();
        assert_eq!(relevant.len(), 1);
        let ids: HashSet<&str> = q.candidates.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids.len(), q.candidates.len());
        for c in &q.candidates {
            // Motif-overlap oracle decides relevance.
            assert_eq!(motif_shared(&q.query.graph, &c.graph), c.gain > 0.0, "{}", c.id);
        }
        assert_eq!(q.positive().unwrap().id, relevant[0].id);
    }
}

#[test]
fn node_cap_is_enforced() {
    let mut s = spec(TaskKind::Pair, [4, 2, 2]);
    s.max_nodes = 201;
    s.entities = (0..300).map(|i| format!("e{i}")).collect();
    assert!(s.validate().is_err());
    s.max_nodes = 200;
    s.min_nodes = 190;
    let recs = generate_split(&s, Split::Train).unwrap();
    for r in &recs {
        let Record::Pair(p) = r else { panic!() };
        assert!((190..=200).contains(&p.graph.node_count()));
        r.validate(200).unwrap();
        assert!(r.validate(100).is_err());
    }
}

#[test]
fn spec_parses_from_toml_and_rejects_unknown_keys() {
    let s = GeneratorSpec::from_toml(
        "task = \"pair\"\nvariant = \"graph-sensitive\"\nseed = 3\ntrain = 10\ndev = 4\ntest = 4\nnoise = 0.0\n",
    )
    .unwrap();
    assert_eq!(s.variant, PairVariant::GraphSensitive);
    assert_eq!(s.min_nodes, 5);
    let err = GeneratorSpec::from_toml("task = \"pair\"\nseed = 3\ntrain = 10\ndev = 4\ntest = 4\ncolour = 1\n");
    assert!(matches!(err, Err(Error::Config(m)) if m.contains("colour")));
}

fn one_line() -> String {
    let recs = generate_split(&spec(TaskKind::Pair, [2, 2, 2]), Split::Train).unwrap();
    serde_json::to_string(&recs[0]).unwrap()
}

#[test]
fn unknown_field_is_reported_with_line() {
    let good = one_line();
    let bad = good.replacen("\"label\"", "\"colour\":1,\"label\"", 1);
    let text = format!("{good}\n{bad}\n");
    let err = parse_records(&text, Path::new("d.jsonl"));
    match err {
        Err(Error::Parse { line, detail, .. }) => {
            assert_eq!(line, 2);
            assert!(detail.contains("colour"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_final_line_errors_at_that_line() {
    let recs = generate_split(&spec(TaskKind::Qa, [3, 2, 2]), Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    save(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = &text[..text.len() - 20];
    std::fs::write(&path, cut).unwrap();
    match load(&path) {
        Err(Error::Parse { line, path: p, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(p, path);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_graphs_and_duplicates_are_rejected() {
    let good = one_line();
    let dangling = good.replacen("\"dst\":", "\"dst\":990", 1);
    assert!(matches!(
        parse_records(&dangling, Path::new("x")),
        Err(Error::Parse { line: 1, detail, .. }) if detail.contains("dangling")
    ));
    let dup = format!("{good}\n{good}\n");
    assert!(matches!(
        parse_records(&dup, Path::new("x")),
        Err(Error::Parse { line: 2, detail, .. }) if detail.contains("duplicate")
    ));
    let blank = format!("{good}\n\n{good}\n");
    assert!(matches!(parse_records(&blank, Path::new("x")), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn relation_vocabulary_is_sorted_union() {
    let recs = generate_split(&spec(TaskKind::Retrieval, [3, 2, 2]), Split::Train).unwrap();
    let v = relation_vocabulary(&recs);
    let mut sorted = v.clone();
    sorted.sort();
    assert_eq!(v, sorted);
    assert_eq!(v.len(), 6);
}

#[test]
fn ten_thousand_records_load_quickly() {
    let recs = generate_split(&spec(TaskKind::Pair, [10_000, 2, 2]), Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    save(&path, &recs).unwrap();
    let start = Instant::now();
    let loaded = load(&path).unwrap();
    let took = start.elapsed();
    assert_eq!(loaded.len(), 10_000);
    assert!(took.as_secs_f64() < 5.0, "{took:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_records_round_trip(seed in 0u64..1000, task in 0usize..3, noise in 0.0f64..0.5) {
        let task = [TaskKind::Pair, TaskKind::Qa, TaskKind::Retrieval][task];
        let mut s = GeneratorSpec::new(task, seed, [4, 2, 2]);
        s.noise = noise;
        let recs = generate_split(&s, Split::Train).unwrap();
        prop_assert_eq!(roundtrip(&recs), recs);
    }
}
