use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::backbone::BackboneConfig;
use crate::graph::{integrate_query_node, QueryContext, NODE_TYPE_REGULAR};
use crate::numerics::{grad_check, GradCheckOptions};

fn triples(list: &[(&str, &str, &str)]) -> TypedGraph {
    let mut rels: Vec<String> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut g_edges = Vec::new();
    for (a, r, b) in list {
        let mut id = |n: &str| match names.iter().position(|x| x == n) {
            Some(i) => i,
            None => {
                names.push(n.to_string());
                names.len() - 1
            }
        };
        let (ia, ib) = (id(a), id(b));
        let ir = match rels.iter().position(|x| x == r) {
            Some(i) => i,
            None => {
                rels.push(r.to_string());
                rels.len() - 1
            }
        };
        g_edges.push((ia, ir, ib));
    }
    let mut g = TypedGraph::new(rels);
    for n in names {
        g.add_node(n, NODE_TYPE_REGULAR);
    }
    for (a, r, b) in g_edges {
        g.add_edge(a, r, b);
    }
    g
}

#[test]
fn serializes_the_worked_example() {
    let g = triples(&[
        ("analyzing", "causes", "new knowledge"),
        ("knowledge", "causes", "learn"),
        ("learn", "causes", "find information"),
    ]);
    assert_eq!(
        serialize_graph(&g).unwrap(),
        "analyzing causes new knowledge; knowledge causes learn; learn causes find information."
    );
}

#[test]
fn serializes_degenerate_graphs() {
    assert_eq!(serialize_graph(&TypedGraph::new(vec![])).unwrap(), "");
    assert_eq!(serialize_graph(&triples(&[("a", "r", "b")])).unwrap(), "a r b.");
}

#[test]
fn serialization_skips_the_query_node() {
    let g = triples(&[("a", "r", "b")]);
    let ctx = QueryContext::new("q", [0, 1], vec![0.0; 2]);
    let integ = integrate_query_node(&g, &Tensor::zeros(&[2, 2]), &ctx).unwrap();
    assert_eq!(serialize_graph(&integ.graph).unwrap(), "a r b.");
}

#[test]
fn missing_relation_name_is_an_error() {
    let mut g = triples(&[("a", "r", "b")]);
    g.edges[0].rel = 5;
    assert!(matches!(serialize_graph(&g), Err(Error::Graph(_))));
}

#[test]
fn description_sequence_layout_and_truncation() {
    let s = description_sequence(&[], &[10, 11], 128);
    assert_eq!(s.roles(), vec![Role::Bos, Role::Sep, Role::Text, Role::Text, Role::Eos]);
    // description is cut before the text
    let s = description_sequence(&[5; 10], &[6; 4], 10);
    assert_eq!(s.len(), 10);
    let sep = s.roles().iter().position(|r| *r == Role::Sep).unwrap();
    assert_eq!(sep, 4);
    let s = description_sequence(&[5; 10], &[6; 20], 10);
    assert_eq!(s.len(), 10);
    assert_eq!(s.roles()[1], Role::Sep);
}

fn backbone() -> (ParamStore, Backbone) {
    let mut store = ParamStore::new();
    let bb = Backbone::new(BackboneConfig::default(), &mut store).unwrap();
    (store, bb)
}

#[test]
fn description_branch_is_sensitive_to_the_graph() {
    let (store, bb) = backbone();
    let a = description_branch_embed(&bb, &store, Precision::F64, "a causes b.", "what is it").unwrap();
    let b = description_branch_embed(&bb, &store, Precision::F64, "c part of d.", "what is it").unwrap();
    assert_ne!(a, b);
    let empty = description_branch_embed(&bb, &store, Precision::F64, "", "what is it").unwrap();
    assert!(empty.iter().all(|x| x.is_finite()));
}

#[test]
fn cache_hits_and_reloads_are_bitwise_identical() {
    let (store, bb) = backbone();
    let mut cache = DescriptionCache::new(bb.dim(), 17, "abc");
    let mut calls = 0;
    let first = cache
        .get_or_compute("s1#0", || {
            calls += 1;
            description_branch_embed(&bb, &store, Precision::F64, "a r b.", "text")
        })
        .unwrap();
    let again = cache
        .get_or_compute("s1#0", || {
            calls += 1;
            description_branch_embed(&bb, &store, Precision::F64, "a r b.", "text")
        })
        .unwrap();
    assert_eq!(calls, 1);
    assert_eq!(first, again);
    let fresh = description_branch_embed(&bb, &store, Precision::F64, "a r b.", "text").unwrap();
    let fresh32: Vec<f64> = fresh.iter().map(|&x| x as f32 as f64).collect();
    assert_eq!(first, fresh32);

    cache.insert("s2 with space#1", &fresh).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("train.desc");
    cache.save(&stem).unwrap();
    let loaded = DescriptionCache::load(&stem).unwrap();
    assert_eq!(loaded, cache);
    assert_eq!(loaded.get("s1#0").unwrap(), first);
}

#[test]
fn corrupt_cache_is_rejected() {
    let mut cache = DescriptionCache::new(2, 1, "h");
    cache.insert("a", &[1.0, 2.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("c");
    cache.save(&stem).unwrap();
    let (_, bin) = DescriptionCache::paths(&stem);
    std::fs::write(&bin, [0u8; 3]).unwrap();
    assert!(DescriptionCache::load(&stem).is_err());
    assert!(cache.insert("x", &[1.0]).is_err());
    assert!(cache.insert("bad\nkey", &[1.0, 2.0]).is_err());
}

/// Independent scalar-loop transcription of the loss.
fn info_nce_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut loss = 0.0;
    for i in 0..a.len() {
        let num = (dot(&a[i], &b[i]) / tau).exp();
        let den: f64 = (0..b.len()).map(|j| (dot(&a[i], &b[j]) / tau).exp()).sum();
        loss -= (num / den).ln();
    }
    loss
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn nce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store, Precision::F64);
    let za = t.constant(Tensor::from_rows(a)?);
    let zb = t.constant(Tensor::from_rows(b)?);
    let l = info_nce(&mut t, za, zb, tau)?;
    t.value(l).item()
}

#[test]
fn single_pair_loss_is_zero() {
    let v = vec![vec![0.6, 0.8]];
    let w = vec![vec![1.0, 0.0]];
    assert_eq!(nce(&v, &w, 1.0).unwrap(), 0.0);
}

#[test]
fn orthonormal_diagonal_closed_form() {
    let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let expect = 4.0 * (1.0 + 3.0 / std::f64::consts::E).ln();
    assert!((nce(&eye, &eye, 1.0).unwrap() - expect).abs() < 1e-9);
    // 2.97467..., quoted elsewhere as roughly 2.9750
    assert!((expect - 2.974_67).abs() < 1e-5);
}

#[test]
fn random_unit_batches_cost_about_log_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [8usize, 32] {
        let a = unit_rows(n, 1024, &mut rng);
        let b = unit_rows(n, 1024, &mut rng);
        let per = nce(&a, &b, 1.0).unwrap() / n as f64;
        assert!((per - (n as f64).ln()).abs() < 0.1, "n={n}: {per}");
    }
}

#[test]
fn unnormalised_rows_are_rejected() {
    let a = vec![vec![2.0, 0.0]];
    let b = vec![vec![1.0, 0.0]];
    assert!(matches!(nce(&a, &b, 1.0), Err(Error::Contract(_))));
    assert!(matches!(nce(&b, &a, 1.0), Err(Error::Contract(_))));
    assert!(nce(&b, &b, 0.0).is_err());
}

#[test]
fn info_nce_passes_grad_check_through_normalisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let a = store.add_normal("a", &[5, 6], 1.0, true, &mut rng);
    let b = store.add_normal("b", &[5, 6], 1.0, true, &mut rng);
    let report = grad_check(
        |t: &mut Tape| {
            let (va, vb) = (t.param(a), t.param(b));
            let na = t.l2_normalize(va)?;
            let nb = t.l2_normalize(vb)?;
            info_nce(t, na, nb, 0.5)
        },
        &mut store,
        &[a, b],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn alignment_distance_examples() {
    let same = vec![(vec![1.0, 2.0], vec![2.0, 4.0])];
    assert!(alignment_distance(&same).unwrap().abs() < 1e-12);
    let opposite = vec![(vec![1.0, 0.0], vec![-3.0, 0.0])];
    assert!((alignment_distance(&opposite).unwrap() - 2.0).abs() < 1e-12);
    assert!(alignment_distance(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matches_scalar_oracle_and_is_nonnegative(n in 1usize..7, d in 2usize..6, seed in 0u64..10_000, tau in 0.2f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(n, d, &mut rng);
        let b = unit_rows(n, d, &mut rng);
        let got = nce(&a, &b, tau).unwrap();
        prop_assert!((got - info_nce_oracle(&a, &b, tau)).abs() < 1e-9);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn consistent_permutation_leaves_loss_unchanged(n in 2usize..7, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(n, 4, &mut rng);
        let b = unit_rows(n, 4, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = perm.iter().map(|&i| b[i].clone()).collect();
        prop_assert!((nce(&a, &b, 1.0).unwrap() - nce(&pa, &pb, 1.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn raising_positive_cosine_lowers_loss(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(4, 5, &mut rng);
        let b = unit_rows(4, 5, &mut rng);
        // pull b[0] towards a[0]; the other rows stay fixed
        let mut closer = b.clone();
        let mixed: Vec<f64> = a[0].iter().zip(&b[0]).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        closer[0] = mixed.iter().map(|x| x / norm).collect();
        let before = nce(&a, &b, 1.0).unwrap();
        let after = nce(&a, &closer, 1.0).unwrap();
        // only the first row's positive moved; its term must not rise
        let term = |bb: &[Vec<f64>]| {
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            let den: f64 = bb.iter().map(|r| dot(&a[0], r).exp()).sum();
            -(dot(&a[0], &bb[0]).exp() / den).ln()
        };
        prop_assert!(term(&closer) <= term(&b) + 1e-12);
        prop_assert!(before.is_finite() && after.is_finite());
    }

    #[test]
    fn distance_lies_in_zero_two(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(n, 3, &mut rng);
        let b = unit_rows(n, 3, &mut rng);
        let pairs: Vec<_> = a.into_iter().zip(b).collect();
        let d = alignment_distance(&pairs).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
    }
}
