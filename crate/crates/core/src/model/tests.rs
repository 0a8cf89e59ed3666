use super::*;
use crate::data::{generate_split, relation_vocabulary, GeneratorSpec, Split};
use crate::numerics::{grad_check, GradCheckOptions};

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.backbone.dim = 8;
    c.backbone.ff_dim = 16;
    c.backbone.layers = 1;
    c.backbone.context_length = 48;
    c.encoder.hidden_dim = 8;
    c.encoder.num_layers = 2;
    c.encoder.type_dim = 4;
    c.encoder.relation_dim = 4;
    c.encoder.relation_feature_dim = 4;
    c.head_hidden = 8;
    c
}

fn records(task: TaskKind, n: usize) -> Vec<Record> {
    let mut s = GeneratorSpec::new(task, 5, [n, 2, 2]);
    s.min_nodes = 6;
    s.max_nodes = 7;
    generate_split(&s, Split::Train).unwrap()
}

fn model(task: TaskKind, recs: &[Record], precision: Precision) -> Janus {
    Janus::new(small_config(), task, relation_vocabulary(recs), precision).unwrap()
}

#[test]
fn f32_models_hold_f32_weights() {
    let recs = records(TaskKind::Pair, 2);
    let m = model(TaskKind::Pair, &recs, Precision::F32);
    for (_, p) in m.store().iter() {
        assert!(p.value.data().iter().all(|&x| x == x as f32 as f64), "{}", p.name);
    }
    let backbone_only = m.store().iter().filter(|(_, p)| !p.trainable).all(|(_, p)| p.name.starts_with("backbone."));
    assert!(backbone_only);
}

#[test]
fn no_graph_mode_is_the_sentence_embedding() {
    let recs = records(TaskKind::Pair, 4);
    let mut cfg = small_config();
    cfg.use_graph = false;
    let m = Janus::new(cfg, TaskKind::Pair, relation_vocabulary(&recs), Precision::F32).unwrap();
    for s in m.prepare_all(&recs).unwrap() {
        let u = &s.units[0];
        let z = m.embed(u).unwrap();
        let expect = m.backbone().sentence_embedding(m.store(), Precision::F32, &u.text).unwrap();
        assert_eq!(z, expect);
    }
}

#[test]
fn graph_changes_the_embedding() {
    let recs = records(TaskKind::Pair, 4);
    let m = model(TaskKind::Pair, &recs, Precision::F64);
    let samples = m.prepare_all(&recs).unwrap();
    for s in &samples {
        let z = m.embed(&s.units[0]).unwrap();
        assert_eq!(z.len(), 8);
        let text_only = m.backbone().sentence_embedding(m.store(), Precision::F64, &s.units[0].text).unwrap();
        assert_ne!(z, text_only);
    }
}

#[test]
fn qa_units_link_the_choice_node() {
    let recs = records(TaskKind::Qa, 3);
    let m = model(TaskKind::Qa, &recs, Precision::F32);
    for (r, s) in recs.iter().zip(m.prepare_all(&recs).unwrap()) {
        let Record::Qa(q) = r else { panic!() };
        assert_eq!(s.units.len(), q.choices.len());
        assert_eq!(s.align_units(), vec![q.gold]);
        for (i, u) in s.units.iter().enumerate() {
            let choice = q.choices[i].node.unwrap();
            assert_eq!(u.graph.nodes[choice].node_type, NODE_TYPE_LINKED);
            assert_eq!(u.graph.nodes[q.linked[0]].node_type, NODE_TYPE_LINKED);
            let linked = u.graph.nodes.iter().filter(|n| n.node_type == NODE_TYPE_LINKED).count();
            assert_eq!(linked, 2);
            assert_eq!(u.graph.query_node, Some(q.graph.node_count()));
        }
    }
}

#[test]
fn retrieval_units_put_the_query_first() {
    let recs = records(TaskKind::Retrieval, 2);
    let m = model(TaskKind::Retrieval, &recs, Precision::F32);
    for s in m.prepare_all(&recs).unwrap() {
        let Target::Ranking { ids, gains, positive } = &s.target else { panic!() };
        assert_eq!(s.units.len(), ids.len() + 1);
        assert_eq!(gains[*positive], 1.0);
        assert_eq!(s.train_units(), vec![0, positive + 1]);
        assert!(s.units[0].text.starts_with("documents related to"));
    }
}

#[test]
fn mismatched_task_is_a_config_error() {
    let recs = records(TaskKind::Pair, 2);
    let m = model(TaskKind::Qa, &recs, Precision::F32);
    assert!(matches!(m.prepare(&recs[0]), Err(Error::Config(_))));
}

#[test]
fn oversized_graph_is_rejected() {
    let recs = records(TaskKind::Pair, 2);
    let mut cfg = small_config();
    cfg.max_nodes = 3;
    let m = Janus::new(cfg, TaskKind::Pair, relation_vocabulary(&recs), Precision::F32).unwrap();
    assert!(matches!(m.prepare(&recs[0]), Err(Error::Graph(_))));
}

#[test]
fn descriptions_come_from_the_cache() {
    let recs = records(TaskKind::Pair, 3);
    let m = model(TaskKind::Pair, &recs, Precision::F32);
    let mut samples = m.prepare_all(&recs).unwrap();
    let mut cache = m.new_cache();
    m.fill_descriptions(&mut samples, &mut cache).unwrap();
    assert_eq!(cache.len(), 3);
    for s in &samples {
        let u = &s.units[0];
        let direct = description_branch_embed(m.backbone(), m.store(), Precision::F32, &u.description, &u.text).unwrap();
        let rounded: Vec<f64> = direct.iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(u.z_new.as_ref().unwrap(), &rounded);
    }
    let mut other = Janus::new(
        ModelConfig {
            backbone: BackboneConfig { seed: 99, ..small_config().backbone },
            ..small_config()
        },
        TaskKind::Pair,
        relation_vocabulary(&recs),
        Precision::F32,
    )
    .unwrap();
    let mut samples2 = other.prepare_all(&recs).unwrap();
    assert!(matches!(
        other.fill_descriptions(&mut samples2, &mut cache),
        Err(Error::Contract(_))
    ));
    let _ = other.store_mut();
}

#[test]
fn frozen_hash_ignores_trainable_weights() {
    let recs = records(TaskKind::Pair, 2);
    let mut m = model(TaskKind::Pair, &recs, Precision::F32);
    let samples = m.prepare_all(&recs).unwrap();
    let (h, n) = (m.frozen_hash(), m.node_init_hash(&samples).unwrap());
    let head = m.head(Branch::Original).params()[0];
    m.store_mut().get_mut(head).value.fill(0.5);
    assert_eq!(m.frozen_hash(), h);
    assert_eq!(m.node_init_hash(&samples).unwrap(), n);
    let bb = m.store().id("backbone.final_norm.gamma").unwrap();
    m.store_mut().get_mut(bb).value.fill(0.5);
    assert_ne!(m.frozen_hash(), h);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let recs = records(TaskKind::Pair, 2);
    let m = model(TaskKind::Pair, &recs, Precision::F64);
    let samples = m.prepare_all(&recs).unwrap();
    let mut store = m.store().clone();
    let ids = store.trainable_ids();
    let report = grad_check(
        |t: &mut Tape| {
            let z = m.joint_embed(t, &samples[0].units[0], None)?;
            let s = m.score(t, Branch::Original, z)?;
            t.sigmoid(s);
            Ok(s)
        },
        &mut store,
        &ids,
        GradCheckOptions::ridders(),
    )
    .unwrap();
    // head.new is off this path; both sides report zero for it.
    assert!(report.passed(), "{report}");
}
