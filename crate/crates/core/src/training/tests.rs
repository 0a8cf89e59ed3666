use proptest::prelude::*;

use super::*;
use crate::data::{generate_split, relation_vocabulary, GeneratorSpec, PairVariant, Record, Split};
use crate::model::ModelConfig;
use crate::numerics::{Fault, ParamId, ParamStore};

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

fn records(task: TaskKind, split: Split, n: usize) -> Vec<Record> {
    let mut s = GeneratorSpec::new(task, 5, [n, n, n]);
    s.min_nodes = 5;
    s.max_nodes = 6;
    s.variant = PairVariant::GraphSensitive;
    if task == TaskKind::Qa {
        s.choices = 3;
    }
    if task == TaskKind::Retrieval {
        s.pool = 4;
    }
    generate_split(&s, split).unwrap()
}

struct Setup {
    model: Janus,
    train: Vec<Sample>,
    dev: Vec<Sample>,
}

fn setup(task: TaskKind, precision: Precision, cfg: ModelConfig, n: usize) -> Setup {
    let tr = records(task, Split::Train, n);
    let dv = records(task, Split::Dev, n);
    let mut rels = relation_vocabulary(&tr);
    rels.extend(relation_vocabulary(&dv));
    rels.sort();
    rels.dedup();
    let model = Janus::new(cfg, task, rels, precision).unwrap();
    let mut cache = model.new_cache();
    let mut train = model.prepare_all(&tr).unwrap();
    let mut dev = model.prepare_all(&dv).unwrap();
    model.fill_descriptions(&mut train, &mut cache).unwrap();
    model.fill_descriptions(&mut dev, &mut cache).unwrap();
    Setup { model, train, dev }
}

fn train_config(precision: Precision) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-2,
        precision,
        threads: 1,
        ..TrainConfig::default()
    }
}

// Independent transcription of one rectified-Adam step, including decoupled
// weight decay, for a scalar parameter.
fn radam_reference(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as f64;
        theta -= lr * wd * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powf(t));
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
        if rho_t > 4.0 {
            let l = (1.0 - b2.powf(t)).sqrt() / (v.sqrt() + eps);
            let r = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            theta -= lr * r * m_hat * l;
        } else {
            theta -= lr * m_hat;
        }
    }
    theta
}

fn scalar_store(x: f64) -> (ParamStore, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(x), true);
    (s, id)
}

fn grads_of(id: ParamId, g: f64) -> Grads {
    let mut out = Grads::new();
    out.add(id, &Tensor::scalar(g)).unwrap();
    out
}

#[test]
fn radam_matches_reference_transcription() {
    for (lr, wd) in [(0.1, 0.0), (0.05, 0.01)] {
        // f(x) = (x - 3)^2, gradients taken at the current iterate.
        let (mut store, id) = scalar_store(0.5);
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Radam, lr, wd));
        let mut seen = Vec::new();
        for _ in 0..12 {
            let x = store.value(id).data()[0];
            let g = 2.0 * (x - 3.0);
            seen.push(g);
            opt.step(&mut store, &grads_of(id, g), Precision::F64).unwrap();
            let expect = radam_reference(0.5, &seen, lr, wd);
            assert!((store.value(id).data()[0] - expect).abs() <= 1e-10, "step {}", seen.len());
        }
    }
}

#[test]
fn single_radam_step_is_an_sgd_momentum_step() {
    let (mut store, id) = scalar_store(1.0);
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Radam, 0.1, 0.0));
    opt.step(&mut store, &grads_of(id, 0.5), Precision::F64).unwrap();
    assert!((sma_length(0.999, 1) - 1.0).abs() < 1e-9);
    assert!((store.value(id).data()[0] - 0.95).abs() <= 1e-12);
}

#[test]
fn zero_gradient_without_decay_is_a_fixed_point() {
    for kind in [OptimizerKind::Radam, OptimizerKind::Adam] {
        let (mut store, id) = scalar_store(0.7);
        let mut opt = Optimizer::new(OptimizerConfig::new(kind, 0.1, 0.0));
        for _ in 0..8 {
            opt.step(&mut store, &grads_of(id, 0.0), Precision::F64).unwrap();
        }
        assert_eq!(store.value(id).data()[0], 0.7);
    }
}

#[test]
fn weight_decay_alone_shrinks_the_norm() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::row(vec![1.0, -2.0, 3.0]), true);
    let before = store.value(a).norm();
    let mut g = Grads::new();
    g.add(a, &Tensor::zeros(&[1, 3])).unwrap();
    Optimizer::new(OptimizerConfig::new(OptimizerKind::Radam, 0.1, 0.01))
        .step(&mut store, &g, Precision::F64)
        .unwrap();
    let after = store.value(a).norm();
    assert!(after < before);
    assert!((after - before * (1.0 - 0.001)).abs() < 1e-12);
}

#[test]
fn frozen_params_and_bad_gradients_are_left_alone() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::row(vec![1.0, 2.0]), true);
    let f = store.add("frozen", Tensor::row(vec![1.0, 2.0]), false);
    let mut g = Grads::new();
    g.add(a, &Tensor::row(vec![0.1, 0.1])).unwrap();
    g.add(f, &Tensor::row(vec![0.1, 0.1])).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Radam, 0.1, 0.01));
    opt.step(&mut store, &g, Precision::F64).unwrap();
    assert_eq!(store.value(f).data(), &[1.0, 2.0]);
    assert_ne!(store.value(a).data(), &[1.0, 2.0]);

    let snapshot = store.value(a).clone();
    let mut bad = Grads::new();
    bad.add(a, &Tensor::row(vec![0.1, f64::NAN])).unwrap();
    let err = opt.step(&mut store, &bad, Precision::F64).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("a at coordinate 1")), "{err}");
    assert_eq!(store.value(a), &snapshot);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn clipping_halves_or_keeps() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::row(vec![0.0, 0.0]), true);
    let mut g = Grads::new();
    g.add(a, &Tensor::row(vec![1.2, 1.6])).unwrap();
    assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 2.0);
    assert_eq!(g.get(a).unwrap().data(), &[0.6, 0.8]);
    let mut small = Grads::new();
    small.add(a, &Tensor::row(vec![0.3, 0.4])).unwrap();
    clip_global_norm(&mut small, 1.0).unwrap();
    assert_eq!(small.get(a).unwrap().data(), &[0.3, 0.4]);
    assert!(clip_global_norm(&mut small, 0.0).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_is_min_of_norm_and_max(
        values in prop::collection::vec(-10.0f64..10.0, 1..40),
        split in 1usize..5,
        max_norm in 0.01f64..5.0,
    ) {
        let mut store = ParamStore::new();
        let mut g = Grads::new();
        for (i, chunk) in values.chunks(split).enumerate() {
            let id = store.add(format!("p{i}"), Tensor::row(vec![0.0; chunk.len()]), true);
            g.add(id, &Tensor::row(chunk.to_vec())).unwrap();
        }
        // Direct norm oracle.
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let reported = clip_global_norm(&mut g, max_norm).unwrap();
        prop_assert!((reported - norm).abs() <= 1e-9);
        let after = g.iter().flat_map(|(_, t)| t.data().to_vec()).map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((after - norm.min(max_norm)).abs() <= 1e-9);
        prop_assert!(after <= max_norm + 1e-9);
    }
}

fn block_grads(model: &Janus, grads: &Grads, block: &str) -> Vec<Vec<f64>> {
    model
        .blocks()
        .into_iter()
        .find(|(name, _)| *name == block)
        .unwrap()
        .1
        .into_iter()
        .map(|id| grads.get(id).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect()
}

#[test]
fn two_phase_step_matches_a_single_tape() {
    let mut cfg = small_config();
    cfg.encoder.dropout_rate = 0.0;
    let s = setup(TaskKind::Pair, Precision::F64, cfg, 4);
    let batch: Vec<&Sample> = s.train.iter().collect();
    let tc = train_config(Precision::F64);
    let step = batch_step(&s.model, &batch, &[0; 4], &tc).unwrap();

    let mut tape = Tape::new(s.model.store(), Precision::F64);
    let z: Vec<Vec<Var>> = batch
        .iter()
        .map(|b| vec![s.model.joint_embed(&mut tape, &b.units[0], None).unwrap()])
        .collect();
    let zn: Vec<Vec<Var>> = batch
        .iter()
        .map(|b| vec![tape.constant(Tensor::row(b.units[0].z_new.clone().unwrap()))])
        .collect();
    let lo = task_loss(&mut tape, &s.model, Branch::Original, &batch, &z, tc.tau).unwrap();
    let ln = task_loss(&mut tape, &s.model, Branch::Description, &batch, &zn, tc.tau).unwrap();
    let task = tape.add(lo, ln).unwrap();
    let rows: Vec<Var> = z.iter().map(|v| v[0]).collect();
    let o = tape.concat_rows(&rows).unwrap();
    let rows: Vec<Var> = zn.iter().map(|v| v[0]).collect();
    let n = tape.concat_rows(&rows).unwrap();
    let o = tape.l2_normalize(o).unwrap();
    let n = tape.l2_normalize(n).unwrap();
    let a = info_nce(&mut tape, o, n, 1.0).unwrap();
    let (loss, b) = combined_loss(&mut tape, task, Some(a), tc.lambda).unwrap();
    assert!((b.combined - step.loss.combined).abs() < 1e-12);
    let reference = tape.backward(loss).unwrap().into_param_grads();
    for id in s.model.store().trainable_ids() {
        let (x, y) = (step.grads.get(id), reference.get(id));
        match (x, y) {
            (Some(x), Some(y)) => {
                for (p, q) in x.data().iter().zip(y.data()) {
                    assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{}", s.model.store().get(id).name);
                }
            }
            (None, None) => {}
            other => panic!("{}: {other:?}", s.model.store().get(id).name),
        }
    }
    assert!(step.grads.iter().all(|(id, _)| s.model.store().get(id).trainable));
}

#[test]
fn zero_lambda_records_infonce_but_adds_no_gradient() {
    let s = setup(TaskKind::Pair, Precision::F64, small_config(), 4);
    let batch: Vec<&Sample> = s.train.iter().collect();
    let mut tc = train_config(Precision::F64);
    tc.lambda = 0.0;
    let dual = batch_step(&s.model, &batch, &[3; 4], &tc).unwrap();
    assert!(dual.loss.info_nce > 0.0);
    assert_eq!(dual.loss.combined, dual.loss.task);
    tc.branch = BranchMode::OrigOnly;
    let orig = batch_step(&s.model, &batch, &[3; 4], &tc).unwrap();
    tc.branch = BranchMode::DescOnly;
    let desc = batch_step(&s.model, &batch, &[3; 4], &tc).unwrap();
    for block in ["gnn", "adapter", "head.orig"] {
        assert_eq!(block_grads(&s.model, &dual.grads, block), block_grads(&s.model, &orig.grads, block), "{block}");
    }
    assert_eq!(
        block_grads(&s.model, &dual.grads, "head.new"),
        block_grads(&s.model, &desc.grads, "head.new")
    );
    assert!(block_grads(&s.model, &orig.grads, "head.new").iter().all(Vec::is_empty));
    assert!(block_grads(&s.model, &desc.grads, "gnn").iter().all(Vec::is_empty));

    tc.branch = BranchMode::Dual;
    tc.lambda = 0.5;
    let aligned = batch_step(&s.model, &batch, &[3; 4], &tc).unwrap();
    assert_ne!(block_grads(&s.model, &aligned.grads, "gnn"), block_grads(&s.model, &orig.grads, "gnn"));
}

#[test]
fn every_task_trains_and_records_epochs() {
    for task in [TaskKind::Pair, TaskKind::Qa, TaskKind::Retrieval] {
        let mut s = setup(task, Precision::F32, small_config(), 6);
        let before = s.model.frozen_hash();
        let out = train(&mut s.model, &s.train, &s.dev, &train_config(Precision::F32), &mut RunSinks::default()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records[0].train.is_none());
        for r in &out.records[1..] {
            let t = r.train.unwrap();
            assert!(t.task.is_finite() && t.task >= 0.0, "{task}");
            let d = r.dev_distance.unwrap();
            assert!((0.0..=2.0).contains(&d));
        }
        assert_eq!(s.model.frozen_hash(), before, "{task}");
        let e = evaluate(&s.model, &s.dev, Branch::Original).unwrap();
        assert_eq!(e.metric, out.best_metric, "{task}");
    }
}

fn run_to_files(dir: &std::path::Path, tag: &str) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<EpochRecord>) {
    let mut s = setup(TaskKind::Pair, Precision::F64, small_config(), 8);
    let stem = dir.join(format!("ck-{tag}"));
    let tsv = dir.join(format!("m-{tag}.tsv"));
    let mut sinks = RunSinks {
        checkpoint: Some(stem.clone()),
        metrics: Some(MetricsLog::open(&tsv, "run").unwrap()),
    };
    let mut tc = train_config(Precision::F64);
    tc.epochs = 3;
    let out = train(&mut s.model, &s.train, &s.dev, &tc, &mut sinks).unwrap();
    let (m, p) = checkpoint_paths(&stem);
    (
        std::fs::read(tsv).unwrap(),
        std::fs::read(m).unwrap(),
        std::fs::read(p).unwrap(),
        out.records,
    )
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_to_files(dir.path(), "a");
    let b = run_to_files(dir.path(), "b");
    assert_eq!(a.3, b.3);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    let text = String::from_utf8(a.0).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 5));
    assert!(text.starts_with("run\t0\tdev\taccuracy\t"));
}

#[test]
fn checkpoint_reload_reproduces_the_best_dev_metric() {
    let dir = tempfile::tempdir().unwrap();
    for precision in [Precision::F32, Precision::F64] {
        let mut s = setup(TaskKind::Qa, precision, small_config(), 8);
        let stem = dir.path().join(format!("best-{}", precision.as_str()));
        let mut sinks = RunSinks {
            checkpoint: Some(stem.clone()),
            metrics: None,
        };
        let out = train(&mut s.model, &s.train, &s.dev, &train_config(precision), &mut sinks).unwrap();
        let (loaded, manifest) = load_checkpoint(&stem).unwrap();
        assert_eq!(manifest.epoch, out.best_epoch);
        assert_eq!(manifest.dev_metric, out.best_metric);
        assert_eq!(manifest.dtype, precision);
        for ((_, p), (_, q)) in loaded.store().iter().zip(s.model.store().iter()) {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        let dev = loaded.prepare_all(&records(TaskKind::Qa, Split::Dev, 8)).unwrap();
        let e = evaluate(&loaded, &dev, Branch::Original).unwrap();
        assert_eq!(e.metric.to_bits(), out.best_metric.to_bits());
        manifest.check_compatible(loaded.config(), TaskKind::Qa).unwrap();
        let mut other = loaded.config().clone();
        other.encoder.num_layers = 3;
        assert!(matches!(manifest.check_compatible(&other, TaskKind::Qa), Err(Error::Config(m)) if m.contains("num_layers")));
        assert!(manifest.check_compatible(loaded.config(), TaskKind::Pair).is_err());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = setup(TaskKind::Pair, Precision::F32, small_config(), 2);
    let stem = dir.path().join("ck");
    save_checkpoint(&stem, &s.model, &train_config(Precision::F32), None, 0, 0.5).unwrap();
    let (m, p) = checkpoint_paths(&stem);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(&stem), Err(Error::Checkpoint(_))));
    std::fs::write(&p, &bytes).unwrap();
    let text = std::fs::read_to_string(&m).unwrap();
    std::fs::write(&m, text.replacen("format_version = 1", "format_version = 9", 1)).unwrap();
    assert!(matches!(load_checkpoint(&stem), Err(Error::Checkpoint(_))));
    std::fs::write(&m, text.replacen("trainable = true", "trainable = false", 1)).unwrap();
    assert!(matches!(load_checkpoint(&stem), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = setup(TaskKind::Pair, Precision::F64, small_config(), 4);
    let w = s.model.head(Branch::Original).params()[0];
    s.model.store_mut().get_mut(w).value.fill(f64::INFINITY);
    let start = s.model.store().clone();
    let mut tc = train_config(Precision::F64);
    tc.branch = BranchMode::OrigOnly;
    let stem = dir.path().join("ck");
    let mut sinks = RunSinks {
        checkpoint: Some(stem.clone()),
        metrics: None,
    };
    let err = train(&mut s.model, &s.train, &s.dev, &tc, &mut sinks).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let (loaded, manifest) = load_checkpoint(&stem).unwrap();
    assert_eq!(manifest.epoch, 0);
    for ((_, p), (_, q)) in loaded.store().iter().zip(start.iter()) {
        assert_eq!(p.value, q.value);
    }
    for ((_, p), (_, q)) in s.model.store().iter().zip(start.iter()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn evaluation_is_repeatable_and_needs_the_graph() {
    let s = setup(TaskKind::Retrieval, Precision::F32, small_config(), 6);
    let a = evaluate(&s.model, &s.dev, Branch::Original).unwrap();
    let b = evaluate(&s.model, &s.dev, Branch::Original).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.metric));
    let mut cfg = small_config();
    cfg.use_graph = false;
    let t = setup(TaskKind::Retrieval, Precision::F32, cfg, 6);
    let z_graph = s.model.embed(&s.dev[0].units[0]).unwrap();
    let z_text = t.model.embed(&t.dev[0].units[0]).unwrap();
    assert_ne!(z_graph, z_text);
    assert!(evaluate(&s.model, &[], Branch::Original).is_err());
}

#[test]
fn invalid_train_configs_are_rejected() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { lambda: -0.1, ..ok.clone() },
        TrainConfig { lr: 0.0, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { tau: f64::NAN, ..ok.clone() },
        TrainConfig { max_grad_norm: -1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let parsed: TrainConfig = toml::from_str("lr = 0.01\nbranch = \"orig-only\"\noptimizer = \"adam\"\n").unwrap();
    assert_eq!(parsed.branch, BranchMode::OrigOnly);
    assert_eq!(parsed.optimizer, OptimizerKind::Adam);
    assert!(toml::from_str::<TrainConfig>("learning_rate = 0.01\n").is_err());
}

#[test]
fn metric_lines_are_tab_separated() {
    assert_eq!(metric_line("r1", 3, "dev", "accuracy", 0.75), "r1\t3\tdev\taccuracy\t0.75\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsv");
    for _ in 0..2 {
        let mut log = MetricsLog::open(&path, "r").unwrap();
        log.write(1, "train", "loss", 1.5).unwrap();
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "r\t1\ttrain\tloss\t1.5\nr\t1\ttrain\tloss\t1.5\n");
    assert!(MetricsLog::open(&path, "a\tb").is_err());
}

#[test]
fn full_objective_passes_gradient_check_on_the_micro_model() {
    let s = setup(TaskKind::Pair, Precision::F64, ModelConfig::micro(), 2);
    let tc = train_config(Precision::F64);
    let report = check_gradients(&s.model, &s.train, &tc, GradCheckOptions::ridders()).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.blocks.len(), s.model.store().trainable_ids().len());
    let mut faulty = GradCheckOptions::ridders();
    faulty.fault = Some(Fault::MatmulBackward);
    let report = check_gradients(&s.model, &s.train, &tc, faulty).unwrap();
    assert!(!report.passed(), "injected fault went unnoticed");
}

