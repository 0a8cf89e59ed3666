//! Optimisation loop: dual-branch batches, clipping, RAdam, dev selection and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

use std::collections::HashMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_distance, info_nce};
use crate::error::{Error, Result};
use crate::graph::stable_hash;
use crate::model::{Branch, Janus, Sample, Target};
use crate::numerics::{grad_check, GradCheckOptions, GradReport, Grads, Precision, Tape, Tensor, Var};
use crate::tasks::{
    accuracy, argmax, choice_probabilities, combined_loss, ndcg_at_k, pair_loss, qa_loss, retrieval_loss,
    retrieval_rank, LossBreakdown, TaskKind,
};

pub use checkpoint::{
    checkpoint_paths, load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT,
};
pub use metrics::{metric_line, MetricsLog};
pub use optim::{clip_global_norm, sma_length, Optimizer, OptimizerConfig, OptimizerKind};

/// Which branches contribute to the task loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Dual,
    OrigOnly,
    DescOnly,
}

impl BranchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Dual => "dual",
            BranchMode::OrigOnly => "orig-only",
            BranchMode::DescOnly => "desc-only",
        }
    }

    /// The branch used at evaluation time.
    pub fn eval_branch(self) -> Branch {
        match self {
            BranchMode::DescOnly => Branch::Description,
            _ => Branch::Original,
        }
    }

    fn trains_original(self) -> bool {
        self != BranchMode::DescOnly
    }

    fn trains_description(self) -> bool {
        self != BranchMode::OrigOnly
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(BranchMode::Dual),
            "orig-only" => Ok(BranchMode::OrigOnly),
            "desc-only" => Ok(BranchMode::DescOnly),
            other => Err(Error::Config(format!("unknown branch mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Weight of the alignment loss.
    pub lambda: f64,
    /// Retrieval temperature.
    pub tau: f64,
    pub nce_temperature: f64,
    /// Seeds shuffling and dropout.
    pub seed: u64,
    pub precision: Precision,
    pub branch: BranchMode,
    pub optimizer: OptimizerKind,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            max_grad_norm: 1.0,
            lambda: 0.05,
            tau: 0.05,
            nce_temperature: 1.0,
            seed: 1,
            precision: Precision::F32,
            branch: BranchMode::Dual,
            optimizer: OptimizerKind::Radam,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("max_grad_norm", self.max_grad_norm),
            ("tau", self.tau),
            ("nce_temperature", self.nce_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lr * self.weight_decay >= 1.0 {
            return Err(Error::Config("lr * weight_decay must be below 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::new(self.optimizer, self.lr, self.weight_decay)
    }
}

/// Scores on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metric: f64,
    /// Mean distance between unit-normalised branch embeddings; `None` without descriptions.
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch loss; absent for the evaluation-only epoch 0.
    pub train: Option<LossBreakdown>,
    pub dev_metric: f64,
    pub dev_distance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Where a run writes its artefacts.
#[derive(Debug, Default)]
pub struct RunSinks {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<MetricsLog>,
}

fn seed_for(seed: u64, parts: &[u64]) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    stable_hash(&bytes)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn z_new(sample: &Sample, unit: usize) -> Result<&[f64]> {
    sample.units[unit]
        .z_new
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("{}: unit {unit} has no description embedding", sample.id)))
}

/// Task loss for one branch given each sample's train-unit embeddings.
fn task_loss(tape: &mut Tape, model: &Janus, branch: Branch, batch: &[&Sample], z: &[Vec<Var>], tau: f64) -> Result<Var> {
    match model.task() {
        TaskKind::Pair => {
            let rows: Vec<Var> = z.iter().map(|zs| zs[0]).collect();
            let labels: Vec<bool> = batch
                .iter()
                .map(|s| match s.target {
                    Target::Label(y) => Ok(y),
                    _ => Err(Error::Contract(format!("{} is not a pair sample", s.id))),
                })
                .collect::<Result<_>>()?;
            let zm = tape.concat_rows(&rows)?;
            let s = model.score(tape, branch, zm)?;
            let p = tape.sigmoid(s);
            pair_loss(tape, p, &labels)
        }
        TaskKind::Qa => {
            let mut total: Option<Var> = None;
            for (s, zs) in batch.iter().zip(z) {
                let Target::Gold(g) = s.target else {
                    return Err(Error::Contract(format!("{} is not a qa sample", s.id)));
                };
                let zm = tape.concat_rows(zs)?;
                let scores = model.score(tape, branch, zm)?;
                let p = choice_probabilities(tape, scores)?;
                let l = qa_loss(tape, p, &[g])?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            total.ok_or_else(|| Error::Contract("empty batch".into()))
        }
        TaskKind::Retrieval => {
            let q: Vec<Var> = z.iter().map(|zs| zs[0]).collect();
            let p: Vec<Var> = z.iter().map(|zs| zs[1]).collect();
            let q = tape.concat_rows(&q)?;
            let p = tape.concat_rows(&p)?;
            retrieval_loss(tape, q, p, tau)
        }
    }
}

/// Rows of the original and description embeddings that are aligned, as
/// `(sample, position in train units)`.
fn align_positions(batch: &[&Sample]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let train = s.train_units();
        for u in s.align_units() {
            let pos = train.iter().position(|&t| t == u).expect("align units are train units");
            out.push((i, pos));
        }
    }
    out
}

/// Combined loss of one batch given both branches' train-unit embeddings.
fn objective(
    tape: &mut Tape,
    model: &Janus,
    batch: &[&Sample],
    z_orig: &[Vec<Var>],
    z_desc: &[Vec<Var>],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut task: Option<Var> = None;
    if cfg.branch.trains_original() {
        task = Some(task_loss(tape, model, Branch::Original, batch, z_orig, cfg.tau)?);
    }
    if cfg.branch.trains_description() {
        let l = task_loss(tape, model, Branch::Description, batch, z_desc, cfg.tau)?;
        task = Some(match task {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let task = task.expect("at least one branch trains");
    let align = if cfg.branch == BranchMode::Dual {
        let pos = align_positions(batch);
        let o: Vec<Var> = pos.iter().map(|&(i, p)| z_orig[i][p]).collect();
        let n: Vec<Var> = pos.iter().map(|&(i, p)| z_desc[i][p]).collect();
        let o = tape.concat_rows(&o)?;
        let n = tape.concat_rows(&n)?;
        let o = tape.l2_normalize(o)?;
        let n = tape.l2_normalize(n)?;
        Some(info_nce(tape, o, n, cfg.nce_temperature)?)
    } else {
        None
    };
    combined_loss(tape, task, align, cfg.lambda)
}

/// The training objective of `batch` on a single tape with dropout off.
pub fn batch_loss(tape: &mut Tape, model: &Janus, batch: &[&Sample], cfg: &TrainConfig) -> Result<(Var, LossBreakdown)> {
    let z_orig: Vec<Vec<Var>> = if cfg.branch.trains_original() {
        batch
            .iter()
            .map(|s| {
                s.train_units()
                    .into_iter()
                    .map(|u| model.joint_embed(tape, &s.units[u], None))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let z_desc: Vec<Vec<Var>> = if cfg.branch.trains_description() {
        batch
            .iter()
            .map(|s| {
                s.train_units()
                    .into_iter()
                    .map(|u| Ok(tape.constant(Tensor::row(z_new(s, u)?.to_vec()))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    objective(tape, model, batch, &z_orig, &z_desc, cfg)
}

/// Finite-difference check of every trainable parameter against the gradient of [`batch_loss`].
pub fn check_gradients(model: &Janus, batch: &[Sample], cfg: &TrainConfig, opts: GradCheckOptions) -> Result<GradReport> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut store = model.store().clone();
    let ids = store.trainable_ids();
    grad_check(|t: &mut Tape| Ok(batch_loss(t, model, &refs, cfg)?.0), &mut store, &ids, opts)
}

struct StepResult {
    grads: Grads,
    loss: LossBreakdown,
}

fn batch_step(model: &Janus, batch: &[&Sample], batch_seeds: &[u64], cfg: &TrainConfig) -> Result<StepResult> {
    let store = model.store();
    let prec = cfg.precision;
    let dropout = model.config().encoder.dropout_rate > 0.0;

    // Per-sample tapes for the original branch.
    let per_sample: Vec<(Tape, Vec<Var>)> = if cfg.branch.trains_original() {
        batch
            .par_iter()
            .zip(batch_seeds.par_iter())
            .map(|(s, &seed)| {
                let mut tape = Tape::new(store, prec);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let zs = s
                    .train_units()
                    .into_iter()
                    .map(|u| {
                        let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut rng) } else { None };
                        model.joint_embed(&mut tape, &s.units[u], rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((tape, zs))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut tape = Tape::new(store, prec);
    let z_orig: Vec<Vec<Var>> = per_sample
        .iter()
        .map(|(t, zs)| zs.iter().map(|z| tape.input(t.value(*z).clone())).collect())
        .collect();
    let z_desc: Vec<Vec<Var>> = if cfg.branch.trains_description() {
        batch
            .iter()
            .map(|s| {
                s.train_units()
                    .into_iter()
                    .map(|u| Ok(tape.constant(Tensor::row(z_new(s, u)?.to_vec()))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let (loss, breakdown) = objective(&mut tape, model, batch, &z_orig, &z_desc, cfg)?;
    if !breakdown.combined.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {}", breakdown.combined)));
    }
    let back = tape.backward(loss)?;
    let mut grads = back.param_grads().clone();
    let sample_grads: Vec<Grads> = per_sample
        .par_iter()
        .zip(z_orig.par_iter())
        .map(|((t, zs), inputs)| {
            let seeds: Vec<(Var, Tensor)> = zs
                .iter()
                .zip(inputs)
                .filter_map(|(z, i)| back.grad(*i).map(|g| (*z, g.clone())))
                .collect();
            if seeds.is_empty() {
                return Ok(Grads::new());
            }
            Ok(t.backward_seeded(&seeds)?.into_param_grads())
        })
        .collect::<Result<_>>()?;
    for g in &sample_grads {
        grads.merge(g)?;
    }
    grads.retain(|id| store.get(id).trainable);
    Ok(StepResult { grads, loss: breakdown })
}

/// Original- or description-branch embeddings for every unit of `sample`.
fn branch_embeddings(model: &Janus, sample: &Sample, branch: Branch) -> Result<Vec<Vec<f64>>> {
    (0..sample.units.len())
        .map(|u| match branch {
            Branch::Original => model.embed(&sample.units[u]),
            Branch::Description => z_new(sample, u).map(<[f64]>::to_vec),
        })
        .collect()
}

struct SampleEval {
    hit: f64,
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

fn evaluate_sample(model: &Janus, sample: &Sample, branch: Branch) -> Result<SampleEval> {
    let z = branch_embeddings(model, sample, branch)?;
    let hit = match &sample.target {
        Target::Label(y) => {
            let s = model.score_rows(branch, &z[..1])?;
            // sigmoid(s) > 0.5 exactly when s > 0.
            f64::from((s[0] > 0.0) == *y)
        }
        Target::Gold(g) => {
            let s = model.score_rows(branch, &z)?;
            accuracy(&[argmax(&s)], &[Some(*g)])?
        }
        Target::Ranking { ids, gains, .. } => {
            let candidates: Vec<(String, Vec<f64>)> = ids.iter().cloned().zip(z[1..].iter().cloned()).collect();
            let ranked = retrieval_rank(&z[0], &candidates);
            let gains: HashMap<String, f64> = ids.iter().cloned().zip(gains.iter().copied()).collect();
            ndcg_at_k(&ranked, &gains, 10)?
        }
    };
    let mut pairs = Vec::new();
    if sample.units.iter().all(|u| u.z_new.is_some()) {
        for u in sample.align_units() {
            let orig = match branch {
                Branch::Original => z[u].clone(),
                Branch::Description => model.embed(&sample.units[u])?,
            };
            pairs.push((orig, z_new(sample, u)?.to_vec()));
        }
    }
    Ok(SampleEval { hit, pairs })
}

/// Task metric (accuracy or NDCG@10) with dropout off, reduced in sample order.
pub fn evaluate(model: &Janus, samples: &[Sample], branch: Branch) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::domain("evaluate", "empty evaluation set"));
    }
    let per: Vec<SampleEval> = samples
        .par_iter()
        .map(|s| evaluate_sample(model, s, branch))
        .collect::<Result<_>>()?;
    let metric = per.iter().map(|e| e.hit).sum::<f64>() / per.len() as f64;
    let distance = if per.iter().all(|e| !e.pairs.is_empty()) {
        let pairs: Vec<_> = per.into_iter().flat_map(|e| e.pairs).collect();
        Some(alignment_distance(&pairs)?)
    } else {
        None
    };
    Ok(Evaluation { metric, distance })
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    LossBreakdown {
        task: parts.iter().map(|b| b.task).sum::<f64>() / n,
        info_nce: parts.iter().map(|b| b.info_nce).sum::<f64>() / n,
        lambda: parts.first().map_or(0.0, |b| b.lambda),
        combined: parts.iter().map(|b| b.combined).sum::<f64>() / n,
    }
}

fn log_epoch(sinks: &mut RunSinks, record: &EpochRecord, metric: &str) -> Result<()> {
    let Some(log) = sinks.metrics.as_mut() else {
        return Ok(());
    };
    if let Some(t) = &record.train {
        log.write(record.epoch, "train", "loss_task", t.task)?;
        log.write(record.epoch, "train", "loss_infonce", t.info_nce)?;
        log.write(record.epoch, "train", "loss", t.combined)?;
    }
    log.write(record.epoch, "dev", metric, record.dev_metric)?;
    if let Some(d) = record.dev_distance {
        log.write(record.epoch, "dev", "distance", d)?;
    }
    Ok(())
}

/// Trains `model` in place and leaves it holding the best-dev weights.
///
/// Descriptions must already be filled on every sample when the branch mode
/// uses them. The best checkpoint is rewritten whenever the dev metric
/// improves, so a non-finite loss leaves the last good one on disk.
pub fn train(
    model: &mut Janus,
    train_set: &[Sample],
    dev_set: &[Sample],
    cfg: &TrainConfig,
    sinks: &mut RunSinks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.precision != model.precision() {
        return Err(Error::Config(format!(
            "train precision {} differs from the model's {}",
            cfg.precision.as_str(),
            model.precision().as_str()
        )));
    }
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("train and dev splits must be non-empty".into()));
    }
    let threads = pool(cfg.threads)?;
    threads.install(|| train_inner(model, train_set, dev_set, cfg, sinks))
}

fn train_inner(
    model: &mut Janus,
    train_set: &[Sample],
    dev_set: &[Sample],
    cfg: &TrainConfig,
    sinks: &mut RunSinks,
) -> Result<TrainOutcome> {
    let branch = cfg.branch.eval_branch();
    let metric = model.task().metric();
    let mut optimizer = Optimizer::new(cfg.optimizer_config());
    let run_id = sinks.metrics.as_ref().map(|m| m.run_id().to_string());
    let mut records = Vec::with_capacity(cfg.epochs + 1);

    let first = evaluate(model, dev_set, branch)?;
    let mut best = (0usize, first.metric, model.store().clone());
    let start = EpochRecord {
        epoch: 0,
        train: None,
        dev_metric: first.metric,
        dev_distance: first.distance,
    };
    log_epoch(sinks, &start, metric)?;
    log::info!("epoch 0: dev {metric} {}", first.metric);
    records.push(start);
    if let Some(path) = &sinks.checkpoint {
        save_checkpoint(path, model, cfg, run_id.as_deref(), 0, first.metric)?;
    }

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, &[epoch as u64])));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| seed_for(cfg.seed, &[epoch as u64, i as u64, 1])).collect();
            let step = batch_step(model, &batch, &seeds, cfg);
            let mut step = match step {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    restore(model, &best.2);
                    log::error!("aborting at epoch {epoch}: {e}; best checkpoint is epoch {}", best.0);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            clip_global_norm(&mut step.grads, cfg.max_grad_norm)?;
            if let Err(e) = optimizer.step(model.store_mut(), &step.grads, cfg.precision) {
                restore(model, &best.2);
                return Err(e);
            }
            losses.push(step.loss);
        }
        let dev = evaluate(model, dev_set, branch)?;
        let record = EpochRecord {
            epoch,
            train: Some(mean_breakdown(&losses)),
            dev_metric: dev.metric,
            dev_distance: dev.distance,
        };
        log_epoch(sinks, &record, metric)?;
        log::info!(
            "epoch {epoch}: loss {:.6} dev {metric} {} distance {:?}",
            record.train.map_or(0.0, |t| t.combined),
            dev.metric,
            dev.distance
        );
        records.push(record);
        if dev.metric > best.1 {
            best = (epoch, dev.metric, model.store().clone());
            if let Some(path) = &sinks.checkpoint {
                save_checkpoint(path, model, cfg, run_id.as_deref(), epoch, dev.metric)?;
            }
        }
    }
    restore(model, &best.2);
    Ok(TrainOutcome {
        records,
        best_epoch: best.0,
        best_metric: best.1,
    })
}

fn restore(model: &mut Janus, snapshot: &crate::numerics::ParamStore) {
    *model.store_mut() = snapshot.clone();
}

#[cfg(test)]
mod tests;
