use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use janus_core::config::RunConfig;
use janus_core::data::{self, generate, generate_split, relation_vocabulary, GeneratorSpec, PairVariant, Record, Split};
use janus_core::model::{Janus, ModelConfig, Sample};
use janus_core::numerics::{Fault, GradCheckOptions, Precision};
use janus_core::tasks::TaskKind;
use janus_core::training::{
    check_gradients, evaluate, load_checkpoint, metric_line, train as run_training, BranchMode, MetricsLog, RunSinks,
    TrainConfig,
};
use janus_core::alignment::DescriptionCache;
use janus_core::Error;

use crate::Overrides;

/// A failed command: usage and config problems exit 1, everything else 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("config error: {m}")),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Errors while reading a file named on the command line are usage errors.
fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn echo(title: &str, body: &str) {
    eprintln!("# {title}");
    for line in body.lines() {
        eprintln!("#   {line}");
    }
}

fn toml_text<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    toml::to_string(value).map_err(|e| Failure::Runtime(Error::Contract(format!("serialising config: {e}"))))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn load_records(path: &Path, task: TaskKind) -> Result<Vec<Record>, Failure> {
    let records = data::load(path)?;
    if let Some(r) = records.iter().find(|r| r.task() != task) {
        return Err(Failure::Usage(format!(
            "{}: record `{}` is a {} record but the model is for {task}",
            path.display(),
            r.id(),
            r.task()
        )));
    }
    Ok(records)
}

pub fn gen(spec_path: &Path, out: &Path) -> CmdResult {
    let spec = GeneratorSpec::load(spec_path).map_err(|e| match e {
        Error::Config(m) => Failure::Usage(format!("{}: {m}", spec_path.display())),
        other => usage(other),
    })?;
    echo("generator spec", &toml_text(&spec)?);
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(Error::Io { path: out.into(), source: e }))?;
    for (split, records) in generate(&spec)? {
        let path = out.join(format!("{}.jsonl", split.as_str()));
        data::save(&path, &records)?;
        println!("{}\t{}", path.display(), records.len());
    }
    Ok(())
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if o.no_graph {
        cfg.model.use_graph = false;
    }
    if let Some(b) = o.branch {
        cfg.train.branch = b;
    }
    if let Some(l) = o.gnn_layers {
        cfg.model.encoder.num_layers = l;
    }
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    if o.no_align {
        cfg.train.lambda = 0.0;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = o.threads {
        cfg.train.threads = t;
    }
    if let Some(p) = o.precision {
        cfg.train.precision = p;
    }
    if let Some(r) = &o.run_id {
        cfg.run_id = r.clone();
    }
    if let Some(d) = &o.out_dir {
        cfg.out_dir = d.clone();
    }
}

/// Loads the cache at `stem` when it matches `model`, otherwise starts empty.
fn open_cache(model: &Janus, stem: Option<&Path>) -> DescriptionCache {
    let fresh = model.new_cache();
    let Some(stem) = stem else {
        return fresh;
    };
    if !DescriptionCache::paths(stem).0.exists() {
        return fresh;
    }
    match DescriptionCache::load(stem) {
        Ok(c) if c.backbone_hash == fresh.backbone_hash && c.dim == fresh.dim => {
            log::info!("reusing {} cached descriptions from {}", c.len(), stem.display());
            c
        }
        Ok(_) => {
            log::warn!("{} was built with another backbone; recomputing", stem.display());
            fresh
        }
        Err(e) => {
            log::warn!("ignoring unreadable description cache: {e}");
            fresh
        }
    }
}

pub fn train(config: &Path, overrides: &Overrides) -> CmdResult {
    let mut cfg = RunConfig::load(config).map_err(usage)?;
    apply_overrides(&mut cfg, overrides);
    cfg.validate()?;
    echo("effective config", &cfg.to_toml()?);

    let pool = thread_pool(cfg.train.threads)?;
    pool.install(|| train_run(&cfg))
}

fn train_run(cfg: &RunConfig) -> CmdResult {
    let train_records = load_records(&cfg.data.train, cfg.task)?;
    let dev_records = load_records(&cfg.data.dev, cfg.task)?;
    let test_records = cfg.data.test.as_deref().map(|p| load_records(p, cfg.task)).transpose()?;
    let relations = relation_vocabulary(
        train_records
            .iter()
            .chain(&dev_records)
            .chain(test_records.iter().flatten()),
    );
    let mut model = Janus::new(cfg.model.clone(), cfg.task, relations, cfg.train.precision)?;

    let mut train_set = model.prepare_all(&train_records)?;
    let mut dev_set = model.prepare_all(&dev_records)?;
    let mut test_set = test_records.map(|r| model.prepare_all(&r)).transpose()?;
    let mut cache = open_cache(&model, cfg.data.cache.as_deref());
    model.fill_descriptions(&mut train_set, &mut cache)?;
    model.fill_descriptions(&mut dev_set, &mut cache)?;
    if let Some(t) = test_set.as_mut() {
        model.fill_descriptions(t, &mut cache)?;
    }
    if let Some(stem) = &cfg.data.cache {
        cache.save(stem)?;
    }

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::Runtime(Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    }))?;
    let mut sinks = RunSinks {
        checkpoint: Some(cfg.checkpoint_stem()),
        metrics: Some(MetricsLog::open(&cfg.metrics_path(), cfg.run_id.clone())?),
    };
    let outcome = run_training(&mut model, &train_set, &dev_set, &cfg.train, &mut sinks)?;
    let metric = cfg.task.metric();
    println!(
        "{}\tbest_epoch={}\tdev_{metric}={}",
        cfg.run_id, outcome.best_epoch, outcome.best_metric
    );
    if let Some(test) = &test_set {
        let ev = evaluate(&model, test, cfg.train.branch.eval_branch())?;
        let log = sinks.metrics.as_mut().expect("opened above");
        log.write(outcome.best_epoch, "test", metric, ev.metric)?;
        if let Some(d) = ev.distance {
            log.write(outcome.best_epoch, "test", "distance", d)?;
        }
        println!("{}\ttest_{metric}={}", cfg.run_id, ev.metric);
    }
    Ok(())
}

fn load_for_inference(checkpoint: &Path) -> Result<(Janus, janus_core::training::CheckpointManifest), Failure> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let header = format!(
        "checkpoint = {:?}\ntask = {:?}\nepoch = {}\ndtype = {:?}\n{}",
        checkpoint.display().to_string(),
        manifest.task.as_str(),
        manifest.epoch,
        manifest.dtype.as_str(),
        toml_text(&manifest.model)?
    );
    echo("effective config", &header);
    Ok((model, manifest))
}

pub fn eval(
    checkpoint: &Path,
    data_path: &Path,
    split: &str,
    config: Option<&Path>,
    metrics: Option<&Path>,
    threads: Option<usize>,
) -> CmdResult {
    let (model, manifest) = load_for_inference(checkpoint)?;
    if let Some(path) = config {
        let cfg = RunConfig::load(path).map_err(usage)?;
        manifest.check_compatible(&cfg.model, cfg.task)?;
    }
    if split.is_empty() || split.contains(['\t', '\n']) {
        return Err(Failure::Usage(format!("bad split label {split:?}")));
    }
    let records = load_records(data_path, manifest.task)?;
    if records.is_empty() {
        return Err(Failure::Usage(format!("{} has no records", data_path.display())));
    }
    let pool = thread_pool(threads.unwrap_or(manifest.train.threads))?;
    let ev = pool.install(|| -> Result<_, Failure> {
        let mut samples = model.prepare_all(&records)?;
        let mut cache = model.new_cache();
        model.fill_descriptions(&mut samples, &mut cache)?;
        Ok(evaluate(&model, &samples, manifest.train.branch.eval_branch())?)
    })?;
    let run_id = manifest.run_id.clone().unwrap_or_else(|| "eval".into());
    let mut rows = vec![metric_line(&run_id, manifest.epoch, split, manifest.task.metric(), ev.metric)];
    if let Some(d) = ev.distance {
        rows.push(metric_line(&run_id, manifest.epoch, split, "distance", d));
    }
    let text = rows.concat();
    print!("{text}");
    if let Some(path) = metrics {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Failure::Runtime(Error::Io { path: path.into(), source: e }))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(Error::Io { path: path.into(), source: e }))?;
    }
    Ok(())
}

/// `<stem>.vectors` and `<stem>.ids`.
pub fn embedding_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.vectors")), PathBuf::from(format!("{s}.ids")))
}

pub fn embed(checkpoint: &Path, data_path: &Path, out: &Path, threads: Option<usize>) -> CmdResult {
    let (model, manifest) = load_for_inference(checkpoint)?;
    let records = load_records(data_path, manifest.task)?;
    if records.is_empty() {
        log::warn!("{} has no records; writing empty outputs", data_path.display());
    }
    let pool = thread_pool(threads.unwrap_or(manifest.train.threads))?;
    let rows = pool.install(|| -> Result<Vec<(String, Vec<f64>)>, Failure> {
        use rayon::prelude::*;
        let samples: Vec<Sample> = model.prepare_all(&records)?;
        Ok(samples
            .par_iter()
            .map(|s| Ok((s.id.clone(), model.embed(&s.units[0])?)))
            .collect::<Result<_, Error>>()?)
    })?;
    let dim = model.backbone().dim();
    let mut bytes = Vec::with_capacity(rows.len() * dim * 4);
    let mut ids = format!("dim {dim}\ncount {}\n", rows.len());
    for (id, z) in &rows {
        for &x in z {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        ids.push_str(id);
        ids.push('\n');
    }
    let (vpath, ipath) = embedding_paths(out);
    if let Some(dir) = vpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::Io { path: dir.into(), source: e }))?;
    }
    fs::write(&vpath, &bytes).map_err(|e| Failure::Runtime(Error::Io { path: vpath.clone(), source: e }))?;
    fs::write(&ipath, ids).map_err(|e| Failure::Runtime(Error::Io { path: ipath.clone(), source: e }))?;
    println!("{}\t{}", vpath.display(), rows.len());
    Ok(())
}

/// Two small records whose graphs have six nodes.
fn gradcheck_records(task: TaskKind, seed: u64) -> Result<Vec<Record>, Failure> {
    let mut spec = GeneratorSpec::new(task, seed, [2, 2, 2]);
    spec.min_nodes = 6;
    spec.max_nodes = 6;
    spec.variant = PairVariant::GraphSensitive;
    spec.choices = 3;
    spec.pool = 4;
    Ok(generate_split(&spec, Split::Train)?)
}

pub fn gradcheck(config: Option<&Path>, task: TaskKind, seed: u64, inject_fault: bool) -> CmdResult {
    let (model_cfg, task) = match config {
        Some(p) => {
            let cfg = RunConfig::load(p).map_err(usage)?;
            cfg.model.validate()?;
            (cfg.model, cfg.task)
        }
        None => (ModelConfig::micro(), task),
    };
    let train_cfg = TrainConfig {
        precision: Precision::F64,
        branch: BranchMode::Dual,
        threads: 1,
        ..TrainConfig::default()
    };
    echo(
        "effective config",
        &format!(
            "task = {:?}\nseed = {seed}\ninject_fault = {inject_fault}\n[model]\n{}[train]\n{}",
            task.as_str(),
            toml_text(&model_cfg)?,
            toml_text(&train_cfg)?
        ),
    );
    let records = gradcheck_records(task, seed)?;
    let model = Janus::new(model_cfg, task, relation_vocabulary(&records), Precision::F64)?;
    let mut samples = model.prepare_all(&records)?;
    let mut cache = model.new_cache();
    model.fill_descriptions(&mut samples, &mut cache)?;
    let mut opts = GradCheckOptions::ridders();
    if inject_fault {
        opts.fault = Some(Fault::MatmulBackward);
    }
    let report = check_gradients(&model, &samples, &train_cfg, opts)?;
    println!("{report}");
    let store = model.store();
    for (block, ids) in model.blocks() {
        let names: Vec<&str> = ids.iter().map(|&id| store.get(id).name.as_str()).collect();
        let entries: Vec<_> = report.blocks.iter().filter(|b| names.contains(&b.name.as_str())).collect();
        let ok = entries.iter().all(|b| b.passed);
        let worst = entries.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
        println!(
            "block\t{block}\t{}\tparams={}\tmax_rel_err={worst:.3e}",
            if ok { "PASS" } else { "FAIL" },
            entries.len()
        );
    }
    println!(
        "end-to-end loss\t{}\tmax_rel_err={:.3e}",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_rel_err()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Contract(format!(
            "gradient check failed for {} of {} parameters",
            report.failures().count(),
            report.blocks.len()
        ))))
    }
}
