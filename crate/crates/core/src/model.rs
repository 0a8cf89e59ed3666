//! The assembled model: frozen backbone, graph encoder, adapter and task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{description_branch_embed, serialize_graph, DescriptionCache};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Record;
use crate::error::{Error, Result};
use crate::fusion::{build_fused_sequence, Adapter};
use crate::gnn::{EncoderConfig, GraphEncoder};
use crate::graph::{
    init_node_embeddings, integrate_query_node, NodeInitMode, QueryContext, TypedGraph, DEFAULT_MAX_NODES,
    NODE_TYPE_LINKED, NODE_TYPE_REGULAR,
};
use crate::numerics::{ParamId, ParamStore, Precision, Tape, Tensor, Var};
use crate::tasks::{ScoringHead, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Seeds every trainable initialisation.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Adapter hidden width; 0 means `max(graph_dim, backbone dim)`.
    pub adapter_hidden: usize,
    pub head_hidden: usize,
    pub node_init: NodeInitMode,
    pub node_init_seed: u64,
    /// `false` drops the graph token and encodes text alone.
    pub use_graph: bool,
    pub max_nodes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 7,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            adapter_hidden: 0,
            head_hidden: 32,
            node_init: NodeInitMode::BackboneName,
            node_init_seed: 0,
            use_graph: true,
            max_nodes: DEFAULT_MAX_NODES,
        }
    }
}

impl ModelConfig {
    /// The smallest useful network: vocabulary 64, backbone width 16, two graph layers of width 8.
    pub fn micro() -> Self {
        let mut c = ModelConfig::default();
        c.backbone.vocab_size = 64;
        c.backbone.dim = 16;
        c.backbone.ff_dim = 32;
        c.backbone.layers = 1;
        c.backbone.context_length = 64;
        c.encoder.hidden_dim = 8;
        c.encoder.num_layers = 2;
        c.encoder.type_dim = 4;
        c.encoder.relation_dim = 4;
        c.encoder.relation_feature_dim = 4;
        c.head_hidden = 8;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        if self.max_nodes == 0 || self.max_nodes > DEFAULT_MAX_NODES {
            return Err(Error::Config(format!("max_nodes must be in 1..={DEFAULT_MAX_NODES}")));
        }
        Ok(())
    }
}

/// Which embedding a head reads: the fused graph+text one, or the description branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Original,
    Description,
}

/// One text with its graph context, prepared for repeated encoding.
#[derive(Clone, Debug)]
pub struct Unit {
    pub text: String,
    pub tokens: Vec<u32>,
    /// The graph with the query node appended.
    pub graph: TypedGraph,
    pub init: Tensor,
    pub context: QueryContext,
    pub description: String,
    pub cache_key: String,
    /// Description-branch embedding, filled from the cache.
    pub z_new: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(bool),
    Gold(usize),
    /// Unit 0 is the query; unit `i + 1` is candidate `ids[i]`.
    Ranking {
        ids: Vec<String>,
        gains: Vec<f64>,
        positive: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub units: Vec<Unit>,
    pub target: Target,
}

impl Sample {
    /// Units encoded for a training step.
    pub fn train_units(&self) -> Vec<usize> {
        match &self.target {
            Target::Label(_) => vec![0],
            Target::Gold(_) => (0..self.units.len()).collect(),
            Target::Ranking { positive, .. } => vec![0, positive + 1],
        }
    }

    /// Units whose two branches are aligned and whose distance is tracked.
    pub fn align_units(&self) -> Vec<usize> {
        match &self.target {
            Target::Label(_) => vec![0],
            Target::Gold(g) => vec![*g],
            Target::Ranking { positive, .. } => vec![0, positive + 1],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Janus {
    config: ModelConfig,
    task: TaskKind,
    relations: Vec<String>,
    precision: Precision,
    store: ParamStore,
    backbone: Backbone,
    encoder: GraphEncoder,
    adapter: Adapter,
    head_orig: ScoringHead,
    head_new: ScoringHead,
}

impl Janus {
    /// Builds every block. `relations` is the knowledge-relation vocabulary.
    pub fn new(config: ModelConfig, task: TaskKind, relations: Vec<String>, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = backbone.dim();
        let encoder = GraphEncoder::new(config.encoder.clone(), &relations, d, &mut store, &mut rng)?;
        let adapter = Adapter::new(
            &mut store,
            encoder.config().graph_dim(),
            config.adapter_hidden,
            d,
            &mut rng,
        );
        let head_orig = ScoringHead::new(&mut store, "head.orig", d, config.head_hidden, &mut rng);
        let head_new = ScoringHead::new(&mut store, "head.new", d, config.head_hidden, &mut rng);
        store.round_values(precision);
        Ok(Janus {
            config,
            task,
            relations,
            precision,
            store,
            backbone,
            encoder,
            adapter,
            head_orig,
            head_new,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn encoder(&self) -> &GraphEncoder {
        &self.encoder
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn head(&self, branch: Branch) -> &ScoringHead {
        match branch {
            Branch::Original => &self.head_orig,
            Branch::Description => &self.head_new,
        }
    }

    /// Parameters of one named block, for reporting.
    pub fn blocks(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        vec![
            ("gnn", self.encoder.param_ids()),
            ("adapter", self.adapter.params().to_vec()),
            ("head.orig", self.head_orig.params().to_vec()),
            ("head.new", self.head_new.params().to_vec()),
        ]
    }

    /// Hash of the frozen weights (the backbone).
    pub fn frozen_hash(&self) -> String {
        self.store.hash_where(|p| !p.trainable)
    }

    /// Hash of the frozen node-initialisation features of every unit.
    pub fn node_init_hash(&self, samples: &[Sample]) -> Result<String> {
        let mut h = Sha256::new();
        for s in samples {
            for u in &s.units {
                let g = u.graph.without_query_node();
                let init = init_node_embeddings(
                    &g,
                    self.config.node_init,
                    self.config.node_init_seed,
                    &self.backbone,
                    &self.store,
                )?;
                for x in init.data() {
                    h.update(self.precision.round(*x).to_bits().to_le_bytes());
                }
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Graph, node features and query context for one text.
    pub fn prepare_unit(&self, text: &str, graph: &TypedGraph, linked: &[usize], cache_key: String) -> Result<Unit> {
        if graph.node_count() > self.config.max_nodes {
            return Err(Error::Graph(format!(
                "{cache_key}: {} nodes exceeds the cap of {}",
                graph.node_count(),
                self.config.max_nodes
            )));
        }
        let mut g = graph.clone();
        for node in &mut g.nodes {
            node.node_type = if linked.contains(&node.id) {
                NODE_TYPE_LINKED
            } else {
                NODE_TYPE_REGULAR
            };
        }
        let mut init = init_node_embeddings(
            &g,
            self.config.node_init,
            self.config.node_init_seed,
            &self.backbone,
            &self.store,
        )?;
        self.precision.round_slice(init.data_mut());
        let query_embedding = self.backbone.sentence_embedding(&self.store, self.precision, text)?;
        let context = QueryContext::new(text, linked.iter().copied(), query_embedding);
        let integrated = integrate_query_node(&g, &init, &context)?;
        Ok(Unit {
            text: text.to_string(),
            tokens: self.backbone.tokenize(text),
            graph: integrated.graph,
            init: integrated.init,
            context,
            description: serialize_graph(graph)?,
            cache_key,
            z_new: None,
        })
    }

    pub fn prepare(&self, record: &Record) -> Result<Sample> {
        if record.task() != self.task {
            return Err(Error::Config(format!(
                "record {} is a {} record but the model is configured for {}",
                record.id(),
                record.task(),
                self.task
            )));
        }
        match record {
            Record::Pair(p) => Ok(Sample {
                id: p.id.clone(),
                units: vec![self.prepare_unit(&p.text, &p.graph, &p.linked, p.id.clone())?],
                target: Target::Label(p.label),
            }),
            Record::Qa(q) => {
                let units = (0..q.choices.len())
                    .map(|i| self.prepare_unit(&q.choice_text(i), &q.graph, &q.choice_linked(i), format!("{}/{i}", q.id)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sample {
                    id: q.id.clone(),
                    units,
                    target: Target::Gold(q.gold),
                })
            }
            Record::Retrieval(r) => {
                let positive_id = &r.positive().expect("validated records have a positive").id;
                let mut units = vec![self.prepare_unit(&r.query.text, &r.query.graph, &r.query.linked, format!("{}/q", r.id))?];
                for c in &r.candidates {
                    units.push(self.prepare_unit(&c.text, &c.graph, &c.linked, format!("{}/{}", r.id, c.id))?);
                }
                Ok(Sample {
                    id: r.id.clone(),
                    units,
                    target: Target::Ranking {
                        ids: r.candidates.iter().map(|c| c.id.clone()).collect(),
                        gains: r.candidates.iter().map(|c| c.gain).collect(),
                        positive: r.candidates.iter().position(|c| &c.id == positive_id).expect("present"),
                    },
                })
            }
        }
    }

    /// Prepares records in parallel; output order follows input order.
    pub fn prepare_all(&self, records: &[Record]) -> Result<Vec<Sample>> {
        records.par_iter().map(|r| self.prepare(r)).collect()
    }

    pub fn new_cache(&self) -> DescriptionCache {
        DescriptionCache::new(self.backbone.dim(), self.config.backbone.seed, self.frozen_hash())
    }

    /// Fills `z_new` on every unit, computing cache misses in parallel.
    pub fn fill_descriptions(&self, samples: &mut [Sample], cache: &mut DescriptionCache) -> Result<()> {
        if cache.backbone_hash != self.frozen_hash() || cache.dim != self.backbone.dim() {
            return Err(Error::Contract("description cache was built with a different backbone".into()));
        }
        let missing: Vec<(&str, &str, &str)> = samples
            .iter()
            .flat_map(|s| s.units.iter())
            .filter(|u| !cache.contains(&u.cache_key))
            .map(|u| (u.cache_key.as_str(), u.description.as_str(), u.text.as_str()))
            .collect();
        let computed: Vec<(String, Vec<f64>)> = missing
            .par_iter()
            .map(|(k, d, t)| {
                let z = description_branch_embed(&self.backbone, &self.store, self.precision, d, t)?;
                Ok((k.to_string(), z))
            })
            .collect::<Result<_>>()?;
        for (k, z) in computed {
            cache.insert(k, &z)?;
        }
        for s in samples.iter_mut() {
            for u in &mut s.units {
                u.z_new = cache.get(&u.cache_key);
            }
        }
        Ok(())
    }

    /// Joint embedding `z` of one unit as a `[1, D_t]` tape value.
    pub fn joint_embed(&self, tape: &mut Tape, unit: &Unit, dropout: Option<&mut dyn rand::RngCore>) -> Result<Var> {
        if !self.config.use_graph {
            return self.backbone.sentence_embedding_on(tape, &unit.text);
        }
        let init = tape.constant(unit.init.clone());
        let states = self.encoder.encode_graph(tape, &unit.graph, init, dropout)?;
        let g = self.encoder.pool_graph(tape, &unit.graph, &states, &unit.context)?;
        let token = self.adapter.adapt(tape, g)?;
        let seq = build_fused_sequence(token, &unit.tokens, self.backbone.context_length());
        let h = self.backbone.encode_sequence(tape, &seq)?;
        self.backbone.extract_joint(tape, h, &seq)
    }

    /// Joint embedding without dropout.
    pub fn embed(&self, unit: &Unit) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store, self.precision);
        let z = self.joint_embed(&mut tape, unit, None)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Head scores `[rows, 1]` for embeddings `z`.
    pub fn score(&self, tape: &mut Tape, branch: Branch, z: Var) -> Result<Var> {
        self.head(branch).score(tape, z)
    }

    /// Head scores for plain embedding rows.
    pub fn score_rows(&self, branch: Branch, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store, self.precision);
        let z = tape.constant(Tensor::from_rows(rows)?);
        let s = self.score(&mut tape, branch, z)?;
        Ok(tape.value(s).data().to_vec())
    }
}

#[cfg(test)]
mod tests;
