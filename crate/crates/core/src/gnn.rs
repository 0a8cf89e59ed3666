//! Typed graph attention encoder and query-aware pooling.
//!
//! Message passing runs over an augmented edge set: every knowledge edge
//! `s -r-> v` also appears as `v -inv(r)-> s`, query links get their own
//! relation (and inverse), and every node has a self edge. Attention is
//! normalised over each sender's outgoing edges by default.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{QueryContext, TypedGraph};
use crate::numerics::{Axis, Linear, Mlp2, ParamId, Projection, ParamStore, Tape, Tensor, Var};

/// Which endpoint's state feeds the message on an edge `s -> v`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageSource {
    /// `m_sv` built from the sender `s`.
    #[default]
    #[serde(rename = "sender")]
    Sender,
    /// `m_sv` built from the receiver `v`, as the message equation is written.
    #[serde(rename = "receiver")]
    Receiver,
}

impl std::str::FromStr for MessageSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sender" => Ok(MessageSource::Sender),
            "receiver" => Ok(MessageSource::Receiver),
            other => Err(Error::Config(format!("unknown message mode `{other}`"))),
        }
    }
}

/// Which endpoint groups the attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    #[default]
    Sender,
    Receiver,
}

impl std::str::FromStr for AttentionNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sender" => Ok(AttentionNorm::Sender),
            "receiver" => Ok(AttentionNorm::Receiver),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub node_type_count: usize,
    /// Knowledge relations only; the table also holds inverses, query link and self.
    pub relation_count: usize,
    pub type_dim: usize,
    pub relation_dim: usize,
    pub relation_feature_dim: usize,
    /// Output width of the pooling MLP; 0 means `hidden_dim`.
    pub pool_dim: usize,
    pub message_source: MessageSource,
    pub attention_norm: AttentionNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 32,
            num_layers: 3,
            num_heads: 2,
            dropout_rate: 0.2,
            node_type_count: crate::graph::DEFAULT_NODE_TYPES,
            relation_count: 0,
            type_dim: 8,
            relation_dim: 16,
            relation_feature_dim: 16,
            pool_dim: 0,
            message_source: MessageSource::Sender,
            attention_norm: AttentionNorm::Sender,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("gnn hidden_dim must be positive".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("gnn num_layers must be at least 1".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "gnn num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if self.node_type_count == 0 || self.type_dim == 0 || self.relation_dim == 0 || self.relation_feature_dim == 0 {
            return Err(Error::Config("gnn embedding widths must be positive".into()));
        }
        Ok(())
    }

    pub fn graph_dim(&self) -> usize {
        if self.pool_dim == 0 {
            self.hidden_dim
        } else {
            self.pool_dim
        }
    }

    /// Rows of the relation table: relations, query link, their inverses, self.
    pub fn relation_table_rows(&self) -> usize {
        2 * (self.relation_count + 1) + 1
    }

    pub fn query_link_id(&self) -> usize {
        self.relation_count
    }

    pub fn inverse_id(&self, rel: usize) -> usize {
        rel + self.relation_count + 1
    }

    pub fn self_relation_id(&self) -> usize {
        2 * (self.relation_count + 1)
    }
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub node_update: Mlp2,
    pub relation_mlp: Mlp2,
    pub message: Linear,
    /// Bias-free: a key bias shifts every logit of a sender group equally.
    pub query: Projection,
    pub key: Projection,
    pub type_table: ParamId,
    pub relation_table: ParamId,
}

impl GatLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let (du, de, dr) = (cfg.type_dim, cfg.relation_dim, cfg.relation_feature_dim);
        GatLayer {
            node_update: Mlp2::new(store, &format!("{name}.node_update"), [d, d, d], true, rng),
            relation_mlp: Mlp2::new(store, &format!("{name}.relation_mlp"), [de + 2 * du, dr, dr], true, rng),
            message: Linear::new(store, &format!("{name}.message"), d + du + dr, d, true, rng),
            query: Projection::new(store, &format!("{name}.query"), d + du, d, true, rng),
            key: Projection::new(store, &format!("{name}.key"), d + du + dr, d, true, rng),
            type_table: store.add_normal(format!("{name}.type_table"), &[cfg.node_type_count, du], 1.0, true, rng),
            relation_table: store.add_normal(
                format!("{name}.relation_table"),
                &[cfg.relation_table_rows(), de],
                1.0,
                true,
                rng,
            ),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.node_update.params());
        ids.extend(self.relation_mlp.params());
        ids.extend(self.message.params());
        ids.extend(self.query.params());
        ids.extend(self.key.params());
        ids.extend([self.type_table, self.relation_table]);
        ids
    }
}

/// Augmented edge list in encoder relation ids, self edges last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    pub node_count: usize,
    pub senders: Arc<Vec<usize>>,
    pub receivers: Arc<Vec<usize>>,
    pub relations: Arc<Vec<usize>>,
    pub node_types: Arc<Vec<usize>>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }

    fn gathered(&self, ends: &[usize]) -> Arc<Vec<usize>> {
        Arc::new(ends.iter().map(|&i| self.node_types[i]).collect())
    }
}

/// Per-edge intermediate values of one layer, in [`EdgeIndex`] order.
#[derive(Clone, Debug)]
pub struct MessagePassingTrace {
    pub relation_features: Tensor,
    pub messages: Tensor,
    pub queries: Tensor,
    pub keys: Tensor,
    /// `[edges, heads]`
    pub logits: Tensor,
    /// `[edges, heads]`
    pub attention: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct TraceVars {
    relation_features: Var,
    messages: Var,
    queries: Var,
    keys: Var,
    logits: Var,
    attention: Var,
}

impl TraceVars {
    fn materialize(&self, tape: &Tape) -> MessagePassingTrace {
        MessagePassingTrace {
            relation_features: tape.value(self.relation_features).clone(),
            messages: tape.value(self.messages).clone(),
            queries: tape.value(self.queries).clone(),
            keys: tape.value(self.keys).clone(),
            logits: tape.value(self.logits).clone(),
            attention: tape.value(self.attention).clone(),
        }
    }
}

/// Layer outputs `H^(0..=L)`, each `[nodes, hidden]`.
#[derive(Clone, Debug)]
pub struct NodeStates {
    pub layers: Vec<Var>,
    traces: Vec<TraceVars>,
}

impl NodeStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the projected input")
    }

    pub fn trace(&self, tape: &Tape, layer: usize) -> Option<MessagePassingTrace> {
        self.traces.get(layer).map(|t| t.materialize(tape))
    }
}


#[derive(Clone, Debug)]
pub struct GraphEncoder {
    config: EncoderConfig,
    relation_ids: HashMap<String, usize>,
    input_proj: Linear,
    layers: Vec<GatLayer>,
    pool: Mlp2,
}

impl GraphEncoder {
    /// `relations` is the knowledge-relation vocabulary; `input_dim` the width
    /// of initial node features and of the query embedding.
    pub fn new<R: Rng>(
        mut config: EncoderConfig,
        relations: &[String],
        input_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.relation_count = relations.len();
        config.validate()?;
        let mut relation_ids = HashMap::new();
        for (i, r) in relations.iter().enumerate() {
            if relation_ids.insert(r.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate relation `{r}`")));
            }
        }
        let d = config.hidden_dim;
        let input_proj = Linear::new(store, "gnn.input_proj", input_dim, d, true, rng);
        let layers = (0..config.num_layers)
            .map(|l| GatLayer::new(store, &format!("gnn.layer{l}"), &config, rng))
            .collect();
        let pool = Mlp2::new(store, "gnn.pool", [2 * d + input_dim, d, config.graph_dim()], true, rng);
        Ok(GraphEncoder {
            config,
            relation_ids,
            input_proj,
            layers,
            pool,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[GatLayer] {
        &self.layers
    }

    pub fn pool_mlp(&self) -> &Mlp2 {
        &self.pool
    }

    pub fn input_projection(&self) -> &Linear {
        &self.input_proj
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input_proj.params().to_vec();
        for l in &self.layers {
            ids.extend(l.params());
        }
        ids.extend(self.pool.params());
        ids
    }

    /// Maps graph-local relation ids to encoder ids and adds inverse and self edges.
    pub fn edge_index(&self, g: &TypedGraph) -> Result<EdgeIndex> {
        let cfg = &self.config;
        let mut local = Vec::with_capacity(g.relations.len() + 1);
        for name in &g.relations {
            let id = self
                .relation_ids
                .get(name)
                .copied()
                .ok_or_else(|| Error::Graph(format!("relation `{name}` not in the encoder vocabulary")))?;
            local.push(id);
        }
        local.push(cfg.query_link_id());
        let n = g.node_count();
        let mut node_types = Vec::with_capacity(n);
        for node in &g.nodes {
            if node.node_type >= cfg.node_type_count {
                return Err(Error::Graph(format!(
                    "node {} has type {} but the encoder knows {} types",
                    node.id, node.node_type, cfg.node_type_count
                )));
            }
            node_types.push(node.node_type);
        }
        let cap = 2 * g.edges.len() + n;
        let (mut s, mut v, mut r) = (Vec::with_capacity(cap), Vec::with_capacity(cap), Vec::with_capacity(cap));
        for e in &g.edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Graph(format!("edge {}->{} leaves the graph", e.src, e.dst)));
            }
            let rel = *local
                .get(e.rel)
                .ok_or_else(|| Error::Graph(format!("relation id {} out of range", e.rel)))?;
            s.push(e.src);
            v.push(e.dst);
            r.push(rel);
            s.push(e.dst);
            v.push(e.src);
            r.push(cfg.inverse_id(rel));
        }
        for i in 0..n {
            s.push(i);
            v.push(i);
            r.push(cfg.self_relation_id());
        }
        Ok(EdgeIndex {
            node_count: n,
            senders: Arc::new(s),
            receivers: Arc::new(v),
            relations: Arc::new(r),
            node_types: Arc::new(node_types),
        })
    }

    /// `r_sv = f_r([e_rel; u_type(s); u_type(v)])`, one row per edge.
    pub fn relation_features(&self, tape: &mut Tape, layer: usize, edges: &EdgeIndex) -> Result<Var> {
        let l = &self.layers[layer];
        let rel_table = tape.param(l.relation_table);
        let type_table = tape.param(l.type_table);
        let e = tape.gather_rows(rel_table, edges.relations.clone())?;
        let us = tape.gather_rows(type_table, edges.gathered(&edges.senders))?;
        let uv = tape.gather_rows(type_table, edges.gathered(&edges.receivers))?;
        let x = tape.concat_cols(&[e, us, uv])?;
        l.relation_mlp.forward(tape, x)
    }

    /// `m_sv = f_m([h; u; r_sv])` with `h, u` from the sender (or the receiver in receiver mode).
    pub fn compute_messages(&self, tape: &mut Tape, layer: usize, states: Var, edges: &EdgeIndex, rel: Var) -> Result<Var> {
        let l = &self.layers[layer];
        let ends = match self.config.message_source {
            MessageSource::Sender => &edges.senders,
            MessageSource::Receiver => &edges.receivers,
        };
        let type_table = tape.param(l.type_table);
        let h = tape.gather_rows(states, ends.clone())?;
        let u = tape.gather_rows(type_table, edges.gathered(ends))?;
        let x = tape.concat_cols(&[h, u, rel])?;
        l.message.forward(tape, x)
    }

    /// Returns `(queries, keys, logits [E, heads], attention [E, heads])`.
    pub fn attention_weights(
        &self,
        tape: &mut Tape,
        layer: usize,
        states: Var,
        edges: &EdgeIndex,
        rel: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let cfg = &self.config;
        let l = &self.layers[layer];
        let type_table = tape.param(l.type_table);
        let hs = tape.gather_rows(states, edges.senders.clone())?;
        let us = tape.gather_rows(type_table, edges.gathered(&edges.senders))?;
        let hv = tape.gather_rows(states, edges.receivers.clone())?;
        let uv = tape.gather_rows(type_table, edges.gathered(&edges.receivers))?;
        let qx = tape.concat_cols(&[hs, us])?;
        let q = l.query.forward(tape, qx)?;
        let kx = tape.concat_cols(&[hv, uv, rel])?;
        let k = l.key.forward(tape, kx)?;
        let heads = cfg.num_heads;
        let dh = cfg.hidden_dim / heads;
        let scale = dh as f64 / (cfg.hidden_dim as f64).sqrt();
        let mut logits = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let prod = tape.mul(qh, kh)?;
            // mean over dh columns times dh/sqrt(D) gives q.k/sqrt(D)
            let m = tape.mean(prod, Axis::Cols)?;
            logits.push(tape.scale(m, scale));
        }
        let gamma = if heads == 1 { logits[0] } else { tape.concat_cols(&logits)? };
        let groups = match cfg.attention_norm {
            AttentionNorm::Sender => edges.senders.clone(),
            AttentionNorm::Receiver => edges.receivers.clone(),
        };
        let alpha = tape.segment_softmax(gamma, groups, edges.node_count)?;
        Ok((q, k, gamma, alpha))
    }

    /// `h_v' = f_n(dropout(sum_s alpha_sv m_sv)) + h_v`.
    pub fn gat_layer_forward(
        &self,
        tape: &mut Tape,
        layer: usize,
        states: Var,
        edges: &EdgeIndex,
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Var, MessagePassingTrace)> {
        let (next, trace) = self.layer_vars(tape, layer, states, edges, dropout)?;
        Ok((next, trace.materialize(tape)))
    }

    fn layer_vars(
        &self,
        tape: &mut Tape,
        layer: usize,
        states: Var,
        edges: &EdgeIndex,
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Var, TraceVars)> {
        if layer >= self.layers.len() {
            return Err(Error::Contract(format!(
                "layer {layer} of a {}-layer encoder",
                self.layers.len()
            )));
        }
        let cfg = &self.config;
        let rel = self.relation_features(tape, layer, edges)?;
        let m = self.compute_messages(tape, layer, states, edges, rel)?;
        let (q, k, gamma, alpha) = self.attention_weights(tape, layer, states, edges, rel)?;
        let heads = cfg.num_heads;
        let dh = cfg.hidden_dim / heads;
        let mut weighted = Vec::with_capacity(heads);
        for h in 0..heads {
            let mh = tape.slice_cols(m, h * dh, (h + 1) * dh)?;
            let ah = tape.slice_cols(alpha, h, h + 1)?;
            weighted.push(tape.mul(mh, ah)?);
        }
        let weighted = if heads == 1 { weighted[0] } else { tape.concat_cols(&weighted)? };
        let mut agg = tape.scatter_add_rows(weighted, edges.receivers.clone(), edges.node_count)?;
        if let Some(rng) = dropout {
            if cfg.dropout_rate > 0.0 {
                let keep = 1.0 - cfg.dropout_rate;
                let shape = tape.shape(agg).to_vec();
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask)?);
                agg = tape.mul(agg, mask)?;
            }
        }
        let upd = self.layers[layer].node_update.forward(tape, agg)?;
        let next = tape.add(upd, states)?;
        Ok((
            next,
            TraceVars {
                relation_features: rel,
                messages: m,
                queries: q,
                keys: k,
                logits: gamma,
                attention: alpha,
            },
        ))
    }

    /// Projects `init` and runs every layer.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        g: &TypedGraph,
        init: Var,
        mut dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<NodeStates> {
        if g.query_node.is_none() {
            return Err(Error::Contract("encode_graph needs a graph with a query node".into()));
        }
        let edges = self.edge_index(g)?;
        if tape.shape(init) != [edges.node_count, self.input_proj.in_dim] {
            return Err(Error::shape(
                "encode_graph",
                format!(
                    "init {:?} for {} nodes of width {}",
                    tape.shape(init),
                    edges.node_count,
                    self.input_proj.in_dim
                ),
            ));
        }
        let h0 = self.input_proj.forward(tape, init)?;
        let mut layers = vec![h0];
        let mut traces = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let prev = *layers.last().expect("non-empty");
            let (next, t) = self.layer_vars(tape, l, prev, &edges, dropout.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore))?;
            layers.push(next);
            traces.push(t);
        }
        Ok(NodeStates { layers, traces })
    }

    /// `g = MLP([h_q; mean_v h_v; query_embedding])`, `[1, graph_dim]`.
    pub fn pool_graph(&self, tape: &mut Tape, g: &TypedGraph, states: &NodeStates, ctx: &QueryContext) -> Result<Var> {
        let q = g
            .query_node
            .ok_or_else(|| Error::Contract("pool_graph needs a query node".into()))?;
        let last = states.last();
        let hq = tape.gather_rows(last, Arc::new(vec![q]))?;
        let mean = tape.mean(last, Axis::Rows)?;
        let qe = tape.constant(Tensor::row(ctx.query_embedding.clone()));
        let x = tape.concat_cols(&[hq, mean, qe])?;
        self.pool.forward(tape, x)
    }
}
