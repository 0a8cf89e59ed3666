//! Typed multigraphs, node initialisation and query-node integration.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const NODE_TYPE_QUERY: usize = 0;
pub const NODE_TYPE_LINKED: usize = 1;
pub const NODE_TYPE_REGULAR: usize = 2;
pub const DEFAULT_NODE_TYPES: usize = 3;

/// Ceiling on subgraph size.
pub const DEFAULT_MAX_NODES: usize = 200;

pub const QUERY_NODE_NAME: &str = "<query>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: usize,
    pub name: String,
    #[serde(rename = "type")]
    pub node_type: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypedGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Names of the knowledge relations; the relation count is its length.
    pub relations: Vec<String>,
    #[serde(default = "default_node_types")]
    pub node_types: usize,
    /// Set once a query node has been integrated; never serialised.
    #[serde(skip)]
    pub query_node: Option<usize>,
}

fn default_node_types() -> usize {
    DEFAULT_NODE_TYPES
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNodeId(usize),
    NonDenseIds { expected: usize, found: usize },
    NodeTypeOutOfRange { node: usize, node_type: usize },
    DanglingSrc { edge: usize, node: usize },
    DanglingDst { edge: usize, node: usize },
    RelationOutOfRange { edge: usize, rel: usize },
    SelfLoop { edge: usize, node: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Violation::NonDenseIds { expected, found } => {
                write!(f, "node ids not dense: expected id {expected}, found {found}")
            }
            Violation::NodeTypeOutOfRange { node, node_type } => {
                write!(f, "node {node}: type {node_type} out of range")
            }
            Violation::DanglingSrc { edge, node } => {
                write!(f, "edge {edge}: dangling src {node}")
            }
            Violation::DanglingDst { edge, node } => {
                write!(f, "edge {edge}: dangling dst {node}")
            }
            Violation::RelationOutOfRange { edge, rel } => {
                write!(f, "edge {edge}: relation out of range ({rel})")
            }
            Violation::SelfLoop { edge, node } => write!(f, "edge {edge}: self-loop on {node}"),
        }
    }
}

impl TypedGraph {
    pub fn new(relations: Vec<String>) -> Self {
        TypedGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            relations,
            node_types: DEFAULT_NODE_TYPES,
            query_node: None,
        }
    }

    pub fn add_node(&mut self, name: impl Into<String>, node_type: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            name: name.into(),
            node_type,
        });
        id
    }

    pub fn add_edge(&mut self, src: usize, rel: usize, dst: usize) {
        self.edges.push(Edge { src, rel, dst });
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Reserved relation id joining the query node to linked nodes.
    pub fn query_link_relation(&self) -> usize {
        self.relations.len()
    }

    /// The node list sorted by id; valid graphs are already in this order.
    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes.get(id).filter(|n| n.id == id)
    }

    /// Edges between knowledge nodes, in list order (query links excluded).
    pub fn knowledge_edges(&self) -> impl Iterator<Item = &Edge> {
        let q = self.query_node;
        self.edges
            .iter()
            .filter(move |e| Some(e.src) != q && Some(e.dst) != q)
    }

    /// Applies `perm` (old id -> new id) to nodes and edges.
    pub fn relabel(&self, perm: &[usize]) -> Result<TypedGraph> {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Graph("relabel needs a permutation of node ids".into()));
        }
        let mut nodes = self.nodes.clone();
        for node in &mut nodes {
            node.id = perm[node.id];
        }
        nodes.sort_by_key(|n| n.id);
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                rel: e.rel,
                dst: perm[e.dst],
            })
            .collect();
        Ok(TypedGraph {
            nodes,
            edges,
            relations: self.relations.clone(),
            node_types: self.node_types,
            query_node: self.query_node.map(|q| perm[q]),
        })
    }

    /// Drops the query node and its links.
    pub fn without_query_node(&self) -> TypedGraph {
        let Some(q) = self.query_node else {
            return self.clone();
        };
        TypedGraph {
            nodes: self.nodes.iter().filter(|n| n.id != q).cloned().collect(),
            edges: self.knowledge_edges().copied().collect(),
            relations: self.relations.clone(),
            node_types: self.node_types,
            query_node: None,
        }
    }
}

/// Every invariant violation in `g`; an empty list means the graph is valid.
pub fn validate_graph(g: &TypedGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (pos, node) in g.nodes.iter().enumerate() {
        if !seen.insert(node.id) {
            out.push(Violation::DuplicateNodeId(node.id));
        } else if node.id != pos {
            out.push(Violation::NonDenseIds {
                expected: pos,
                found: node.id,
            });
        }
        if node.node_type >= g.node_types {
            out.push(Violation::NodeTypeOutOfRange {
                node: node.id,
                node_type: node.node_type,
            });
        }
    }
    let n = g.nodes.len();
    for (i, e) in g.edges.iter().enumerate() {
        if e.src >= n {
            out.push(Violation::DanglingSrc { edge: i, node: e.src });
        }
        if e.dst >= n {
            out.push(Violation::DanglingDst { edge: i, node: e.dst });
        }
        let is_query_link = g.query_node == Some(e.src) && e.rel == g.query_link_relation();
        if e.rel >= g.relation_count() && !is_query_link {
            out.push(Violation::RelationOutOfRange { edge: i, rel: e.rel });
        }
        if e.src == e.dst {
            out.push(Violation::SelfLoop { edge: i, node: e.src });
        }
    }
    out
}

pub fn ensure_valid(g: &TypedGraph) -> Result<()> {
    let v = validate_graph(g);
    if v.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
        Err(Error::Graph(msgs.join("; ")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeInitMode {
    /// Mean of the backbone's token embeddings over the node name.
    #[serde(rename = "backbone-name")]
    BackboneName,
    /// Standard normal rows seeded from `(name, seed)`.
    #[serde(rename = "seeded-random")]
    SeededRandom,
}

impl std::str::FromStr for NodeInitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone-name" | "backbone-name-encoding" => Ok(NodeInitMode::BackboneName),
            "seeded-random" => Ok(NodeInitMode::SeededRandom),
            other => Err(Error::Config(format!("unknown node init mode `{other}`"))),
        }
    }
}

/// FNV-1a, used wherever a stable string hash is needed.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Frozen initial node features, one row per node, width = backbone dim.
pub fn init_node_embeddings(
    g: &TypedGraph,
    mode: NodeInitMode,
    seed: u64,
    backbone: &Backbone,
    store: &ParamStore,
) -> Result<Tensor> {
    let dim = backbone.dim();
    let mut rows = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let row = match mode {
            NodeInitMode::BackboneName => backbone.mean_token_embedding(store, &node.name),
            NodeInitMode::SeededRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(node.name.as_bytes()) ^ seed);
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
        };
        rows.push(row);
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, dim]));
    }
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryContext {
    pub query_text: String,
    /// Sorted, de-duplicated ids of nodes mentioned by the query.
    pub linked: Vec<usize>,
    pub query_embedding: Vec<f64>,
}

impl QueryContext {
    pub fn new(query_text: impl Into<String>, linked: impl IntoIterator<Item = usize>, query_embedding: Vec<f64>) -> Self {
        let linked: BTreeSet<usize> = linked.into_iter().collect();
        QueryContext {
            query_text: query_text.into(),
            linked: linked.into_iter().collect(),
            query_embedding,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Integrated {
    pub graph: TypedGraph,
    pub init: Tensor,
    pub warnings: Vec<String>,
}

/// Appends the query node `v_q` (id `n`) linked to every node in `ctx.linked`.
pub fn integrate_query_node(g: &TypedGraph, init: &Tensor, ctx: &QueryContext) -> Result<Integrated> {
    if g.query_node.is_some() {
        return Err(Error::Graph("query node already present".into()));
    }
    let n = g.node_count();
    if init.rows() != n {
        return Err(Error::shape(
            "integrate_query_node",
            format!("{} init rows for {n} nodes", init.rows()),
        ));
    }
    if init.cols() != ctx.query_embedding.len() {
        return Err(Error::shape(
            "integrate_query_node",
            format!(
                "query embedding width {} vs node width {}",
                ctx.query_embedding.len(),
                init.cols()
            ),
        ));
    }
    if let Some(bad) = ctx.linked.iter().find(|&&u| u >= n) {
        return Err(Error::Graph(format!("linked node {bad} not in graph")));
    }
    let mut warnings = Vec::new();
    if ctx.linked.is_empty() {
        warnings.push("query node is isolated: no linked nodes".to_string());
        log::warn!("query node is isolated: no linked nodes");
    }
    let mut graph = g.clone();
    let q = graph.add_node(QUERY_NODE_NAME, NODE_TYPE_QUERY);
    let link = graph.query_link_relation();
    for &u in &ctx.linked {
        graph.add_edge(q, link, u);
    }
    graph.query_node = Some(q);
    let mut data = init.data().to_vec();
    data.extend_from_slice(&ctx.query_embedding);
    let init = Tensor::matrix(n + 1, init.cols(), data)?;
    Ok(Integrated {
        graph,
        init,
        warnings,
    })
}
