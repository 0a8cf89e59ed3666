//! Seeded synthetic generators for the three tasks.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Candidate, Choice, Document, PairRecord, QaRecord, Record, RetrievalRecord};
use crate::alignment::serialize_graph;
use crate::error::{Error, Result};
use crate::graph::{stable_hash, TypedGraph, DEFAULT_MAX_NODES, NODE_TYPE_LINKED, NODE_TYPE_REGULAR};
use crate::tasks::TaskKind;

const ENTITIES: &[&str] = &[
    "apple", "river", "stone", "falcon", "lantern", "meadow", "copper", "violin", "harbor", "cedar", "glacier", "pepper",
    "marble", "otter", "canyon", "saddle", "thistle", "beacon", "walnut", "ember", "quarry", "heron", "mosaic", "pillow",
    "tundra", "anchor", "bramble", "cobalt", "dune", "fern", "garnet", "hazel", "iris", "juniper", "kettle", "lagoon",
    "magnet", "nutmeg", "orchid", "pebble", "quill", "raven", "spruce", "tulip", "umber", "velvet", "willow", "yarrow",
    "zephyr", "acorn", "badger", "cinder", "dahlia", "gopher", "geyser", "hollow", "indigo", "jasper", "kelp", "lotus",
];

const RELATIONS: &[&str] = &["causes", "part of", "used for", "located in", "made of", "desires"];

/// A relation family; coherent graph-sensitive pair graphs draw every edge from one topic.
#[derive(Clone, Copy, Debug)]
pub struct Topic {
    pub name: &'static str,
    pub relations: [&'static str; 3],
}

pub const TOPICS: &[Topic] = &[
    Topic { name: "weather", relations: ["rains on", "freezes", "warms"] },
    Topic { name: "cooking", relations: ["seasons", "boils", "bakes"] },
    Topic { name: "music", relations: ["plays", "sings to", "drums on"] },
    Topic { name: "travel", relations: ["flies to", "drives to", "sails to"] },
    Topic { name: "sports", relations: ["tackles", "passes to", "races"] },
    Topic { name: "medicine", relations: ["treats", "infects", "heals"] },
];

const TOPIC_TEMPLATES: &[&str] = &["this passage is about {}", "a short note on {}", "everything here concerns {}"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairVariant {
    /// Text is the graph's serialization (or another sample's).
    Standard,
    /// Text only names a topic; the label is whether the graph's relations belong to it.
    GraphSensitive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_variant() -> PairVariant {
    PairVariant::Standard
}
fn default_min_nodes() -> usize {
    5
}
fn default_max_nodes() -> usize {
    9
}
fn default_choices() -> usize {
    5
}
fn default_pool() -> usize {
    10
}
fn default_topics() -> usize {
    4
}

/// Generator settings, read from a TOML key-value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub task: TaskKind,
    #[serde(default = "default_variant")]
    pub variant: PairVariant,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    #[serde(default = "default_min_nodes")]
    pub min_nodes: usize,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    /// Pair: label flip rate. QA: gold reassignment rate. Retrieval: relevance reassignment rate.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_choices")]
    pub choices: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Number of relation families in the graph-sensitive pair variant.
    #[serde(default = "default_topics")]
    pub topics: usize,
    /// Entity vocabulary; empty means the built-in list.
    #[serde(default)]
    pub entities: Vec<String>,
    /// Relation vocabulary; empty means the built-in list.
    #[serde(default)]
    pub relations: Vec<String>,
}

impl GeneratorSpec {
    pub fn new(task: TaskKind, seed: u64, sizes: [usize; 3]) -> Self {
        GeneratorSpec {
            task,
            variant: default_variant(),
            seed,
            train: sizes[0],
            dev: sizes[1],
            test: sizes[2],
            min_nodes: default_min_nodes(),
            max_nodes: default_max_nodes(),
            noise: 0.0,
            choices: default_choices(),
            pool: default_pool(),
            topics: default_topics(),
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GeneratorSpec = toml::from_str(text).map_err(|e| Error::Config(format!("generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_nodes < 2 || self.min_nodes > self.max_nodes {
            return bad(format!("node range {}..={} is empty or below 2", self.min_nodes, self.max_nodes));
        }
        if self.max_nodes > DEFAULT_MAX_NODES {
            return bad(format!("max_nodes {} exceeds the cap of {DEFAULT_MAX_NODES}", self.max_nodes));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        let entities = entity_names(self);
        let unique: BTreeSet<&String> = entities.iter().collect();
        if unique.len() != entities.len() {
            return bad("entity names must be unique".into());
        }
        if entities.iter().any(|e| e.is_empty() || e.contains(char::is_whitespace)) {
            return bad("entity names must be single non-empty words".into());
        }
        if entities.len() < self.max_nodes {
            return bad(format!("{} entities cannot fill {}-node graphs", entities.len(), self.max_nodes));
        }
        match self.task {
            TaskKind::Pair => {
                for split in Split::ALL {
                    if self.size(split) < 2 {
                        return bad(format!("{split} size {} < 2 cannot form mismatched pairs", self.size(split)));
                    }
                }
                if self.variant == PairVariant::GraphSensitive {
                    if !(2..=TOPICS.len()).contains(&self.topics) {
                        return bad(format!("topics must be in 2..={}", TOPICS.len()));
                    }
                    if !self.relations.is_empty() {
                        return bad("the graph-sensitive variant uses built-in relation families".into());
                    }
                }
            }
            TaskKind::Qa => {
                if self.choices < 2 {
                    return bad(format!("choices {} < 2", self.choices));
                }
                if self.max_nodes < self.choices + 1 {
                    return bad(format!("max_nodes {} too small for {} choices", self.max_nodes, self.choices));
                }
            }
            TaskKind::Retrieval => {
                if self.pool < 2 {
                    return bad(format!("pool size {} < 2", self.pool));
                }
                if self.min_nodes < 3 {
                    return bad("retrieval graphs need at least 3 nodes".into());
                }
            }
        }
        if self.relation_names().is_empty() {
            return bad("empty relation vocabulary".into());
        }
        Ok(())
    }

    fn relation_names(&self) -> Vec<String> {
        if self.task == TaskKind::Pair && self.variant == PairVariant::GraphSensitive {
            TOPICS[..self.topics]
                .iter()
                .flat_map(|t| t.relations.iter().map(|r| r.to_string()))
                .collect()
        } else if self.relations.is_empty() {
            RELATIONS.iter().map(|r| r.to_string()).collect()
        } else {
            self.relations.clone()
        }
    }
}

pub fn entity_names(spec: &GeneratorSpec) -> Vec<String> {
    if spec.entities.is_empty() {
        ENTITIES.iter().map(|e| e.to_string()).collect()
    } else {
        spec.entities.clone()
    }
}

/// All three splits, in train/dev/test order.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<(Split, Vec<Record>)>> {
    spec.validate()?;
    Split::ALL
        .iter()
        .map(|&s| Ok((s, generate_split(spec, s)?)))
        .collect()
}

/// One split; each split has its own RNG stream so sizes of one do not shift another.
pub fn generate_split(spec: &GeneratorSpec, split: Split) -> Result<Vec<Record>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(split.as_str().as_bytes()));
    let ctx = Ctx {
        entities: entity_names(spec),
        relations: spec.relation_names(),
        spec,
        split,
    };
    match spec.task {
        TaskKind::Pair => Ok(gen_pairs(&ctx, &mut rng)),
        TaskKind::Qa => Ok(gen_qa(&ctx, &mut rng)),
        TaskKind::Retrieval => Ok(gen_retrieval(&ctx, &mut rng)),
    }
}

struct Ctx<'a> {
    entities: Vec<String>,
    relations: Vec<String>,
    spec: &'a GeneratorSpec,
    split: Split,
}

impl Ctx<'_> {
    fn id(&self, i: usize) -> String {
        format!("{}-{i:06}", self.split)
    }

    fn node_count(&self, rng: &mut ChaCha8Rng, floor: usize) -> usize {
        let lo = self.spec.min_nodes.max(floor);
        rng.gen_range(lo..=self.spec.max_nodes.max(lo))
    }

    /// Connected random graph over distinct entities, every `required` name included.
    fn random_graph(&self, rng: &mut ChaCha8Rng, n: usize, rels: &[usize], required: &[&str]) -> TypedGraph {
        let mut names: Vec<&str> = required.to_vec();
        let mut pool: Vec<&str> = self
            .entities
            .iter()
            .map(String::as_str)
            .filter(|e| !required.contains(e))
            .collect();
        pool.shuffle(rng);
        names.extend(pool.into_iter().take(n.saturating_sub(names.len())));
        names.shuffle(rng);
        let mut g = TypedGraph::new(self.relations.clone());
        for name in &names {
            g.add_node(*name, NODE_TYPE_REGULAR);
        }
        let mut seen = BTreeSet::new();
        let mut push = |g: &mut TypedGraph, s: usize, r: usize, d: usize| {
            if s != d && seen.insert((s, r, d)) {
                g.add_edge(s, r, d);
            }
        };
        for v in 1..names.len() {
            let u = rng.gen_range(0..v);
            let r = rels[rng.gen_range(0..rels.len())];
            if rng.gen_bool(0.5) {
                push(&mut g, u, r, v);
            } else {
                push(&mut g, v, r, u);
            }
        }
        for _ in 0..names.len() / 2 {
            let s = rng.gen_range(0..names.len());
            let d = rng.gen_range(0..names.len());
            let r = rels[rng.gen_range(0..rels.len())];
            push(&mut g, s, r, d);
        }
        g
    }

    fn all_relations(&self) -> Vec<usize> {
        (0..self.relations.len()).collect()
    }
}

fn mark_linked(g: &mut TypedGraph, linked: &[usize]) {
    for node in &mut g.nodes {
        node.node_type = if linked.contains(&node.id) {
            NODE_TYPE_LINKED
        } else {
            NODE_TYPE_REGULAR
        };
    }
}

fn node_named(g: &TypedGraph, name: &str) -> Option<usize> {
    g.nodes.iter().find(|n| n.name == name).map(|n| n.id)
}

/// Nodes whose names appear as words of `text`.
fn link_by_name(g: &TypedGraph, text: &str) -> Vec<usize> {
    let words: BTreeSet<&str> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    g.nodes
        .iter()
        .filter(|n| words.contains(n.name.as_str()))
        .map(|n| n.id)
        .collect()
}

/// Exactly `size / 2` negatives, shuffled among positives.
fn balanced_labels(size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut labels: Vec<bool> = (0..size).map(|i| i >= size / 2).collect();
    labels.shuffle(rng);
    labels
}

fn gen_pairs(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<Record> {
    match ctx.spec.variant {
        PairVariant::Standard => gen_standard_pairs(ctx, rng),
        PairVariant::GraphSensitive => gen_graph_sensitive_pairs(ctx, rng),
    }
}

fn gen_standard_pairs(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let size = ctx.spec.size(ctx.split);
    let labels = balanced_labels(size, rng);
    // Every sample gets its own graph and its own faithful text first.
    let samples: Vec<(TypedGraph, String)> = (0..size)
        .map(|_| {
            let n = ctx.node_count(rng, 2);
            let g = ctx.random_graph(rng, n, &ctx.all_relations(), &[]);
            let text = serialize_graph(&g).expect("generated graphs are valid");
            (g, text)
        })
        .collect();
    let mut out = Vec::with_capacity(size);
    for (i, &positive) in labels.iter().enumerate() {
        let (graph, own) = &samples[i];
        let text = if positive {
            own.clone()
        } else {
            // Another sample's text that says something different from this one.
            let others: Vec<usize> = (0..size).filter(|&j| j != i && samples[j].1 != *own).collect();
            samples[others[rng.gen_range(0..others.len())]].1.clone()
        };
        let label = if rng.gen_bool(ctx.spec.noise) { !positive } else { positive };
        let mut graph = graph.clone();
        let linked = link_by_name(&graph, &text);
        mark_linked(&mut graph, &linked);
        out.push(Record::Pair(PairRecord {
            id: ctx.id(i),
            text,
            graph,
            linked,
            label,
        }));
    }
    out
}

fn family(topic: usize) -> Vec<usize> {
    (3 * topic..3 * topic + 3).collect()
}

fn gen_graph_sensitive_pairs(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let size = ctx.spec.size(ctx.split);
    let labels = balanced_labels(size, rng);
    // Texts only ever name the first half of the topics; mismatched graphs
    // come from the other half, an unrelated domain.
    let topics = ctx.spec.topics.min(TOPICS.len());
    let named = topics / 2;
    let mut out = Vec::with_capacity(size);
    for (i, &positive) in labels.iter().enumerate() {
        let n = ctx.node_count(rng, 2);
        let t = rng.gen_range(0..named);
        let graph_topic = if positive { t } else { rng.gen_range(named..topics) };
        let mut graph = ctx.random_graph(rng, n, &family(graph_topic), &[]);
        let template = TOPIC_TEMPLATES[rng.gen_range(0..TOPIC_TEMPLATES.len())];
        let text = template.replace("{}", TOPICS[t].name);
        let label = if rng.gen_bool(ctx.spec.noise) { !positive } else { positive };
        let linked: Vec<usize> = (0..graph.node_count()).collect();
        mark_linked(&mut graph, &linked);
        out.push(Record::Pair(PairRecord {
            id: ctx.id(i),
            text,
            graph,
            linked,
            label,
        }));
    }
    out
}

/// Topic of a graph whose triples all share one relation family.
pub fn pair_topic_of_graph(g: &TypedGraph) -> Option<usize> {
    let topics: BTreeSet<usize> = g
        .edges
        .iter()
        .filter_map(|e| g.relations.get(e.rel))
        .filter_map(|name| TOPICS.iter().position(|t| t.relations.contains(&name.as_str())))
        .collect();
    match topics.len() {
        1 => topics.into_iter().next(),
        _ => None,
    }
}

/// Topic index named by a graph-sensitive pair text.
pub fn pair_topic_of_text(text: &str) -> Option<usize> {
    let last = text.split_whitespace().last()?;
    TOPICS.iter().position(|t| t.name == last)
}

fn qa_question(entity: &str, relation: &str) -> String {
    format!("which entity does {entity} {relation}")
}

/// Graph for one QA record plus `(A, r, B)` where `B` is the only `r`-successor of `A`.
fn build_qa_graph(ctx: &Ctx, n: usize, rng: &mut ChaCha8Rng) -> Option<(TypedGraph, usize, usize, usize)> {
    let choices = ctx.spec.choices;
    let g = ctx.random_graph(rng, n, &ctx.all_relations(), &[]);
    let mut anchors: Vec<(usize, usize, usize)> = Vec::new();
    for e in &g.edges {
        let successors = g.edges.iter().filter(|f| f.src == e.src && f.rel == e.rel).count();
        if successors == 1 && g.node_count() >= choices + 1 {
            anchors.push((e.src, e.rel, e.dst));
        }
    }
    let &(a, r, b) = anchors.choose(rng)?;
    Some((g, a, r, b))
}

fn gen_qa(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let size = ctx.spec.size(ctx.split);
    let k = ctx.spec.choices;
    let mut out = Vec::with_capacity(size);
    let mut i = 0;
    while out.len() < size {
        let n = ctx.node_count(rng, k + 1);
        let Some((mut g, a, r, b)) = build_qa_graph(ctx, n, rng) else {
            continue;
        };
        let mut distractors: Vec<usize> = (0..g.node_count())
            .filter(|&v| v != a && v != b && !g.edges.iter().any(|e| e.src == a && e.rel == r && e.dst == v))
            .collect();
        distractors.shuffle(rng);
        let mut nodes: Vec<usize> = distractors.into_iter().take(k - 1).collect();
        let gold_pos = rng.gen_range(0..k);
        nodes.insert(gold_pos, b);
        let gold = if rng.gen_bool(ctx.spec.noise) { rng.gen_range(0..k) } else { gold_pos };
        let linked = vec![a];
        mark_linked(&mut g, &linked);
        let question = qa_question(&g.nodes[a].name, &ctx.relations[r]);
        let choices = nodes
            .iter()
            .map(|&v| Choice {
                text: g.nodes[v].name.clone(),
                node: Some(v),
            })
            .collect();
        out.push(Record::Qa(QaRecord {
            id: ctx.id(i),
            question,
            graph: g,
            linked,
            choices,
            gold,
        }));
        i += 1;
    }
    out
}

/// Independent check of a QA record: the unique choice joined to the question
/// entity by the question's relation, if exactly one exists.
pub fn qa_gold_oracle(rec: &QaRecord) -> Option<usize> {
    let &anchor = rec.linked.first()?;
    let anchor_name = &rec.graph.nodes.get(anchor)?.name;
    let rest = rec.question.strip_prefix(&format!("which entity does {anchor_name} "))?;
    let rel = rec.graph.relations.iter().position(|r| r == rest)?;
    let hits: Vec<usize> = rec
        .choices
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            c.node
                .is_some_and(|v| rec.graph.edges.iter().any(|e| e.src == anchor && e.rel == rel && e.dst == v))
        })
        .map(|(i, _)| i)
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

fn named_triples(g: &TypedGraph) -> BTreeSet<(String, String, String)> {
    g.edges
        .iter()
        .filter(|e| e.rel < g.relations.len())
        .map(|e| {
            (
                g.nodes[e.src].name.clone(),
                g.relations[e.rel].clone(),
                g.nodes[e.dst].name.clone(),
            )
        })
        .collect()
}

/// Whether two graphs share at least one `(subject, relation, object)` triple by name.
pub fn motif_shared(a: &TypedGraph, b: &TypedGraph) -> bool {
    !named_triples(a).is_disjoint(&named_triples(b))
}

fn with_motif(ctx: &Ctx, rng: &mut ChaCha8Rng, x: &str, r: usize, y: &str) -> TypedGraph {
    let n = ctx.node_count(rng, 3);
    let mut g = ctx.random_graph(rng, n, &ctx.all_relations(), &[x, y]);
    let (s, d) = (node_named(&g, x).unwrap(), node_named(&g, y).unwrap());
    if !g.edges.iter().any(|e| e.src == s && e.rel == r && e.dst == d) {
        g.add_edge(s, r, d);
    }
    g
}

fn gen_retrieval(ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let size = ctx.spec.size(ctx.split);
    let pool = ctx.spec.pool;
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let picks: Vec<&String> = ctx.entities.choose_multiple(rng, 2).collect();
        let (x, y) = (picks[0].as_str(), picks[1].as_str());
        let r = rng.gen_range(0..ctx.relations.len());
        let mut qg = with_motif(ctx, rng, x, r, y);
        let q_linked = vec![node_named(&qg, x).unwrap()];
        mark_linked(&mut qg, &q_linked);
        let query = Document {
            text: format!("documents related to {x}"),
            graph: qg,
            linked: q_linked,
        };
        let mut docs: Vec<(Document, bool)> = Vec::with_capacity(pool);
        let mut pg = with_motif(ctx, rng, x, r, y);
        let p_linked = vec![node_named(&pg, y).unwrap()];
        mark_linked(&mut pg, &p_linked);
        docs.push((
            Document {
                text: format!("a passage about {y}"),
                graph: pg,
                linked: p_linked,
            },
            true,
        ));
        while docs.len() < pool {
            let n = ctx.node_count(rng, 3);
            let mut g = ctx.random_graph(rng, n, &ctx.all_relations(), &[]);
            if motif_shared(&query.graph, &g) {
                continue;
            }
            let z = rng.gen_range(0..g.node_count());
            let linked = vec![z];
            mark_linked(&mut g, &linked);
            docs.push((
                Document {
                    text: format!("a passage about {}", g.nodes[z].name),
                    graph: g,
                    linked,
                },
                false,
            ));
        }
        docs.shuffle(rng);
        if rng.gen_bool(ctx.spec.noise) {
            let k = rng.gen_range(0..docs.len());
            for (j, d) in docs.iter_mut().enumerate() {
                d.1 = j == k;
            }
        }
        let id = ctx.id(i);
        let candidates = docs
            .into_iter()
            .enumerate()
            .map(|(k, (d, relevant))| Candidate {
                id: format!("{id}-c{k:02}"),
                text: d.text,
                graph: d.graph,
                linked: d.linked,
                gain: if relevant { 1.0 } else { 0.0 },
            })
            .collect();
        out.push(Record::Retrieval(RetrievalRecord { id, query, candidates }));
    }
    out
}
