//! Scoring heads, task losses, the combined objective and evaluation metrics.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::diagonal_cross_entropy;
use crate::error::{Error, Result};
use crate::numerics::{Mlp2, ParamId, ParamStore, Tape, Tensor, Var, LOG_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Pair,
    Retrieval,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::Pair => "pair",
            TaskKind::Retrieval => "retrieval",
        }
    }

    /// Name of the dev-selection metric.
    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Qa | TaskKind::Pair => "accuracy",
            TaskKind::Retrieval => "ndcg@10",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(TaskKind::Qa),
            "pair" | "pairs" => Ok(TaskKind::Pair),
            "retrieval" => Ok(TaskKind::Retrieval),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Scalar score from a joint embedding: `Mlp2(D_t -> hidden -> 1)`.
#[derive(Clone, Debug)]
pub struct ScoringHead {
    mlp: Mlp2,
}

impl ScoringHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        ScoringHead {
            mlp: Mlp2::new(store, name, [dim, hidden, 1], true, rng),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        self.mlp.params()
    }

    pub fn mlp(&self) -> &Mlp2 {
        &self.mlp
    }

    /// `[rows, D_t] -> [rows, 1]`
    pub fn score(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.mlp.forward(tape, z)
    }
}

/// Choice scores `[n, 1]` to a probability row `[1, n]`.
pub fn choice_probabilities(tape: &mut Tape, scores: Var) -> Result<Var> {
    let row = tape.transpose(scores);
    tape.row_softmax(row)
}

fn check_rows(tape: &Tape, v: Var, rows: usize, op: &'static str) -> Result<()> {
    if tape.shape(v).len() != 2 || tape.shape(v)[0] != rows || rows == 0 {
        return Err(Error::shape(op, format!("{:?} for {rows} labels", tape.shape(v))));
    }
    Ok(())
}

/// `-sum_i log p_i[gold_i]` over a `[batch, choices]` probability matrix.
pub fn qa_loss(tape: &mut Tape, probs: Var, gold: &[usize]) -> Result<Var> {
    check_rows(tape, probs, gold.len(), "qa_loss")?;
    let c = tape.shape(probs)[1];
    let mut mask = vec![0.0; gold.len() * c];
    for (i, &g) in gold.iter().enumerate() {
        if g >= c {
            return Err(Error::shape("qa_loss", format!("gold {g} of {c} choices")));
        }
        mask[i * c + g] = 1.0;
        let p = tape.value(probs).get(i, g);
        if p <= LOG_FLOOR {
            log::warn!("qa_loss: gold probability {p:e} clamped to {LOG_FLOOR:e}");
        }
    }
    let logp = tape.log(probs)?;
    let mask = tape.constant(Tensor::matrix(gold.len(), c, mask)?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// Binary cross-entropy summed over a `[batch, 1]` column of probabilities.
pub fn pair_loss(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    check_rows(tape, probs, labels.len(), "pair_loss")?;
    if tape.shape(probs)[1] != 1 {
        return Err(Error::shape("pair_loss", format!("{:?}, expected one column", tape.shape(probs))));
    }
    let n = labels.len();
    for (i, &y) in labels.iter().enumerate() {
        let p = tape.value(probs).get(i, 0);
        let q = if y { p } else { 1.0 - p };
        if q <= LOG_FLOOR {
            log::warn!("pair_loss: probability {q:e} of the true label clamped to {LOG_FLOOR:e}");
        }
    }
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let one_minus = tape.sub(ones, probs)?;
    let logp = tape.log(probs)?;
    let logq = tape.log(one_minus)?;
    let yv = tape.constant(Tensor::matrix(n, 1, y)?);
    let nv = tape.constant(Tensor::matrix(n, 1, not_y)?);
    let a = tape.mul(logp, yv)?;
    let b = tape.mul(logq, nv)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0))
}

/// In-batch contrastive loss on cosine similarity with temperature `tau`.
pub fn retrieval_loss(tape: &mut Tape, queries: Var, positives: Var, tau: f64) -> Result<Var> {
    let (a, b) = (tape.shape(queries).to_vec(), tape.shape(positives).to_vec());
    if a != b || a.len() != 2 || a[0] == 0 {
        return Err(Error::shape("retrieval_loss", format!("{a:?} vs {b:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::domain("retrieval_loss", format!("temperature {tau}")));
    }
    for (v, which) in [(queries, "query"), (positives, "positive")] {
        let t = tape.value(v);
        if let Some(r) = (0..t.rows()).find(|&r| t.row_slice(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Contract(format!("{which} embedding {r} has zero norm")));
        }
    }
    let q = tape.l2_normalize(queries)?;
    let p = tape.l2_normalize(positives)?;
    let pt = tape.transpose(p);
    let sim = tape.matmul(q, pt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    diagonal_cross_entropy(tape, logits)
}

/// Values of `task + lambda * align`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub info_nce: f64,
    pub lambda: f64,
    pub combined: f64,
}

/// `task + lambda * align` on the tape; `align` may be absent (lambda = 0 or single branch).
pub fn combined_loss(tape: &mut Tape, task: Var, align: Option<Var>, lambda: f64) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::domain("combined_loss", format!("lambda {lambda}")));
    }
    let task_value = tape.value(task).item()?;
    let (total, align_value) = match align {
        Some(a) if lambda > 0.0 => {
            let av = tape.value(a).item()?;
            let scaled = tape.scale(a, lambda);
            (tape.add(task, scaled)?, av)
        }
        Some(a) => (task, tape.value(a).item()?),
        None => (task, 0.0),
    };
    let combined = tape.value(total).item()?;
    Ok((
        total,
        LossBreakdown {
            task: task_value,
            info_nce: align_value,
            lambda,
            combined,
        },
    ))
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::shape("accuracy", format!("{} predictions, {} labels", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::domain("accuracy", "empty evaluation set"));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Index of the largest score; the earliest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// NDCG@k with gain / log2(rank + 1). An empty relevant set scores 0.
pub fn ndcg_at_k(ranked: &[String], gains: &HashMap<String, f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("ndcg_at_k", "k must be at least 1"));
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gains.get(id).copied().unwrap_or(0.0) * discount(i + 1))
        .sum();
    let mut ideal: Vec<f64> = gains.values().copied().filter(|&g| g > 0.0).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g * discount(i + 1)).sum();
    if idcg == 0.0 {
        log::warn!("ndcg_at_k: query has no relevant candidates");
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Candidate ids by descending cosine to `query`, ties by ascending id.
pub fn retrieval_rank(query: &[f64], candidates: &[(String, Vec<f64>)]) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = candidates
        .iter()
        .map(|(id, z)| (cosine(query, z), id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.to_string()).collect()
}
