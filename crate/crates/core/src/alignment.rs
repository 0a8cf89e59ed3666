//! Graph descriptions, the description branch, its on-disk cache, and the
//! contrastive alignment loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backbone::{Backbone, Role, Slot, TokenSequence, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::graph::TypedGraph;
use crate::numerics::{ParamStore, Precision, Tape, Tensor, Var};

/// Knowledge triples as `"a rel b; c rel d."`, in edge-list order.
pub fn serialize_graph(g: &TypedGraph) -> Result<String> {
    let mut parts = Vec::new();
    for e in g.knowledge_edges() {
        let name = |id: usize| {
            g.node(id)
                .map(|n| n.name.as_str())
                .ok_or_else(|| Error::Graph(format!("no name for node {id}")))
        };
        let rel = g
            .relations
            .get(e.rel)
            .ok_or_else(|| Error::Graph(format!("no name for relation {}", e.rel)))?;
        parts.push(format!("{} {} {}", name(e.src)?, rel, name(e.dst)?));
    }
    if parts.is_empty() {
        return Ok(String::new());
    }
    Ok(format!("{}.", parts.join("; ")))
}

/// `[<s>, description, <sep>, text, </s>]`. When too long the description
/// is cut first, then the text.
pub fn description_sequence(description: &[u32], text: &[u32], context: usize) -> TokenSequence {
    let budget = context.saturating_sub(3);
    let text_keep = text.len().min(budget);
    let desc_keep = description.len().min(budget - text_keep);
    let mut slots = Vec::with_capacity(desc_keep + text_keep + 3);
    slots.push((Slot::Token(BOS), Role::Bos));
    slots.extend(description[..desc_keep].iter().map(|&t| (Slot::Token(t), Role::Text)));
    slots.push((Slot::Token(SEP), Role::Sep));
    slots.extend(text[..text_keep].iter().map(|&t| (Slot::Token(t), Role::Text)));
    slots.push((Slot::Token(EOS), Role::Eos));
    TokenSequence::new(slots).expect("one bos, one trailing eos")
}

/// The `</s>` state of the description branch for `(description, text)`.
pub fn description_branch_embed(
    backbone: &Backbone,
    store: &ParamStore,
    precision: Precision,
    description: &str,
    text: &str,
) -> Result<Vec<f64>> {
    let seq = description_sequence(
        &backbone.tokenize(description),
        &backbone.tokenize(text),
        backbone.context_length(),
    );
    let mut tape = Tape::new(store, precision);
    let states = backbone.encode_sequence(&mut tape, &seq)?;
    let z = backbone.extract_joint(&mut tape, states, &seq)?;
    Ok(tape.value(z).data().to_vec())
}

const CACHE_FORMAT: &str = "janus-description-cache 1";

/// Description-branch encodings keyed by `(sample, text)` id, stored as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionCache {
    pub dim: usize,
    pub backbone_seed: u64,
    /// Hash of the frozen backbone weights the entries were computed with.
    pub backbone_hash: String,
    entries: BTreeMap<String, Vec<f32>>,
}

impl DescriptionCache {
    pub fn new(dim: usize, backbone_seed: u64, backbone_hash: impl Into<String>) -> Self {
        DescriptionCache {
            dim,
            backbone_seed,
            backbone_hash: backbone_hash.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Stores `z` rounded to f32, so a hit equals what a reload returns.
    pub fn insert(&mut self, key: impl Into<String>, z: &[f64]) -> Result<()> {
        let key = key.into();
        if key.contains('\n') || key.is_empty() {
            return Err(Error::Contract(format!("bad cache key {key:?}")));
        }
        if z.len() != self.dim {
            return Err(Error::shape("description cache", format!("{} values for dim {}", z.len(), self.dim)));
        }
        self.entries.insert(key, z.iter().map(|&x| x as f32).collect());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.entries.get(key).map(|v| v.iter().map(|&x| x as f64).collect())
    }

    /// Computes and stores the encoding unless `key` is already cached.
    pub fn get_or_compute(
        &mut self,
        key: &str,
        compute: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if let Some(v) = self.get(key) {
            return Ok(v);
        }
        let z = compute()?;
        self.insert(key, &z)?;
        Ok(self.get(key).expect("just inserted"))
    }

    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("manifest"), stem.with_extension("bin"))
    }

    /// Writes `<stem>.manifest` and `<stem>.bin` (little-endian f32 rows in manifest order).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest_path, bin_path) = Self::paths(stem);
        let mut manifest = String::new();
        manifest.push_str(&format!("format {CACHE_FORMAT}\n"));
        manifest.push_str(&format!("dim {}\n", self.dim));
        manifest.push_str(&format!("backbone_seed {}\n", self.backbone_seed));
        manifest.push_str(&format!("backbone_hash {}\n", self.backbone_hash));
        manifest.push_str(&format!("count {}\n", self.entries.len()));
        let mut bin = Vec::with_capacity(self.entries.len() * self.dim * 4);
        for (i, (key, v)) in self.entries.iter().enumerate() {
            manifest.push_str(&format!("entry {i} {key}\n"));
            for x in v {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_file(&manifest_path, manifest.as_bytes())?;
        write_file(&bin_path, &bin)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest_path, bin_path) = Self::paths(stem);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let bad = |line: usize, detail: String| Error::Parse {
            path: manifest_path.clone(),
            line,
            detail,
        };
        let mut header: BTreeMap<&str, &str> = BTreeMap::new();
        let mut keys = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (field, rest) = line.split_once(' ').ok_or_else(|| bad(i + 1, "expected `key value`".into()))?;
            if field == "entry" {
                let (idx, key) = rest.split_once(' ').ok_or_else(|| bad(i + 1, "expected `entry index key`".into()))?;
                if idx.parse::<usize>().ok() != Some(keys.len()) {
                    return Err(bad(i + 1, format!("entry index {idx} out of order")));
                }
                keys.push(key.to_string());
            } else if header.insert(field, rest).is_some() {
                return Err(bad(i + 1, format!("duplicate field `{field}`")));
            }
        }
        let field = |name: &str| header.get(name).copied().ok_or_else(|| bad(0, format!("missing `{name}`")));
        if field("format")? != CACHE_FORMAT {
            return Err(bad(1, "unsupported cache format".into()));
        }
        let num = |name: &str| -> Result<u64> {
            field(name)?.parse().map_err(|_| bad(0, format!("`{name}` is not an integer")))
        };
        let dim = num("dim")? as usize;
        let count = num("count")? as usize;
        if count != keys.len() {
            return Err(bad(0, format!("count {count} but {} entries", keys.len())));
        }
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() != count * dim * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes, expected {}",
                bin_path.display(),
                bytes.len(),
                count * dim * 4
            )));
        }
        let mut cache = DescriptionCache::new(dim, num("backbone_seed")?, field("backbone_hash")?);
        for (i, key) in keys.into_iter().enumerate() {
            let row = bytes[i * dim * 4..(i + 1) * dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.entries.insert(key, row);
        }
        Ok(cache)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// `-sum_i log softmax(logits)_ii` over a square `[n, n]` logit matrix.
pub fn diagonal_cross_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::shape("diagonal_cross_entropy", format!("logits {shape:?}")));
    }
    let p = tape.row_softmax(logits)?;
    let logp = tape.log(p)?;
    let eye = tape.constant(Tensor::identity(shape[0]));
    let diag = tape.mul(logp, eye)?;
    let total = tape.sum(diag);
    Ok(tape.scale(total, -1.0))
}

const UNIT_NORM_TOLERANCE: f64 = 1e-4;

fn check_unit_rows(tape: &Tape, v: Var, which: &str) -> Result<()> {
    let t = tape.value(v);
    for r in 0..t.rows() {
        let norm = t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Contract(format!("{which} row {r} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Contrastive loss with same-index positives and in-batch negatives.
/// Rows of both inputs must already be unit length.
pub fn info_nce(tape: &mut Tape, z_orig: Var, z_new: Var, temperature: f64) -> Result<Var> {
    let (a, b) = (tape.shape(z_orig).to_vec(), tape.shape(z_new).to_vec());
    if a != b || a.len() != 2 || a[0] == 0 {
        return Err(Error::shape("info_nce", format!("{a:?} vs {b:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::domain("info_nce", format!("temperature {temperature}")));
    }
    check_unit_rows(tape, z_orig, "z_orig")?;
    check_unit_rows(tape, z_new, "z_new")?;
    let zt = tape.transpose(z_new);
    let sim = tape.matmul(z_orig, zt)?;
    let sim = if temperature == 1.0 { sim } else { tape.scale(sim, 1.0 / temperature) };
    diagonal_cross_entropy(tape, sim)
}

/// Mean Euclidean distance between the unit-normalised rows of each pair.
pub fn alignment_distance(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("alignment_distance", "no pairs"));
    }
    let unit = |v: &[f64]| -> Result<Vec<f64>> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::domain("alignment_distance", "zero vector"));
        }
        Ok(v.iter().map(|x| x / n).collect())
    };
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::shape("alignment_distance", format!("{} vs {}", a.len(), b.len())));
        }
        let (a, b) = (unit(a)?, unit(b)?);
        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok(total / pairs.len() as f64)
}

/// Gathers rows of `z` and unit-normalises them.
pub fn normalized_rows(tape: &mut Tape, z: Var, rows: &[usize]) -> Result<Var> {
    let picked = tape.gather_rows(z, Arc::new(rows.to_vec()))?;
    tape.l2_normalize(picked)
}

#[cfg(test)]
mod tests;
