//! Graph-token adapter and fused `[graph, <s>, text, </s>]` sequences.

use rand::Rng;

use crate::backbone::{Role, Slot, TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Mlp2, ParamId, ParamStore, Tape, Var};

/// Two-layer relu MLP from graph width to backbone width.
#[derive(Clone, Debug)]
pub struct Adapter {
    mlp: Mlp2,
    in_dim: usize,
    out_dim: usize,
}

impl Adapter {
    /// Hidden width defaults to `max(in_dim, out_dim)` when `hidden` is 0.
    pub fn new<R: Rng>(store: &mut ParamStore, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        let hidden = if hidden == 0 { in_dim.max(out_dim) } else { hidden };
        Adapter {
            mlp: Mlp2::new(store, "adapter", [in_dim, hidden, out_dim], true, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn mlp(&self) -> &Mlp2 {
        &self.mlp
    }

    pub fn params(&self) -> [ParamId; 4] {
        self.mlp.params()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn adapt(&self, tape: &mut Tape, g: Var) -> Result<Var> {
        if tape.shape(g) != [1, self.in_dim] {
            return Err(Error::shape(
                "adapt",
                format!("graph embedding {:?}, adapter expects [1, {}]", tape.shape(g), self.in_dim),
            ));
        }
        self.mlp.forward(tape, g)
    }
}

/// `[graph, <s>, text..., </s>]`, keeping at most `context - 3` text tokens.
pub fn build_fused_sequence(graph_token: Var, tokens: &[u32], context: usize) -> TokenSequence {
    let keep = tokens.len().min(context.saturating_sub(3));
    let mut slots = Vec::with_capacity(keep + 3);
    slots.push((Slot::Embedded(graph_token), Role::GraphToken));
    slots.push((Slot::Token(BOS), Role::Bos));
    slots.extend(tokens[..keep].iter().map(|&t| (Slot::Token(t), Role::Text)));
    slots.push((Slot::Token(EOS), Role::Eos));
    TokenSequence::new(slots).expect("one bos, one trailing eos")
}

/// A joint embedding and its unit-norm version.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub z: Vec<f64>,
    pub z_normalized: Vec<f64>,
}

impl JointEmbedding {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::domain("joint embedding", "zero or non-finite norm"));
        }
        let z_normalized = z.iter().map(|x| x / norm).collect();
        Ok(JointEmbedding { z, z_normalized })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, Precision, Tensor};

    fn adapter(in_dim: usize, out_dim: usize) -> (ParamStore, Adapter) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Adapter::new(&mut store, in_dim, 0, out_dim, &mut rng);
        (store, a)
    }

    #[test]
    fn zero_adapter_maps_to_zero() {
        let (mut store, a) = adapter(4, 6);
        for id in a.params() {
            store.get_mut(id).value.fill(0.0);
        }
        let mut t = Tape::new(&store, Precision::F64);
        let g = t.constant(Tensor::row(vec![1.0, -2.0, 3.0, 0.5]));
        let out = a.adapt(&mut t, g).unwrap();
        assert!(t.value(out).data().iter().all(|&x| x == 0.0));
        assert_eq!(t.shape(out), &[1, 6]);
    }

    #[test]
    fn identity_adapter_passes_nonnegative_input() {
        let (mut store, a) = adapter(3, 3);
        for l in [&a.mlp().first, &a.mlp().second] {
            store.get_mut(l.weight).value = Tensor::identity(3);
            store.get_mut(l.bias).value.fill(0.0);
        }
        let mut t = Tape::new(&store, Precision::F64);
        let g = t.constant(Tensor::row(vec![0.0, 1.5, 2.0]));
        let out = a.adapt(&mut t, g).unwrap();
        assert_eq!(t.value(out).data(), &[0.0, 1.5, 2.0]);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let (store, a) = adapter(4, 6);
        let mut t = Tape::new(&store, Precision::F64);
        let g = t.constant(Tensor::row(vec![1.0; 5]));
        assert!(matches!(a.adapt(&mut t, g), Err(Error::Shape { .. })));
    }

    #[test]
    fn adapter_passes_grad_check() {
        let (mut store, a) = adapter(4, 6);
        let ids = store.trainable_ids();
        let report = grad_check(
            |t: &mut Tape| {
                let g = t.constant(Tensor::row(vec![0.3, -0.8, 1.1, 0.45]));
                let out = a.adapt(t, g)?;
                let w = t.constant(Tensor::row(vec![0.5, -1.0, 0.7, 0.9, -0.4, 0.8]));
                t.dot(out, w)
            },
            &mut store,
            &ids,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn fused_sequence_layout() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store, Precision::F64);
        let g = t.constant(Tensor::row(vec![0.0; 4]));
        let empty = build_fused_sequence(g, &[], 128);
        assert_eq!(empty.roles(), vec![Role::GraphToken, Role::Bos, Role::Eos]);
        let s = build_fused_sequence(g, &[9, 10], 128);
        assert_eq!(
            s.roles(),
            vec![Role::GraphToken, Role::Bos, Role::Text, Role::Text, Role::Eos]
        );
        for (n, ctx) in [(0usize, 8usize), (5, 8), (6, 8), (50, 8), (200, 128)] {
            let toks = vec![7u32; n];
            let s = build_fused_sequence(g, &toks, ctx);
            assert_eq!(s.len(), 3 + n.min(ctx - 3));
            assert_eq!(s.slots()[0].1, Role::GraphToken);
        }
    }

    #[test]
    fn joint_embedding_normalises() {
        let j = JointEmbedding::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(j.z_normalized, vec![0.6, 0.8]);
        assert!(JointEmbedding::new(vec![0.0, 0.0]).is_err());
    }
}
