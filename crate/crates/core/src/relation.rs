//! Relation representations and label matching.
//!
//! A directed pair `(head, tail)` is represented by a feed-forward map of
//! the concatenated entity vectors. Its score against relation type `k` is
//! the sigmoid of the inner product with the type's embedding, and a type
//! is assigned when that score strictly exceeds the decision threshold.

use ndarray::{Array1, Array2};

use crate::autodiff::{sigmoid, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::params::{ParamGroup, ParamStore};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct RelationHead {
    /// `2D → D_latent → D_latent`
    pub ffn_pair: FeedForward,
    pub score_threshold: f64,
}

impl RelationHead {
    pub fn new(
        store: &mut ParamStore,
        entity_dim: usize,
        latent: usize,
        activation: Activation,
        score_threshold: f64,
    ) -> Result<Self> {
        check_threshold(score_threshold)?;
        Ok(Self {
            ffn_pair: FeedForward::new(
                store,
                "heads.pair",
                (2 * entity_dim, latent, latent),
                activation,
                ParamGroup::Heads,
            ),
            score_threshold,
        })
    }

    /// Relation vectors for a batch of pairs: `FFN([heads ; tails])`.
    pub fn relation_repr<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        heads: Var<'t>,
        tails: Var<'t>,
    ) -> Result<Var<'t>> {
        let (hr, hc) = heads.shape();
        let (tr, tc) = tails.shape();
        if hr != tr || hc != tc || hc + tc != self.ffn_pair.in_dim() {
            return Err(Error::Shape(format!(
                "relation_repr expects two P×{} inputs, got {hr}×{hc} and {tr}×{tc}",
                self.ffn_pair.in_dim() / 2
            )));
        }
        Ok(self
            .ffn_pair
            .forward(tape, store, tape.concat_cols(&[heads, tails])))
    }
}

pub fn check_threshold(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            arg: "threshold",
            reason: format!("{tau} is not in (0, 1)"),
        })
    }
}

/// Matching logits `P × K`: inner products of relation and label vectors.
pub fn match_logits<'t>(relations: Var<'t>, labels: Var<'t>) -> Var<'t> {
    relations.matmul_t(labels)
}

/// Scores in (0, 1) for one relation vector against `K` label embeddings.
pub fn score(h_r: &Array1<f64>, label_embs: &Array2<f64>) -> Result<Array1<f64>> {
    if label_embs.ncols() != h_r.len() {
        return Err(Error::Shape(format!(
            "relation width {} vs label width {}",
            h_r.len(),
            label_embs.ncols()
        )));
    }
    Ok(label_embs.dot(h_r).mapv(sigmoid))
}

/// Indices whose score is strictly above `tau`.
pub fn decide(scores: &[f64], tau: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{numeric_grad, rel_err};
    use crate::rng::SeededRng;
    use ndarray::array;

    fn head(seed: u64, d: usize, latent: usize) -> (ParamStore, RelationHead) {
        let mut store = ParamStore::new(seed);
        let h = RelationHead::new(&mut store, d, latent, Activation::Gelu, 0.5).unwrap();
        (store, h)
    }

    fn repr(store: &ParamStore, h: &RelationHead, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        h.relation_repr(
            &tape,
            store,
            tape.constant(a.clone()),
            tape.constant(b.clone()),
        )
        .unwrap()
        .to_array()
    }

    #[test]
    fn order_matters() {
        let (store, h) = head(1, 3, 4);
        let a = array![[0.5, -1.0, 2.0]];
        let b = array![[1.5, 0.0, -0.3]];
        assert_ne!(repr(&store, &h, &a, &b), repr(&store, &h, &b, &a));
    }

    #[test]
    fn zero_weights_leave_the_bias_path() {
        let (mut store, h) = head(2, 3, 4);
        for pid in [h.ffn_pair.first.weight, h.ffn_pair.second.weight] {
            store.get_mut(pid).fill(0.0);
        }
        store
            .get_mut(h.ffn_pair.second.bias)
            .assign(&array![[0.1, 0.2, 0.3, 0.4]]);
        let a = array![[0.5, -1.0, 2.0]];
        let b = array![[1.5, 0.0, -0.3]];
        let out = repr(&store, &h, &a, &b);
        assert_eq!(out, array![[0.1, 0.2, 0.3, 0.4]]);
        assert_eq!(out, repr(&store, &h, &(a * 7.0), &b));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (store, h) = head(3, 3, 4);
        let tape = Tape::new();
        let r = h.relation_repr(
            &tape,
            &store,
            tape.constant(Array2::zeros((1, 3))),
            tape.constant(Array2::zeros((1, 2))),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_wrt_head_matches_finite_differences() {
        let (mut store, h) = head(4, 3, 4);
        let a0 = array![[0.5, -1.0, 2.0], [0.1, 0.2, -0.7]];
        let b0 = array![[1.5, 0.0, -0.3], [0.9, -0.4, 0.3]];
        let w = array![[0.3, -0.2, 1.0, 0.5], [1.0, 0.1, -0.6, 0.2]];
        let pid = store.add("x", a0.clone(), ParamGroup::Heads, true);
        let tape = Tape::new();
        let out = h
            .relation_repr(
                &tape,
                &store,
                tape.param(&store, pid),
                tape.constant(b0.clone()),
            )
            .unwrap()
            .mul(tape.constant(w.clone()));
        let total = tape
            .constant(Array2::ones((1, 2)))
            .matmul(out)
            .matmul(tape.constant(Array2::ones((4, 1))));
        let grads = tape.backward(total, store.len());
        let numeric = numeric_grad(&a0, 1e-6, |x| (repr(&store, &h, x, &b0) * &w).sum());
        assert!(rel_err(grads.get(pid).unwrap(), &numeric) < 1e-4);
    }

    #[test]
    fn score_cases() {
        let labels = array![[0.0, 1.0], [1.0, 0.0]];
        let s = score(&array![1.0, 0.0], &labels).unwrap();
        assert_eq!(s[0], 0.5);
        assert!((s[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(score(&array![1.0], &labels).is_err());
    }

    #[test]
    fn scaling_moves_scores_away_from_half() {
        let mut rng = SeededRng::new(8);
        for _ in 0..100 {
            let h = Array1::from_shape_fn(5, |_| rng.unit() - 0.5);
            let l = Array2::from_shape_fn((3, 5), |_| rng.unit() - 0.5);
            let c = 1.0 + rng.unit() * 3.0;
            let s1 = score(&h, &l).unwrap();
            let s2 = score(&(&h * c), &l).unwrap();
            for (a, b) in s1.iter().zip(s2.iter()) {
                assert!((b - 0.5).abs() >= (a - 0.5).abs());
            }
        }
    }

    #[test]
    fn decide_cases() {
        assert_eq!(decide(&[0.4, 0.6], 0.5), vec![1]);
        assert!(decide(&[0.5, 0.5], 0.5).is_empty());
        assert_eq!(DEFAULT_THRESHOLD, 0.5);
        assert!(check_threshold(1.0).is_err());
        assert!(check_threshold(0.0).is_err());
    }

    #[test]
    fn decide_is_monotone_in_tau() {
        let mut rng = SeededRng::new(2);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..6).map(|_| rng.unit()).collect();
            let (t1, t2) = {
                let a = rng.unit();
                let b = rng.unit();
                (a.min(b), a.max(b))
            };
            let hi = decide(&scores, t2);
            let lo = decide(&scores, t1);
            assert!(hi.iter().all(|i| lo.contains(i)));
        }
    }
}
