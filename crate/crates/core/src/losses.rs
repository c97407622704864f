//! Training objectives.
//!
//! The default objective is a binary focal loss over every `(pair, label)`
//! cell. The adaptive-threshold variant learns a per-pair threshold logit
//! from a small MLP and trains it with the two-sided softmax loss of the
//! threshold-class formulation.

use ndarray::{Array1, Array2};

use crate::autodiff::{log_sigmoid, sigmoid, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of positive cells; negatives get `1 - alpha_pos`.
    pub alpha_pos: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha_pos: 0.25,
        }
    }
}

impl FocalParams {
    pub fn new(gamma: f64, alpha_pos: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument {
                arg: "gamma",
                reason: format!("{gamma} must be finite and >= 0"),
            });
        }
        if !(alpha_pos > 0.0 && alpha_pos <= 1.0) {
            return Err(Error::InvalidArgument {
                arg: "alpha_pos",
                reason: format!("{alpha_pos} is not in (0, 1]"),
            });
        }
        Ok(Self { gamma, alpha_pos })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for LossReduction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(format!("unknown loss reduction `{other}`")),
        }
    }
}

impl std::fmt::Display for LossReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Focal,
    AdaptiveThreshold,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "focal" => Ok(Self::Focal),
            "adaptive_threshold" => Ok(Self::AdaptiveThreshold),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Focal => "focal",
            LossKind::AdaptiveThreshold => "adaptive_threshold",
        })
    }
}

/// Loss and its derivative for one cell.
fn focal_cell_with_grad(logit: f64, positive: bool, p: FocalParams) -> (f64, f64) {
    let sign = if positive { 1.0 } else { -1.0 };
    let alpha = if positive {
        p.alpha_pos
    } else {
        1.0 - p.alpha_pos
    };
    let z = sign * logit;
    let log_pt = log_sigmoid(z);
    let pt = sigmoid(z);
    let one_minus = sigmoid(-z);
    let modulator = one_minus.powf(p.gamma);
    let loss = -alpha * modulator * log_pt;
    let grad = sign * alpha * (p.gamma * pt * modulator * log_pt - modulator * one_minus);
    (loss, grad)
}

/// `-α_t (1 - p_t)^γ log p_t` for a single cell.
pub fn focal_cell(logit: f64, positive: bool, params: FocalParams) -> f64 {
    focal_cell_with_grad(logit, positive, params).0
}

fn check_targets(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
    if logits.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument {
            arg: "targets",
            reason: "must be 0 or 1".into(),
        });
    }
    Ok(())
}

/// Focal loss over every cell of a `pairs × labels` logit matrix.
pub fn focal_loss<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    targets: &Array2<f64>,
    params: FocalParams,
    reduction: LossReduction,
) -> Result<Var<'t>> {
    let (value, grad) = {
        let z = logits.value();
        check_targets(&z, targets)?;
        let cells = z.len().max(1) as f64;
        let norm = match reduction {
            LossReduction::Mean => 1.0 / cells,
            LossReduction::Sum => 1.0,
        };
        let mut grad = Array2::zeros(z.raw_dim());
        let mut total = 0.0;
        for ((g, &zi), &t) in grad.iter_mut().zip(z.iter()).zip(targets.iter()) {
            let (l, d) = focal_cell_with_grad(zi, t == 1.0, params);
            total += l;
            *g = d * norm;
        }
        (total * norm, grad)
    };
    Ok(tape.scalar_op(value, vec![(logits, grad)]))
}

/// Plain-array focal loss, for callers outside a tape.
pub fn focal_loss_value(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
    params: FocalParams,
    reduction: LossReduction,
) -> Result<f64> {
    let tape = Tape::new();
    let l = focal_loss(
        &tape,
        tape.constant(logits.clone()),
        targets,
        params,
        reduction,
    )?;
    Ok(l.scalar())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Two-sided threshold loss, mean over pairs.
///
/// Positives compete with the threshold in a softmax over
/// `{positives, TH}`; the threshold competes with the negatives in a softmax
/// over `{negatives, TH}`.
pub fn adaptive_threshold_loss<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    th_logits: Var<'t>,
    targets: &Array2<f64>,
) -> Result<Var<'t>> {
    let (value, g_logits, g_th) = {
        let z = logits.value();
        let th = th_logits.value();
        check_targets(&z, targets)?;
        if th.dim() != (z.nrows(), 1) {
            return Err(Error::Shape(format!(
                "threshold logits {:?} for {} pairs",
                th.dim(),
                z.nrows()
            )));
        }
        let pairs = z.nrows().max(1) as f64;
        let mut g_logits = Array2::zeros(z.raw_dim());
        let mut g_th = Array2::zeros(th.raw_dim());
        let mut total = 0.0;
        for r in 0..z.nrows() {
            let t = th[[r, 0]];
            let row = z.row(r);
            let pos: Vec<usize> = (0..row.len()).filter(|&k| targets[[r, k]] == 1.0).collect();
            let neg: Vec<usize> = (0..row.len()).filter(|&k| targets[[r, k]] != 1.0).collect();
            if !pos.is_empty() {
                let lse = log_sum_exp(pos.iter().map(|&k| row[k]).chain(std::iter::once(t)));
                let n_pos = pos.len() as f64;
                for &k in &pos {
                    total -= row[k] - lse;
                    g_logits[[r, k]] += -1.0 + n_pos * (row[k] - lse).exp();
                }
                g_th[[r, 0]] += n_pos * (t - lse).exp();
            }
            let lse = log_sum_exp(neg.iter().map(|&k| row[k]).chain(std::iter::once(t)));
            total -= t - lse;
            g_th[[r, 0]] += -1.0 + (t - lse).exp();
            for &k in &neg {
                g_logits[[r, k]] += (row[k] - lse).exp();
            }
        }
        g_logits /= pairs;
        g_th /= pairs;
        (total / pairs, g_logits, g_th)
    };
    Ok(tape.scalar_op(value, vec![(logits, g_logits), (th_logits, g_th)]))
}

pub fn adaptive_threshold_loss_value(
    logits: &Array2<f64>,
    th_logits: &Array1<f64>,
    targets: &Array2<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let th = th_logits.clone().insert_axis(ndarray::Axis(1));
    let l = adaptive_threshold_loss(
        &tape,
        tape.constant(logits.clone()),
        tape.constant(th),
        targets,
    )?;
    Ok(l.scalar())
}

/// Adaptive-threshold decision: label `k` iff its logit beats the pair's threshold logit.
pub fn adaptive_decide(logits: &[f64], th_logit: f64) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &z)| z > th_logit)
        .map(|(i, _)| i)
        .collect()
}

/// MLP over `[h_r ; mean label embedding]` producing one threshold logit per pair.
#[derive(Clone, Debug)]
pub struct ThresholdHead {
    pub mlp: FeedForward,
}

impl ThresholdHead {
    pub fn new(store: &mut ParamStore, latent: usize, activation: Activation) -> Self {
        Self {
            mlp: FeedForward::new(
                store,
                "heads.threshold",
                (2 * latent, latent, 1),
                activation,
                ParamGroup::Heads,
            ),
        }
    }

    /// `P × 1` threshold logits.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        relations: Var<'t>,
        labels: Var<'t>,
    ) -> Var<'t> {
        let pairs = relations.shape().0;
        let global = labels.mean_rows().select_rows(&vec![0; pairs]);
        self.mlp
            .forward(tape, store, tape.concat_cols(&[relations, global]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{numeric_grad, rel_err};
    use crate::relation::decide;
    use crate::rng::SeededRng;
    use ndarray::array;

    /// Direct, unstabilised oracle for one cell.
    fn naive_cell(logit: f64, positive: bool, p: FocalParams) -> f64 {
        let prob = 1.0 / (1.0 + (-logit).exp());
        let (pt, a) = if positive {
            (prob, p.alpha_pos)
        } else {
            (1.0 - prob, 1.0 - p.alpha_pos)
        };
        -a * (1.0 - pt).powf(p.gamma) * pt.ln()
    }

    #[test]
    fn focal_reduces_to_half_bce_at_gamma_zero() {
        let p = FocalParams::new(0.0, 0.5).unwrap();
        for &z in &[-3.0f64, -0.2, 0.0, 1.7, 4.0] {
            for &t in &[true, false] {
                let prob = 1.0 / (1.0 + (-z).exp());
                let bce = if t { -prob.ln() } else { -(1.0 - prob).ln() };
                assert!((focal_cell(z, t, p) - 0.5 * bce).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focal_worked_example() {
        let p = FocalParams::new(2.0, 0.25).unwrap();
        let v = focal_cell(9f64.ln(), true, p);
        let oracle = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 2.634e-4).abs() < 1e-6);
    }

    #[test]
    fn perfectly_classified_cell_has_zero_loss() {
        let p = FocalParams::default();
        assert!(focal_cell(100.0, true, p) < 1e-40);
        assert!(focal_cell(-100.0, false, p) < 1e-40);
        assert!(focal_cell(-100.0, true, p).is_finite());
        assert!(focal_cell(100.0, false, p).is_finite());
    }

    #[test]
    fn focal_matches_naive_oracle_in_safe_range() {
        let mut rng = SeededRng::new(10);
        for _ in 0..500 {
            let z = rng.unit() * 20.0 - 10.0;
            let t = rng.below(2) == 1;
            let p = FocalParams::new(rng.unit() * 4.0, 0.05 + rng.unit() * 0.95).unwrap();
            let a = focal_cell(z, t, p);
            let b = naive_cell(z, t, p);
            assert!(a >= 0.0);
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gamma_downweights_easy_cells() {
        let mut rng = SeededRng::new(11);
        for _ in 0..500 {
            let z = rng.unit() * 10.0;
            let t = rng.below(2) == 1;
            let z = if t { z } else { -z };
            let base = focal_cell(z, t, FocalParams::new(0.0, 0.25).unwrap());
            let focused = focal_cell(z, t, FocalParams::new(rng.unit() * 5.0, 0.25).unwrap());
            assert!(focused <= base);
        }
    }

    #[test]
    fn focal_errors() {
        let tape = Tape::new();
        let l = tape.constant(array![[f64::NAN]]);
        assert!(matches!(
            focal_loss(
                &tape,
                l,
                &array![[1.0]],
                FocalParams::default(),
                LossReduction::Mean
            ),
            Err(Error::NonFinite(_))
        ));
        let l = tape.constant(array![[0.0, 1.0]]);
        assert!(focal_loss(
            &tape,
            l,
            &array![[1.0]],
            FocalParams::default(),
            LossReduction::Mean
        )
        .is_err());
        assert!(FocalParams::new(-1.0, 0.5).is_err());
        assert!(FocalParams::new(1.0, 0.0).is_err());
    }

    #[test]
    fn focal_sum_and_mean_reductions() {
        let logits = array![[0.3, -2.0], [1.5, 0.0]];
        let targets = array![[1.0, 0.0], [0.0, 1.0]];
        let p = FocalParams::default();
        let sum = focal_loss_value(&logits, &targets, p, LossReduction::Sum).unwrap();
        let mean = focal_loss_value(&logits, &targets, p, LossReduction::Mean).unwrap();
        assert!((sum - 4.0 * mean).abs() < 1e-12);
        let direct: f64 = [(0.3, true), (-2.0, false), (1.5, false), (0.0, true)]
            .iter()
            .map(|&(z, t)| naive_cell(z, t, p))
            .sum();
        assert!((sum - direct).abs() < 1e-12);
        let huge = focal_loss_value(
            &array![[100.0, -100.0]],
            &array![[0.0, 1.0]],
            p,
            LossReduction::Mean,
        )
        .unwrap();
        assert!(huge.is_finite());
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(12);
        for trial in 0..20 {
            let logits = Array2::from_shape_fn((3, 4), |_| rng.unit() * 8.0 - 4.0);
            let targets = Array2::from_shape_fn((3, 4), |_| rng.below(2) as f64);
            let p = FocalParams::new(rng.unit() * 3.0, 0.1 + rng.unit() * 0.9).unwrap();
            let reduction = if trial % 2 == 0 {
                LossReduction::Mean
            } else {
                LossReduction::Sum
            };
            let tape = Tape::new();
            let mut s = ParamStore::new(0);
            let pid = s.add("z", logits.clone(), ParamGroup::Heads, false);
            let loss = focal_loss(&tape, tape.param(&s, pid), &targets, p, reduction).unwrap();
            let g = tape.backward(loss, 1);
            let n = numeric_grad(&logits, 1e-6, |x| {
                focal_loss_value(x, &targets, p, reduction).unwrap()
            });
            assert!(rel_err(g.get(pid).unwrap(), &n) < 1e-4);
        }
    }

    /// Softmax cross-entropy terms written out by hand.
    fn threshold_oracle(logits: &[f64], th: f64, pos: &[bool]) -> f64 {
        let mut loss = 0.0;
        let pos_den: f64 = logits
            .iter()
            .zip(pos)
            .filter(|(_, &p)| p)
            .map(|(z, _)| z.exp())
            .sum::<f64>()
            + th.exp();
        for (z, _) in logits.iter().zip(pos).filter(|(_, &p)| p) {
            loss -= (z.exp() / pos_den).ln();
        }
        let neg_den: f64 = logits
            .iter()
            .zip(pos)
            .filter(|(_, &p)| !p)
            .map(|(z, _)| z.exp())
            .sum::<f64>()
            + th.exp();
        loss -= (th.exp() / neg_den).ln();
        loss
    }

    #[test]
    fn threshold_loss_worked_example() {
        let logits = array![[2.0, -1.0]];
        let targets = array![[1.0, 0.0]];
        let v = adaptive_threshold_loss_value(&logits, &array![0.0], &targets).unwrap();
        let oracle = threshold_oracle(&[2.0, -1.0], 0.0, &[true, false]);
        assert!((v - oracle).abs() < 1e-12);
        let by_hand = -(2f64.exp() / (2f64.exp() + 1.0)).ln() - (1.0 / (1.0 + (-1f64).exp())).ln();
        assert!((v - by_hand).abs() < 1e-12);
    }

    #[test]
    fn threshold_loss_edge_cases() {
        // No positives: only the negative-side term.
        let v =
            adaptive_threshold_loss_value(&array![[0.5, -0.3]], &array![0.2], &array![[0.0, 0.0]])
                .unwrap();
        let expected = -(0.2f64.exp() / (0.2f64.exp() + 0.5f64.exp() + (-0.3f64).exp())).ln();
        assert!((v - expected).abs() < 1e-12);
        // Separated: positive far above, negatives far below.
        let v = adaptive_threshold_loss_value(
            &array![[60.0, -60.0, -70.0]],
            &array![0.0],
            &array![[1.0, 0.0, 0.0]],
        )
        .unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn threshold_loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(13);
        for _ in 0..20 {
            let logits = Array2::from_shape_fn((4, 3), |_| rng.unit() * 6.0 - 3.0);
            let th = Array1::from_shape_fn(4, |_| rng.unit() * 2.0 - 1.0);
            let targets = Array2::from_shape_fn((4, 3), |_| rng.below(2) as f64);
            let mut s = ParamStore::new(0);
            let zp = s.add("z", logits.clone(), ParamGroup::Heads, false);
            let tp = s.add(
                "t",
                th.clone().insert_axis(ndarray::Axis(1)),
                ParamGroup::Heads,
                false,
            );
            let tape = Tape::new();
            let loss =
                adaptive_threshold_loss(&tape, tape.param(&s, zp), tape.param(&s, tp), &targets)
                    .unwrap();
            let g = tape.backward(loss, 2);
            let nz = numeric_grad(&logits, 1e-6, |x| {
                adaptive_threshold_loss_value(x, &th, &targets).unwrap()
            });
            let th2 = th.clone().insert_axis(ndarray::Axis(1));
            let nt = numeric_grad(&th2, 1e-6, |x| {
                adaptive_threshold_loss_value(&logits, &x.column(0).to_owned(), &targets).unwrap()
            });
            assert!(rel_err(g.get(zp).unwrap(), &nz) < 1e-4);
            assert!(rel_err(g.get(tp).unwrap(), &nt) < 1e-4);
        }
    }

    #[test]
    fn pinned_threshold_reproduces_fixed_decisions() {
        let mut rng = SeededRng::new(14);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..5).map(|_| rng.unit()).collect();
            let logits: Vec<f64> = scores.iter().map(|s| (s / (1.0 - s)).ln()).collect();
            assert_eq!(adaptive_decide(&logits, 0.0), decide(&scores, 0.5));
        }
    }
}
