//! The triplet-loss family: the plain margin hinge, its hard-mined
//! batch mean, and the weighted-average variant whose per-row weights
//! emphasize batch outliers. Weights are computed from the current
//! distances and enter the graph as constants — no gradient flows
//! through them.

use crate::error::{Error, Result};
use crate::mining::MinedTriplets;
use crate::tensor::{Graph, Scalar, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// All weights exactly 1; reduces the weighted loss to the plain
    /// hard-mined form.
    Unit,
    /// One sigmoid of the batch-mean distance per side, shared by all
    /// rows.
    BatchSigmoid,
    /// Per-row `sigmoid(d_i - mean) + 0.5`: rows above the batch mean
    /// weigh more than 1, rows at the mean exactly 1.
    Relative,
}

impl WeightMode {
    pub fn name(self) -> &'static str {
        match self {
            WeightMode::Unit => "unit",
            WeightMode::BatchSigmoid => "batch-sigmoid",
            WeightMode::Relative => "relative",
        }
    }

    pub fn parse(text: &str) -> Option<WeightMode> {
        match text {
            "unit" => Some(WeightMode::Unit),
            "batch-sigmoid" => Some(WeightMode::BatchSigmoid),
            "relative" => Some(WeightMode::Relative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 1.0, weight_mode: WeightMode::BatchSigmoid }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights<S: Scalar> {
    pub w_p: Vec<S>,
    pub w_n: Vec<S>,
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `max(m + d(a,p) - d(a,n), 0)`.
pub fn triplet_margin_loss<S: Scalar>(d_ap: S, d_an: S, margin: S) -> Result<S> {
    if d_ap < S::zero() || d_an < S::zero() {
        return Err(Error::NegativeDistance(d_ap.min(d_an).to_f64()));
    }
    Ok((margin + d_ap - d_an).max(S::zero()))
}

/// Per-row weights for the weighted-average loss.
pub fn batch_weights<S: Scalar>(
    d_pos: &[S],
    d_neg: &[S],
    cfg: &LossConfig,
) -> Result<BatchWeights<S>> {
    if d_pos.is_empty() || d_pos.len() != d_neg.len() {
        return Err(Error::EmptyBatch("batch_weights"));
    }
    let n = d_pos.len();
    let count = S::from_f64(n as f64);
    match cfg.weight_mode {
        WeightMode::Unit => Ok(BatchWeights { w_p: vec![S::one(); n], w_n: vec![S::one(); n] }),
        WeightMode::BatchSigmoid => {
            let wp = sigmoid(d_pos.iter().copied().sum::<S>() / count);
            let wn = sigmoid(d_neg.iter().copied().sum::<S>() / count);
            Ok(BatchWeights { w_p: vec![wp; n], w_n: vec![wn; n] })
        }
        WeightMode::Relative => {
            let half = S::from_f64(0.5);
            let mean_p = d_pos.iter().copied().sum::<S>() / count;
            let mean_n = d_neg.iter().copied().sum::<S>() / count;
            Ok(BatchWeights {
                w_p: d_pos.iter().map(|&d| sigmoid(d - mean_p) + half).collect(),
                w_n: d_neg.iter().map(|&d| sigmoid(d - mean_n) + half).collect(),
            })
        }
    }
}

/// Batch mean of `max(m + w_p d_M - w_n d_m, 0)` with explicit weights.
pub fn weighted_hinge_mean<S: Scalar>(
    d_pos: &[S],
    d_neg: &[S],
    weights: &BatchWeights<S>,
    margin: S,
) -> S {
    let mut acc = S::zero();
    for i in 0..d_pos.len() {
        let term = margin + weights.w_p[i] * d_pos[i] - weights.w_n[i] * d_neg[i];
        acc = acc + term.max(S::zero());
    }
    acc / S::from_f64(d_pos.len() as f64)
}

/// Mean hinge over the mined farthest-positive / closest-negative
/// distances.
pub fn hard_positive_triplet_loss<S: Scalar>(triplets: &MinedTriplets<S>, margin: f64) -> Result<S> {
    hard_positive_loss_from_distances(&triplets.d_pos_values, &triplets.d_neg_values, margin)
}

pub fn hard_positive_loss_from_distances<S: Scalar>(
    d_pos: &[S],
    d_neg: &[S],
    margin: f64,
) -> Result<S> {
    if d_pos.is_empty() || d_pos.len() != d_neg.len() {
        return Err(Error::EmptyBatch("hard_positive_triplet_loss"));
    }
    let m = S::from_f64(margin);
    let mut acc = S::zero();
    for i in 0..d_pos.len() {
        acc = acc + (m + d_pos[i] - d_neg[i]).max(S::zero());
    }
    Ok(acc / S::from_f64(d_pos.len() as f64))
}

/// Weighted-average loss over mined triplets; weights per `cfg`.
pub fn roi_loss<S: Scalar>(triplets: &MinedTriplets<S>, cfg: &LossConfig) -> Result<S> {
    roi_loss_from_distances(&triplets.d_pos_values, &triplets.d_neg_values, cfg)
}

pub fn roi_loss_from_distances<S: Scalar>(d_pos: &[S], d_neg: &[S], cfg: &LossConfig) -> Result<S> {
    let weights = batch_weights(d_pos, d_neg, cfg)?;
    Ok(weighted_hinge_mean(d_pos, d_neg, &weights, S::from_f64(cfg.margin)))
}

// ── graph-recorded variants (training path) ─────────────────────────

/// Records the hard-mined hinge mean on the graph.
pub fn hard_positive_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    triplets: &MinedTriplets<S>,
    margin: f64,
) -> Result<ValueId> {
    let diff = g.sub(triplets.d_pos_node, triplets.d_neg_node)?;
    let shifted = g.add_scalar(diff, S::from_f64(margin));
    let hinge = g.relu(shifted);
    g.mean_all(hinge)
}

/// Records the weighted loss on the graph. The weights are computed
/// from the current selected distances and inserted as constant leaves,
/// so backward treats them as frozen.
pub fn roi_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    triplets: &MinedTriplets<S>,
    cfg: &LossConfig,
) -> Result<ValueId> {
    let d_pos = g.values(triplets.d_pos_node).to_vec();
    let d_neg = g.values(triplets.d_neg_node).to_vec();
    let weights = batch_weights(&d_pos, &d_neg, cfg)?;
    let n = d_pos.len();
    let wp = g.constant(vec![n], weights.w_p)?;
    let wn = g.constant(vec![n], weights.w_n)?;
    let pos_term = g.mul(wp, triplets.d_pos_node)?;
    let neg_term = g.mul(wn, triplets.d_neg_node)?;
    let diff = g.sub(pos_term, neg_term)?;
    let shifted = g.add_scalar(diff, S::from_f64(cfg.margin));
    let hinge = g.relu(shifted);
    g.mean_all(hinge)
}
