//! In-batch triplet mining: for every anchor pick its farthest positive
//! and, among the other rows' anchors and chosen positives, the closest
//! non-matching descriptor. Mining is purely selective — it reads
//! descriptor values and produces indices; the selected distances are
//! then gathered as graph nodes so gradients flow only through them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{CorrespondenceStore, Patch};
use crate::error::{Error, Result};
use crate::net::{preprocess_patches, DescriptorBatch, Network};
use crate::tensor::{Graph, Scalar, ValueId};

/// Epsilon inside the square root of in-graph distances, keeping them
/// differentiable at zero.
pub const DIST_EPS: f64 = 1e-8;

/// N anchors with M sampled positives each, all rows from distinct
/// tracks.
#[derive(Debug, Clone)]
pub struct CorrespondenceBatch {
    track_ids: Vec<u64>,
    anchors: Vec<Patch>,
    /// Row-major `N × M`: positive j of anchor i at `i * m + j`.
    positives: Vec<Patch>,
    m: usize,
}

impl CorrespondenceBatch {
    pub fn new(track_ids: Vec<u64>, anchors: Vec<Patch>, positives: Vec<Patch>, m: usize) -> Result<Self> {
        let n = anchors.len();
        if n < 2 {
            return Err(Error::BatchTooSmall { need: 2, got: n });
        }
        if m < 1 || track_ids.len() != n || positives.len() != n * m {
            return Err(Error::InvalidParams(format!(
                "batch with {} anchors needs {} track ids and n*m positives, got {} and {}",
                n,
                n,
                track_ids.len(),
                positives.len()
            )));
        }
        check_unique(&track_ids)?;
        Ok(CorrespondenceBatch { track_ids, anchors, positives, m })
    }

    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn track_ids(&self) -> &[u64] {
        &self.track_ids
    }

    pub fn anchors(&self) -> &[Patch] {
        &self.anchors
    }

    pub fn positive(&self, i: usize, j: usize) -> &Patch {
        &self.positives[i * self.m + j]
    }

    /// Anchors then positives, the order the network consumes.
    pub fn stacked_patches(&self) -> Vec<Patch> {
        let mut all = Vec::with_capacity(self.n() * (self.m + 1));
        all.extend(self.anchors.iter().cloned());
        all.extend(self.positives.iter().cloned());
        all
    }
}

fn check_unique(track_ids: &[u64]) -> Result<()> {
    let mut sorted = track_ids.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateTrackIds(w[0]));
        }
    }
    Ok(())
}

/// Dense L2 distance table between two descriptor batches.
#[derive(Debug, Clone)]
pub struct DistanceMatrix<S: Scalar> {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<S>,
}

impl<S: Scalar> DistanceMatrix<S> {
    pub fn new(rows: usize, cols: usize, entries: Vec<S>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "DistanceMatrix::new".into(),
                detail: format!("{}x{} needs {} entries, got {}", rows, cols, rows * cols, entries.len()),
            });
        }
        Ok(DistanceMatrix { rows, cols, entries })
    }

    pub fn entry(&self, i: usize, j: usize) -> S {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }
}

/// Euclidean distances between all row pairs.
pub fn pairwise_distances<S: Scalar>(
    left: &DescriptorBatch<S>,
    right: &DescriptorBatch<S>,
) -> Result<DistanceMatrix<S>> {
    if left.dim() != right.dim() {
        return Err(Error::DimMismatch { left: left.dim(), right: right.dim() });
    }
    let (n, m, d) = (left.count(), right.count(), left.dim());
    let mut entries = Vec::with_capacity(n * m);
    for i in 0..n {
        let li = left.row(i);
        for j in 0..m {
            let rj = right.row(j);
            let mut acc = S::zero();
            for k in 0..d {
                let diff = li[k] - rj[k];
                acc = acc + diff * diff;
            }
            entries.push(acc.sqrt());
        }
    }
    Ok(DistanceMatrix { rows: n, cols: m, entries })
}

/// Farthest positive per row; ties go to the lowest column.
pub fn mine_hard_positive<S: Scalar>(d_pos: &DistanceMatrix<S>) -> Result<Vec<usize>> {
    if d_pos.cols == 0 {
        return Err(Error::EmptyRow { row: 0 });
    }
    let mut out = Vec::with_capacity(d_pos.rows);
    for i in 0..d_pos.rows {
        let row = d_pos.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// The negative is row `index`'s chosen positive, paired with this
    /// row's anchor.
    OtherRowPositive,
    /// The negative is row `index`'s anchor, paired with this row's
    /// chosen positive.
    OtherRowAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedNegative<S: Scalar> {
    pub index: usize,
    pub source: NegativeSource,
    pub distance: S,
}

/// Closest non-matching candidate per row, over other rows' chosen
/// positives (vs this anchor) and other rows' anchors (vs this row's
/// chosen positive). Ties: lowest row index, then the positive side.
pub fn mine_hard_negative<S: Scalar>(
    anchors: &DescriptorBatch<S>,
    chosen_pos: &DescriptorBatch<S>,
    track_ids: &[u64],
) -> Result<Vec<MinedNegative<S>>> {
    let n = anchors.count();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    if chosen_pos.count() != n || track_ids.len() != n {
        return Err(Error::InvalidParams(format!(
            "aligned batches required: {} anchors, {} positives, {} track ids",
            n,
            chosen_pos.count(),
            track_ids.len()
        )));
    }
    check_unique(track_ids)?;
    // d[i][k] = distance(anchor_i, chosen_pos_k); both candidate sides
    // live in this one matrix.
    let d = pairwise_distances(anchors, chosen_pos)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<MinedNegative<S>> = None;
        for k in 0..n {
            if track_ids[k] == track_ids[i] {
                continue;
            }
            for (source, dist) in [
                (NegativeSource::OtherRowPositive, d.entry(i, k)),
                (NegativeSource::OtherRowAnchor, d.entry(k, i)),
            ] {
                if best.map_or(true, |b| dist < b.distance) {
                    best = Some(MinedNegative { index: k, source, distance: dist });
                }
            }
        }
        out.push(best.expect("n >= 2 with unique track ids leaves at least one candidate"));
    }
    Ok(out)
}

/// Mined triplets with both the numeric distances (used for weights and
/// reporting) and graph handles to the selected distances (used for the
/// differentiable loss).
#[derive(Debug)]
pub struct MinedTriplets<S: Scalar> {
    pub n: usize,
    pub m: usize,
    pub hard_pos: Vec<usize>,
    pub negatives: Vec<MinedNegative<S>>,
    /// d_M(a_i, p_i): farthest-positive distance per row.
    pub d_pos_values: Vec<S>,
    /// d_m(a_i, n_i): closest-negative distance per row.
    pub d_neg_values: Vec<S>,
    /// `[N]` graph vector of the selected positive distances.
    pub d_pos_node: ValueId,
    /// `[N]` graph vector of the selected negative distances.
    pub d_neg_node: ValueId,
    /// `[N, dim]` anchor descriptors.
    pub anchors_node: ValueId,
    /// `[N*M, dim]` positive descriptors.
    pub positives_node: ValueId,
}

/// Mining over descriptor nodes already present in a graph: selects the
/// triplet indices from the numeric values, then gathers the selected
/// squared distances and takes `sqrt(· + 1e-8)`.
pub fn mine_triplets_in_graph<S: Scalar>(
    g: &mut Graph<S>,
    anchors_node: ValueId,
    positives_node: ValueId,
    track_ids: &[u64],
    m: usize,
) -> Result<MinedTriplets<S>> {
    mine_triplets_in_graph_with(g, anchors_node, positives_node, track_ids, m, None)
}

/// Like [`mine_triplets_in_graph`], but with the positive selection
/// overridden (the random-positive control); negatives are still mined
/// on the overridden choices.
pub fn mine_triplets_in_graph_with<S: Scalar>(
    g: &mut Graph<S>,
    anchors_node: ValueId,
    positives_node: ValueId,
    track_ids: &[u64],
    m: usize,
    positive_override: Option<Vec<usize>>,
) -> Result<MinedTriplets<S>> {
    let n = track_ids.len();
    let dim = g.shape(anchors_node)[1];
    let anchors = DescriptorBatch::new(dim, g.values(anchors_node).to_vec())?;
    let positives = DescriptorBatch::new(dim, g.values(positives_node).to_vec())?;
    if positives.count() != n * m {
        return Err(Error::InvalidParams(format!(
            "expected {} positives, got {}",
            n * m,
            positives.count()
        )));
    }

    // Hard positives from the N x M own-positive distance table.
    let mut own = Vec::with_capacity(n * m);
    for i in 0..n {
        let full = pairwise_distances(&anchors.select(&[i]), &positives.select(&own_range(i, m)))?;
        own.extend(full.row(0).iter().copied());
    }
    let d_pos_matrix = DistanceMatrix { rows: n, cols: m, entries: own };
    let hard_pos = match positive_override {
        None => mine_hard_positive(&d_pos_matrix)?,
        Some(chosen) => {
            if chosen.len() != n || chosen.iter().any(|&j| j >= m) {
                return Err(Error::InvalidParams(format!(
                    "positive override needs {} indices below {}",
                    n, m
                )));
            }
            chosen
        }
    };

    let chosen_indices: Vec<usize> = hard_pos.iter().enumerate().map(|(i, &j)| i * m + j).collect();
    let chosen = positives.select(&chosen_indices);
    let negatives = mine_hard_negative(&anchors, &chosen, track_ids)?;

    let d_pos_values: Vec<S> =
        hard_pos.iter().enumerate().map(|(i, &j)| d_pos_matrix.entry(i, j)).collect();
    let d_neg_values: Vec<S> = negatives.iter().map(|neg| neg.distance).collect();

    // Gather the selected entries out of the full squared-distance
    // matrix so only they receive gradient.
    let sq = g.pairwise_sqdist(anchors_node, positives_node)?;
    let pos_coords: Vec<(usize, usize)> = (0..n).map(|i| (i, i * m + hard_pos[i])).collect();
    let neg_coords: Vec<(usize, usize)> = negatives
        .iter()
        .enumerate()
        .map(|(i, neg)| match neg.source {
            NegativeSource::OtherRowPositive => (i, neg.index * m + hard_pos[neg.index]),
            NegativeSource::OtherRowAnchor => (neg.index, i * m + hard_pos[i]),
        })
        .collect();
    let eps = S::from_f64(DIST_EPS);
    let pos_sq = g.gather2d(sq, pos_coords)?;
    let d_pos_node = g.sqrt_eps(pos_sq, eps)?;
    let neg_sq = g.gather2d(sq, neg_coords)?;
    let d_neg_node = g.sqrt_eps(neg_sq, eps)?;

    Ok(MinedTriplets {
        n,
        m,
        hard_pos,
        negatives,
        d_pos_values,
        d_neg_values,
        d_pos_node,
        d_neg_node,
        anchors_node,
        positives_node,
    })
}

fn own_range(i: usize, m: usize) -> Vec<usize> {
    (i * m..(i + 1) * m).collect()
}

/// Forwards all `N × (M + 1)` patches through the network in one batch
/// and mines triplets on the resulting descriptors.
pub fn form_triplets<S: Scalar>(
    g: &mut Graph<S>,
    net: &Network<S>,
    param_ids: &[ValueId],
    batch: &CorrespondenceBatch,
    train_mode: bool,
) -> Result<(MinedTriplets<S>, crate::net::ForwardHandles)> {
    form_triplets_with(g, net, param_ids, batch, train_mode, None)
}

/// [`form_triplets`] with an optional positive-selection override.
pub fn form_triplets_with<S: Scalar>(
    g: &mut Graph<S>,
    net: &Network<S>,
    param_ids: &[ValueId],
    batch: &CorrespondenceBatch,
    train_mode: bool,
    positive_override: Option<Vec<usize>>,
) -> Result<(MinedTriplets<S>, crate::net::ForwardHandles)> {
    let stacked = batch.stacked_patches();
    let input = preprocess_patches::<S>(&stacked, net.config.input_side)?;
    let x = g.leaf(&input);
    let handles = net.forward(g, x, param_ids, train_mode)?;
    let n = batch.n();
    let m = batch.m();
    let anchors_node = g.slice_rows(handles.descriptors, 0, n)?;
    let positives_node = g.slice_rows(handles.descriptors, n, n * m)?;
    let triplets = mine_triplets_in_graph_with(
        g,
        anchors_node,
        positives_node,
        batch.track_ids(),
        m,
        positive_override,
    )?;
    Ok((triplets, handles))
}

/// Draws one training batch: an anchor and M positives per track, chosen
/// uniformly without replacement (with replacement only when a track has
/// fewer than M+1 members).
pub fn sample_batch<R: Rng>(
    store: &CorrespondenceStore,
    track_indices: &[usize],
    m: usize,
    rng: &mut R,
) -> Result<CorrespondenceBatch> {
    let mut track_ids = Vec::with_capacity(track_indices.len());
    let mut anchors = Vec::with_capacity(track_indices.len());
    let mut positives = Vec::with_capacity(track_indices.len() * m);
    for &ti in track_indices {
        let track = &store.tracks[ti];
        let len = track.members.len();
        let anchor_idx = rng.gen_range(0..len);
        let mut others: Vec<usize> = (0..len).filter(|&i| i != anchor_idx).collect();
        if others.len() >= m {
            others.shuffle(rng);
            others.truncate(m);
        } else {
            let pool = others.clone();
            others = (0..m).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        }
        track_ids.push(track.track_id);
        anchors.push(track.members[anchor_idx].patch.clone());
        positives.extend(others.iter().map(|&i| track.members[i].patch.clone()));
    }
    CorrespondenceBatch::new(track_ids, anchors, positives, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_store, SynthMode};
    use crate::net::NetConfig;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_batch(dim: usize, rows: Vec<f64>) -> DescriptorBatch<f64> {
        DescriptorBatch::new(dim, rows).unwrap()
    }

    #[test]
    fn self_distance_is_zero() {
        let a = unit_batch(2, vec![1.0, 0.0]);
        let d = pairwise_distances(&a, &a).unwrap();
        assert_eq!(d.entry(0, 0), 0.0);
    }

    #[test]
    fn orthonormal_rows_are_sqrt_two_apart() {
        let a = unit_batch(2, vec![1.0, 0.0]);
        let b = unit_batch(2, vec![0.0, 1.0]);
        let d = pairwise_distances(&a, &b).unwrap();
        assert!((d.entry(0, 0) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 3;
        let mk = |rng: &mut ChaCha8Rng, count: usize| {
            let mut rows = Vec::new();
            for _ in 0..count {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                rows.extend(v.iter().map(|x| x / norm));
            }
            unit_batch(dim, rows)
        };
        let a = mk(&mut rng, 5);
        let b = mk(&mut rng, 7);
        let d = pairwise_distances(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let expect = a
                    .row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.entry(i, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let a = unit_batch(2, vec![1.0, 0.0]);
        let b = unit_batch(3, vec![1.0, 0.0, 0.0]);
        assert!(matches!(pairwise_distances(&a, &b), Err(Error::DimMismatch { left: 2, right: 3 })));
    }

    #[test]
    fn hard_positive_picks_argmax_and_breaks_ties_low() {
        let d = DistanceMatrix::new(3, 3, vec![0.2, 0.9, 0.4, 0.5, 0.5, 0.5, 0.1, 0.1, 0.7]).unwrap();
        assert_eq!(mine_hard_positive(&d).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn hard_positive_single_candidate() {
        let d = DistanceMatrix::new(2, 1, vec![0.3, 0.8]).unwrap();
        assert_eq!(mine_hard_positive(&d).unwrap(), vec![0, 0]);
    }

    #[test]
    fn hard_negative_tie_break_prefers_other_row_positive() {
        // a1 = p1 = e1, a2 = p2 = e2: both candidates for row 0 sit at
        // sqrt(2); the tie goes to row 1's positive.
        let anchors = unit_batch(2, vec![1.0, 0.0, 0.0, 1.0]);
        let chosen = anchors.clone();
        let mined = mine_hard_negative(&anchors, &chosen, &[10, 20]).unwrap();
        assert_eq!(mined[0].index, 1);
        assert_eq!(mined[0].source, NegativeSource::OtherRowPositive);
        assert!((mined[0].distance - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hard_negative_finds_near_duplicate() {
        // Row 1's positive nearly coincides with row 0's anchor.
        let anchors = unit_batch(2, vec![1.0, 0.0, 0.0, 1.0]);
        let eps = 1e-3f64;
        let near = [1.0f64 - eps * eps / 2.0, eps];
        let norm = (near[0] * near[0] + near[1] * near[1]).sqrt();
        let chosen = unit_batch(2, vec![1.0, 0.0, near[0] / norm, near[1] / norm]);
        let mined = mine_hard_negative(&anchors, &chosen, &[1, 2]).unwrap();
        assert_eq!(mined[0].index, 1);
        assert_eq!(mined[0].source, NegativeSource::OtherRowPositive);
        assert!(mined[0].distance < 2.0 * eps);
    }

    #[test]
    fn hard_negative_rejects_duplicate_track_ids() {
        let anchors = unit_batch(2, vec![1.0, 0.0, 0.0, 1.0]);
        let chosen = anchors.clone();
        assert!(matches!(
            mine_hard_negative(&anchors, &chosen, &[5, 5]),
            Err(Error::DuplicateTrackIds(5))
        ));
    }

    #[test]
    fn hard_negative_matches_brute_force_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = 6;
            let dim = 4;
            let mk = |rng: &mut ChaCha8Rng| {
                let mut rows = Vec::new();
                for _ in 0..n {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                    rows.extend(v.iter().map(|x| x / norm));
                }
                unit_batch(dim, rows)
            };
            let anchors = mk(&mut rng);
            let chosen = mk(&mut rng);
            let ids: Vec<u64> = (0..n as u64).collect();
            let mined = mine_hard_negative(&anchors, &chosen, &ids).unwrap();
            for i in 0..n {
                // Exhaustive scan over the full candidate set.
                let mut best = f64::INFINITY;
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    let d1: f64 = anchors
                        .row(i)
                        .iter()
                        .zip(chosen.row(k))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    let d2: f64 = anchors
                        .row(k)
                        .iter()
                        .zip(chosen.row(i))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(d1).min(d2);
                }
                assert_eq!(mined[i].distance, best, "row {}", i);
            }
        }
    }

    fn toy_net(seed: u64) -> Network<f64> {
        Network::<f64>::init(NetConfig::toy(seed).with_descriptor_dim(8)).unwrap()
    }

    fn store_batch(n: usize, m: usize, seed: u64) -> CorrespondenceBatch {
        let store = synth_store(seed, n, m + 1, SynthMode::Both).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let idx: Vec<usize> = (0..n).collect();
        sample_batch(&store, &idx, m, &mut rng).unwrap()
    }

    #[test]
    fn form_triplets_matches_hand_run_of_both_miners() {
        let net = toy_net(3);
        let batch = store_batch(2, 1, 21);
        let mut g = Graph::new();
        let params = net.insert_params(&mut g, false);
        let (triplets, _) = form_triplets(&mut g, &net, &params, &batch, false).unwrap();

        // Hand-run: describe the same patches, then apply the two miners.
        let anchors = net.describe_eval(batch.anchors()).unwrap();
        let positives =
            net.describe_eval(&[batch.positive(0, 0).clone(), batch.positive(1, 0).clone()]).unwrap();
        let d_pos = pairwise_distances(&anchors, &positives).unwrap();
        let own = DistanceMatrix::new(2, 1, vec![d_pos.entry(0, 0), d_pos.entry(1, 1)]).unwrap();
        let hand_pos = mine_hard_positive(&own).unwrap();
        let hand_neg = mine_hard_negative(&anchors, &positives, batch.track_ids()).unwrap();
        assert_eq!(triplets.hard_pos, hand_pos);
        for (a, b) in triplets.negatives.iter().zip(&hand_neg) {
            assert_eq!((a.index, a.source), (b.index, b.source));
            assert!((a.distance - b.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_anchor_and_positives_have_zero_hard_positive_distance() {
        let store = synth_store(8, 3, 2, SynthMode::Illumination).unwrap();
        // Use the anchor patch itself as every positive.
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        let mut ids = Vec::new();
        for t in &store.tracks {
            anchors.push(t.members[0].patch.clone());
            positives.push(t.members[0].patch.clone());
            positives.push(t.members[0].patch.clone());
            ids.push(t.track_id);
        }
        let batch = CorrespondenceBatch::new(ids, anchors, positives, 2).unwrap();
        let net = toy_net(5);
        let mut g = Graph::new();
        let params = net.insert_params(&mut g, false);
        let (triplets, _) = form_triplets(&mut g, &net, &params, &batch, false).unwrap();
        for &d in &triplets.d_pos_values {
            assert_eq!(d, 0.0);
        }
        // The graph-side value sits at the sqrt(eps) floor.
        for &d in g.values(triplets.d_pos_node) {
            assert!(d <= DIST_EPS.sqrt() * 1.01);
        }
    }

    #[test]
    fn permuting_positives_selects_the_same_patch() {
        let net = toy_net(9);
        let store = synth_store(31, 4, 5, SynthMode::Both).unwrap();
        let ids: Vec<u64> = store.tracks.iter().map(|t| t.track_id).collect();
        let anchors: Vec<Patch> = store.tracks.iter().map(|t| t.members[0].patch.clone()).collect();
        let positives: Vec<Patch> = store
            .tracks
            .iter()
            .flat_map(|t| {
                vec![t.members[1].patch.clone(), t.members[2].patch.clone(), t.members[3].patch.clone()]
            })
            .collect();
        let batch = CorrespondenceBatch::new(ids.clone(), anchors.clone(), positives, 3).unwrap();

        let permuted: Vec<Patch> = store
            .tracks
            .iter()
            .flat_map(|t| {
                vec![t.members[3].patch.clone(), t.members[1].patch.clone(), t.members[2].patch.clone()]
            })
            .collect();
        let batch_p = CorrespondenceBatch::new(ids, anchors, permuted, 3).unwrap();

        let mut g1 = Graph::new();
        let p1 = net.insert_params(&mut g1, false);
        let (t1, _) = form_triplets(&mut g1, &net, &p1, &batch, false).unwrap();
        let mut g2 = Graph::new();
        let p2 = net.insert_params(&mut g2, false);
        let (t2, _) = form_triplets(&mut g2, &net, &p2, &batch_p, false).unwrap();

        // Old positive j maps to new slot: member order [1,2,3] -> [3,1,2].
        for i in 0..4 {
            let old_j = t1.hard_pos[i];
            let expect_new = match old_j {
                0 => 1,
                1 => 2,
                2 => 0,
                _ => unreachable!(),
            };
            assert_eq!(t2.hard_pos[i], expect_new, "row {}", i);
            assert!((t1.d_pos_values[i] - t2.d_pos_values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mining_never_alters_descriptor_values() {
        let net = toy_net(13);
        let batch = store_batch(4, 2, 17);
        let mut g = Graph::new();
        let params = net.insert_params(&mut g, false);
        let stacked = batch.stacked_patches();
        let input = preprocess_patches::<f64>(&stacked, net.config.input_side).unwrap();
        let x = g.leaf(&input);
        let handles = net.forward(&mut g, x, &params, false).unwrap();
        let before = g.values(handles.descriptors).to_vec();
        let anchors_node = g.slice_rows(handles.descriptors, 0, 4).unwrap();
        let positives_node = g.slice_rows(handles.descriptors, 4, 8).unwrap();
        mine_triplets_in_graph(&mut g, anchors_node, positives_node, batch.track_ids(), 2).unwrap();
        assert_eq!(g.values(handles.descriptors), before.as_slice());
    }

    #[test]
    fn unselected_positives_get_zero_gradient_through_positive_term() {
        // Direct descriptor leaves: each row has two positives, only the
        // farther one may receive gradient from the positive distances.
        let mut g = Graph::<f64>::new();
        let anchors = crate::tensor::Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = 0.5f64.sqrt();
        let positives =
            crate::tensor::Tensor::new(vec![4, 2], vec![1.0, 0.0, s, s, 0.0, 1.0, -s, s]).unwrap();
        let a = g.leaf_grad(&anchors);
        let p = g.leaf_grad(&positives);
        let triplets = mine_triplets_in_graph(&mut g, a, p, &[1, 2], 2).unwrap();
        // Rows 1 and 3 (j=1 for both anchors) are the hard positives.
        assert_eq!(triplets.hard_pos, vec![1, 1]);
        let seed = vec![1.0, 1.0];
        g.backward(triplets.d_pos_node, &seed).unwrap();
        let grads = g.grad(p).unwrap();
        assert_eq!(&grads[0..2], &[0.0, 0.0], "unselected positive of row 0");
        assert_eq!(&grads[4..6], &[0.0, 0.0], "unselected positive of row 1");
        assert!(grads[2..4].iter().any(|&v| v != 0.0), "selected positive must get gradient");
    }

    #[test]
    fn sample_batch_draws_distinct_positives_when_possible() {
        let store = synth_store(2, 4, 6, SynthMode::Both).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&store, &[0, 1, 2, 3], 3, &mut rng).unwrap();
        assert_eq!(batch.n(), 4);
        assert_eq!(batch.m(), 3);
        for i in 0..batch.n() {
            let anchor = batch.anchors()[i].source.frame_id;
            for j in 0..batch.m() {
                assert_ne!(batch.positive(i, j).source.frame_id, anchor);
            }
            let mut frames: Vec<u64> = (0..3).map(|j| batch.positive(i, j).source.frame_id).collect();
            frames.sort_unstable();
            frames.dedup();
            assert_eq!(frames.len(), 3);
        }
    }
}
