//! mAP evaluation harness: pair verification, nearest-neighbor matching
//! and ranked retrieval, plus Top-K precision and the descriptor export
//! format. Average precision uses the positives-at-rank formulation
//! without interpolation; score ties keep original order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{CorrespondenceStore, Patch};
use crate::error::{Error, Result};
use crate::mining::pairwise_distances;
use crate::net::{DescriptorBatch, Network};
use crate::tensor::Scalar;

pub const DESCRIPTOR_MAGIC: &str = "IFDESC1";

/// Scored entries with binary relevance, descending score = best first.
#[derive(Debug, Clone)]
pub struct RankedList {
    entries: Vec<(f64, bool)>,
}

impl RankedList {
    pub fn new(entries: Vec<(f64, bool)>) -> Self {
        RankedList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mean over positives of precision at the positive's rank, after a
/// stable descending sort by score.
pub fn average_precision(ranked: &RankedList) -> Result<f64> {
    let mut order: Vec<usize> = (0..ranked.entries.len()).collect();
    order.sort_by(|&a, &b| ranked.entries[b].0.total_cmp(&ranked.entries[a].0));
    let total_pos = ranked.entries.iter().filter(|e| e.1).count();
    if total_pos == 0 {
        return Err(Error::NoPositives(String::new()));
    }
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (rank0, &idx) in order.iter().enumerate() {
        if ranked.entries[idx].1 {
            hits += 1;
            acc += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(acc / total_pos as f64)
}

/// Fraction of correct entries among the k lowest-distance matches
/// (all of them when the list is shorter than k).
pub fn precision_at_k(ranked_labels: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    if ranked_labels.is_empty() {
        return 0.0;
    }
    let take = k.min(ranked_labels.len());
    ranked_labels[..take].iter().filter(|&&l| l).count() as f64 / take as f64
}

// ── verification ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VerificationPair {
    pub a: Patch,
    pub b: Patch,
    pub label: bool,
    /// Negative drawn from the same scene (intra) or another (inter).
    pub intra: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationReport {
    pub overall: f64,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

/// Scores every pair by negative descriptor distance and takes the AP
/// of the ranked list; intra/inter subsets reported when present.
pub fn eval_verification<S: Scalar>(
    pairs: &[VerificationPair],
    net: &Network<S>,
) -> Result<VerificationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("eval_verification"));
    }
    let left: Vec<Patch> = pairs.iter().map(|p| p.a.clone()).collect();
    let right: Vec<Patch> = pairs.iter().map(|p| p.b.clone()).collect();
    let da = describe_chunked(net, &left)?;
    let db = describe_chunked(net, &right)?;
    let mut scored = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let d = row_distance(&da, i, &db, i);
        scored.push((-d, pair.label, pair.intra));
    }
    let overall =
        average_precision(&RankedList::new(scored.iter().map(|&(s, l, _)| (s, l)).collect()))?;
    let subset = |want_intra: bool| -> Result<Option<f64>> {
        let entries: Vec<(f64, bool)> = scored
            .iter()
            .filter(|&&(_, _, intra)| intra == want_intra)
            .map(|&(s, l, _)| (s, l))
            .collect();
        if entries.is_empty() || !entries.iter().any(|e| e.1) {
            return Ok(None);
        }
        average_precision(&RankedList::new(entries)).map(Some)
    };
    Ok(VerificationReport { overall, intra: subset(true)?, inter: subset(false)? })
}

// ── matching ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MatchingSplit {
    pub set_a: Vec<Patch>,
    pub set_b: Vec<Patch>,
    /// For each A index, the index of its true correspondent in B.
    pub truth: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MatchingOutcome {
    pub ap: f64,
    /// Candidate labels in ascending-distance order (for Top-K and
    /// precision-vs-rank curves).
    pub ranked_labels: Vec<bool>,
    /// Candidate scores in the same order.
    pub ranked_scores: Vec<f64>,
}

/// Unidirectional nearest-neighbor matching A→B: each A row proposes its
/// NN (ties to the lowest index), scored by negative distance, labeled
/// correct iff it hits the true correspondent. A list with no correct
/// candidate scores 0.
pub fn eval_matching_descriptors<S: Scalar>(
    a: &DescriptorBatch<S>,
    b: &DescriptorBatch<S>,
    truth: &[usize],
    mutual_nn: bool,
) -> Result<MatchingOutcome> {
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::EmptyBatch("eval_matching"));
    }
    if truth.len() != a.count() || truth.iter().any(|&t| t >= b.count()) {
        return Err(Error::InvalidParams(format!(
            "truth map must give every A row a valid B index ({} rows, {} entries)",
            a.count(),
            truth.len()
        )));
    }
    let d = pairwise_distances(a, b)?;
    let nn_of_b: Vec<usize> = if mutual_nn {
        (0..b.count())
            .map(|j| {
                (0..a.count()).fold(0, |best, i| if d.entry(i, j) < d.entry(best, j) { i } else { best })
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut candidates: Vec<(f64, bool)> = Vec::with_capacity(a.count());
    for i in 0..a.count() {
        let row = d.row(i);
        let mut nn = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v < row[nn] {
                nn = j;
            }
        }
        if mutual_nn && nn_of_b[nn] != i {
            continue;
        }
        candidates.push((-row[nn].to_f64(), nn == truth[i]));
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0));
    let ranked_labels: Vec<bool> = candidates.iter().map(|c| c.1).collect();
    let ranked_scores: Vec<f64> = candidates.iter().map(|c| c.0).collect();
    let ap = if ranked_labels.iter().any(|&l| l) {
        average_precision(&RankedList::new(candidates))?
    } else {
        0.0
    };
    Ok(MatchingOutcome { ap, ranked_labels, ranked_scores })
}

pub fn eval_matching<S: Scalar>(
    split: &MatchingSplit,
    net: &Network<S>,
    mutual_nn: bool,
) -> Result<MatchingOutcome> {
    let da = describe_chunked(net, &split.set_a)?;
    let db = describe_chunked(net, &split.set_b)?;
    eval_matching_descriptors(&da, &db, &split.truth, mutual_nn)
}

// ── retrieval ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub queries: Vec<Patch>,
    pub query_tracks: Vec<u64>,
    pub pool: Vec<Patch>,
    pub pool_tracks: Vec<u64>,
}

/// AP of one query against the pool, ranked by ascending distance.
pub fn retrieval_query_ap<S: Scalar>(
    queries: &DescriptorBatch<S>,
    qi: usize,
    query_track: u64,
    pool: &DescriptorBatch<S>,
    pool_tracks: &[u64],
) -> Result<f64> {
    let mut entries = Vec::with_capacity(pool.count());
    for j in 0..pool.count() {
        let d = row_distance(queries, qi, pool, j);
        entries.push((-d, pool_tracks[j] == query_track));
    }
    average_precision(&RankedList::new(entries))
        .map_err(|_| Error::NoPositives(format!(" for query {}", qi)))
}

/// Mean AP over all queries.
pub fn eval_retrieval_descriptors<S: Scalar>(
    queries: &DescriptorBatch<S>,
    query_tracks: &[u64],
    pool: &DescriptorBatch<S>,
    pool_tracks: &[u64],
) -> Result<f64> {
    if queries.count() == 0 {
        return Err(Error::EmptyBatch("eval_retrieval"));
    }
    let mut acc = 0.0;
    for qi in 0..queries.count() {
        acc += retrieval_query_ap(queries, qi, query_tracks[qi], pool, pool_tracks)?;
    }
    Ok(acc / queries.count() as f64)
}

pub fn eval_retrieval<S: Scalar>(split: &RetrievalSplit, net: &Network<S>) -> Result<f64> {
    let dq = describe_chunked(net, &split.queries)?;
    let dp = describe_chunked(net, &split.pool)?;
    eval_retrieval_descriptors(&dq, &split.query_tracks, &dp, &split.pool_tracks)
}

// ── split generation ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalSplits {
    pub verification: Vec<VerificationPair>,
    pub matching: MatchingSplit,
    pub retrieval: RetrievalSplit,
}

/// Builds the three task splits from a held-out store: balanced
/// match/non-match pairs, an A→B matching instance with shuffled B, and
/// one query per track against all remaining views.
pub fn make_splits(store: &CorrespondenceStore, seed: u64) -> Result<EvalSplits> {
    if store.tracks.len() < 2 {
        return Err(Error::InsufficientTracks {
            store: "eval".into(),
            got: store.tracks.len(),
            need: 2,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = store.tracks.len();

    let mut verification = Vec::with_capacity(2 * n);
    for (ti, track) in store.tracks.iter().enumerate() {
        let (a, b) = two_distinct(track.members.len(), &mut rng);
        verification.push(VerificationPair {
            a: track.members[a].patch.clone(),
            b: track.members[b].patch.clone(),
            label: true,
            intra: true,
        });
        let mut tj = rng.gen_range(0..n - 1);
        if tj >= ti {
            tj += 1;
        }
        let other = &store.tracks[tj];
        let va = rng.gen_range(0..track.members.len());
        let vb = rng.gen_range(0..other.members.len());
        verification.push(VerificationPair {
            a: track.members[va].patch.clone(),
            b: other.members[vb].patch.clone(),
            label: false,
            intra: track.scene_id == other.scene_id,
        });
    }

    let mut set_a = Vec::with_capacity(n);
    let mut b_items: Vec<(usize, Patch)> = Vec::with_capacity(n);
    for (ti, track) in store.tracks.iter().enumerate() {
        let (a, b) = two_distinct(track.members.len(), &mut rng);
        set_a.push(track.members[a].patch.clone());
        b_items.push((ti, track.members[b].patch.clone()));
    }
    b_items.shuffle(&mut rng);
    let mut truth = vec![0usize; n];
    let mut set_b = Vec::with_capacity(n);
    for (pos, (ti, patch)) in b_items.into_iter().enumerate() {
        truth[ti] = pos;
        set_b.push(patch);
    }
    let matching = MatchingSplit { set_a, set_b, truth };

    let mut queries = Vec::with_capacity(n);
    let mut query_tracks = Vec::with_capacity(n);
    let mut pool = Vec::new();
    let mut pool_tracks = Vec::new();
    for track in &store.tracks {
        let qi = rng.gen_range(0..track.members.len());
        queries.push(track.members[qi].patch.clone());
        query_tracks.push(track.track_id);
        for (mi, member) in track.members.iter().enumerate() {
            if mi != qi {
                pool.push(member.patch.clone());
                pool_tracks.push(track.track_id);
            }
        }
    }
    let retrieval = RetrievalSplit { queries, query_tracks, pool, pool_tracks };

    Ok(EvalSplits { verification, matching, retrieval })
}

fn two_distinct<R: Rng>(len: usize, rng: &mut R) -> (usize, usize) {
    let a = rng.gen_range(0..len);
    let mut b = rng.gen_range(0..len - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

// ── helpers and the export format ────────────────────────────────────

fn row_distance<S: Scalar>(a: &DescriptorBatch<S>, i: usize, b: &DescriptorBatch<S>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Eval-mode description in fixed-size chunks.
pub fn describe_chunked<S: Scalar>(net: &Network<S>, patches: &[Patch]) -> Result<DescriptorBatch<S>> {
    let dim = net.config.descriptor_dim;
    let mut rows = Vec::with_capacity(patches.len() * dim);
    for chunk in patches.chunks(128) {
        let batch = net.describe_eval(chunk)?;
        rows.extend_from_slice(batch.rows());
    }
    DescriptorBatch::new(dim, rows)
}

/// Header "IFDESC1 dim=D count=B", then one row of space-separated
/// decimal floats per descriptor.
pub fn write_descriptor_file<S: Scalar>(path: &Path, desc: &DescriptorBatch<S>) -> Result<()> {
    let mut out = format!("{} dim={} count={}\n", DESCRIPTOR_MAGIC, desc.dim(), desc.count());
    for i in 0..desc.count() {
        let row: Vec<String> = desc.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_descriptor_file(path: &Path) -> Result<DescriptorBatch<f64>> {
    let bad = |detail: String| Error::InvalidParams(format!("{}: {}", path.display(), detail));
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(DESCRIPTOR_MAGIC) {
        return Err(bad("bad magic".into()));
    }
    let dim: usize = toks
        .next()
        .and_then(|t| t.strip_prefix("dim="))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad dim field".into()))?;
    let count: usize = toks
        .next()
        .and_then(|t| t.strip_prefix("count="))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad count field".into()))?;
    let mut rows = Vec::with_capacity(dim * count);
    for line in lines.take(count) {
        for tok in line.split_whitespace() {
            rows.push(tok.parse::<f64>().map_err(|_| bad(format!("bad value '{}'", tok)))?);
        }
    }
    if rows.len() != dim * count {
        return Err(bad(format!("expected {} values, got {}", dim * count, rows.len())));
    }
    DescriptorBatch::new(dim, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rl(pairs: &[(f64, bool)]) -> RankedList {
        RankedList::new(pairs.to_vec())
    }

    #[test]
    fn ap_hand_fixture() {
        // Labels in ranked order [1, 0, 1].
        let ap = average_precision(&rl(&[(3.0, true), (2.0, false), (1.0, true)])).unwrap();
        assert!((ap - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let ap =
            average_precision(&rl(&[(3.0, true), (2.5, true), (1.0, false), (0.5, false)])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_single_positive_ranked_last() {
        for n in [2usize, 5, 9] {
            let mut entries: Vec<(f64, bool)> =
                (0..n - 1).map(|i| (n as f64 - i as f64, false)).collect();
            entries.push((0.0, true));
            let ap = average_precision(&rl(&entries)).unwrap();
            assert!((ap - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_requires_a_positive() {
        assert!(matches!(average_precision(&rl(&[(1.0, false)])), Err(Error::NoPositives(_))));
    }

    #[test]
    fn ap_ties_keep_original_order() {
        let a = average_precision(&rl(&[(1.0, true), (1.0, false)])).unwrap();
        let b = average_precision(&rl(&[(1.0, false), (1.0, true)])).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn ap_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let n = rng.gen_range(1..30);
            let entries: Vec<(f64, bool)> =
                (0..n).map(|_| (rng.gen_range(-5.0..5.0), rng.gen_bool(0.4))).collect();
            if !entries.iter().any(|e| e.1) {
                continue;
            }
            // Oracle: explicit sort + running precision accumulation.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| entries[b].0.total_cmp(&entries[a].0));
            let mut seen = 0.0;
            let mut acc = 0.0;
            for (r, &i) in order.iter().enumerate() {
                if entries[i].1 {
                    seen += 1.0;
                    acc += seen / (r as f64 + 1.0);
                }
            }
            let oracle = acc / entries.iter().filter(|e| e.1).count() as f64;
            let got = average_precision(&rl(&entries)).unwrap();
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn ap_invariant_under_monotone_score_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.gen_range(2..20);
            let entries: Vec<(f64, bool)> =
                (0..n).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_bool(0.5))).collect();
            if !entries.iter().any(|e| e.1) {
                continue;
            }
            let base = average_precision(&rl(&entries)).unwrap();
            let warped: Vec<(f64, bool)> =
                entries.iter().map(|&(s, l)| (s.exp() * 3.0 + 1.0, l)).collect();
            assert_eq!(average_precision(&rl(&warped)).unwrap(), base);
        }
    }

    #[test]
    fn precision_at_k_cases() {
        assert_eq!(precision_at_k(&[true, true, true], 3), 1.0);
        assert_eq!(precision_at_k(&[true, false, true], 2), 0.5);
        // k beyond the list length clamps to total precision.
        assert!((precision_at_k(&[true, false, true], 40) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_of_identical_sets_is_perfect() {
        let dim = 4;
        let mut rows = Vec::new();
        for i in 0..6 {
            let mut v = vec![0.0f64; dim];
            v[i % dim] = if i < dim { 1.0 } else { -1.0 };
            rows.extend(v);
        }
        let a = DescriptorBatch::new(dim, rows).unwrap();
        // B is A under a permutation.
        let perm = [3usize, 0, 4, 1, 5, 2];
        let mut b_rows = Vec::new();
        for &p in &perm {
            b_rows.extend_from_slice(a.row(p));
        }
        let b = DescriptorBatch::new(dim, b_rows).unwrap();
        // truth[i] = position of i in perm.
        let mut truth = vec![0usize; 6];
        for (pos, &p) in perm.iter().enumerate() {
            truth[p] = pos;
        }
        let out = eval_matching_descriptors(&a, &b, &truth, false).unwrap();
        assert_eq!(out.ap, 1.0);
    }

    #[test]
    fn matching_with_identical_descriptors_follows_tie_break() {
        // All descriptors identical: every NN lands at index 0.
        let dim = 2;
        let rows = vec![1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0];
        let a = DescriptorBatch::new(dim, rows.clone()).unwrap();
        let b = DescriptorBatch::new(dim, rows).unwrap();
        let out = eval_matching_descriptors(&a, &b, &[0, 1, 2], false).unwrap();
        // Only pair (0 -> 0) is labeled correct; brute force agrees.
        assert_eq!(out.ranked_labels.iter().filter(|&&l| l).count(), 1);
    }

    #[test]
    fn matching_scores_ignore_labels_until_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dim = 3;
        let mk = |rng: &mut ChaCha8Rng, count: usize| {
            let mut rows = Vec::new();
            for _ in 0..count {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                rows.extend(v.iter().map(|x| x / norm));
            }
            DescriptorBatch::new(dim, rows).unwrap()
        };
        let a = mk(&mut rng, 8);
        let b = mk(&mut rng, 8);
        let truth: Vec<usize> = (0..8).collect();
        let mut shuffled = truth.clone();
        shuffled.shuffle(&mut rng);
        let out1 = eval_matching_descriptors(&a, &b, &truth, false).unwrap();
        let out2 = eval_matching_descriptors(&a, &b, &shuffled, false).unwrap();
        assert_eq!(out1.ranked_scores, out2.ranked_scores);
    }

    #[test]
    fn retrieval_of_duplicated_queries_is_perfect() {
        let dim = 3;
        let rows = vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let q = DescriptorBatch::new(dim, rows.clone()).unwrap();
        let pool = DescriptorBatch::new(dim, rows).unwrap();
        let tracks = [1u64, 2, 3];
        let map = eval_retrieval_descriptors(&q, &tracks, &pool, &tracks).unwrap();
        assert_eq!(map, 1.0);
    }

    #[test]
    fn retrieval_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let dim = 4;
        for _ in 0..20 {
            let nq = 20;
            let np = 50;
            let mk = |rng: &mut ChaCha8Rng, count: usize| {
                let mut rows = Vec::new();
                for _ in 0..count {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                    rows.extend(v.iter().map(|x| x / norm));
                }
                DescriptorBatch::new(dim, rows).unwrap()
            };
            let q = mk(&mut rng, nq);
            let pool = mk(&mut rng, np);
            let q_tracks: Vec<u64> = (0..nq as u64).collect();
            let pool_tracks: Vec<u64> = (0..np).map(|_| rng.gen_range(0..nq as u64)).collect();
            if (0..nq as u64).any(|t| !pool_tracks.contains(&t)) {
                continue;
            }
            let got = eval_retrieval_descriptors(&q, &q_tracks, &pool, &pool_tracks).unwrap();
            // Brute-force AP per query.
            let mut acc = 0.0;
            for qi in 0..nq {
                let mut entries: Vec<(f64, bool)> = (0..np)
                    .map(|j| {
                        let d: f64 = q
                            .row(qi)
                            .iter()
                            .zip(pool.row(j))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                        (-d, pool_tracks[j] == q_tracks[qi])
                    })
                    .collect();
                entries.sort_by(|a, b| b.0.total_cmp(&a.0));
                let npos = entries.iter().filter(|e| e.1).count();
                let mut seen = 0.0;
                let mut ap = 0.0;
                for (r, e) in entries.iter().enumerate() {
                    if e.1 {
                        seen += 1.0;
                        ap += seen / (r + 1) as f64;
                    }
                }
                acc += ap / npos as f64;
            }
            assert!((got - acc / nq as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn removing_distractors_never_hurts_a_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dim = 3;
        for _ in 0..50 {
            let np = 12;
            let mut rows = Vec::new();
            for _ in 0..np + 1 {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                rows.extend(v.iter().map(|x| x / norm));
            }
            let all = DescriptorBatch::new(dim, rows).unwrap();
            let q = all.select(&[0]);
            let pool_idx: Vec<usize> = (1..=np).collect();
            let pool = all.select(&pool_idx);
            let mut tracks: Vec<u64> =
                (0..np as u64).map(|i| if i < 3 { 7 } else { i + 100 }).collect();
            tracks.shuffle(&mut rng);
            let base = retrieval_query_ap(&q, 0, 7, &pool, &tracks).unwrap();
            // Drop one negative.
            let drop = tracks.iter().position(|&t| t != 7).unwrap();
            let keep: Vec<usize> = (0..np).filter(|&j| j != drop).collect();
            let pool2 = pool.select(&keep);
            let tracks2: Vec<u64> = keep.iter().map(|&j| tracks[j]).collect();
            let smaller = retrieval_query_ap(&q, 0, 7, &pool2, &tracks2).unwrap();
            assert!(smaller >= base - 1e-12, "{} vs {}", smaller, base);
        }
    }

    #[test]
    fn chance_level_ranking_sits_near_half() {
        // Random unit descriptors, balanced labels, n = 200.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let dim = 16;
        let n = 200;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nx = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            let d: f64 = v
                .iter()
                .zip(&w)
                .map(|(x, y)| (x / nx - y / ny) * (x / nx - y / ny))
                .sum::<f64>()
                .sqrt();
            entries.push((-d, i % 2 == 0));
        }
        let map = average_precision(&RankedList::new(entries)).unwrap();
        assert!((0.4..=0.6).contains(&map), "chance-level mAP {}", map);
    }

    #[test]
    fn descriptor_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let rows = vec![0.6f64, 0.8, -0.8, 0.6];
        let desc = DescriptorBatch::new(2, rows.clone()).unwrap();
        write_descriptor_file(&path, &desc).unwrap();
        let back = read_descriptor_file(&path).unwrap();
        assert_eq!(back.dim(), 2);
        assert_eq!(back.count(), 2);
        assert_eq!(back.rows(), rows.as_slice());
    }

    #[test]
    fn splits_from_synth_store_are_well_formed() {
        let store =
            crate::dataset::synth_store(3, 6, 4, crate::dataset::SynthMode::Illumination).unwrap();
        let splits = make_splits(&store, 9).unwrap();
        assert_eq!(splits.verification.len(), 12);
        assert_eq!(splits.verification.iter().filter(|p| p.label).count(), 6);
        assert_eq!(splits.matching.set_a.len(), 6);
        assert_eq!(splits.matching.set_b.len(), 6);
        let mut truth = splits.matching.truth.clone();
        truth.sort_unstable();
        assert_eq!(truth, (0..6).collect::<Vec<_>>());
        assert_eq!(splits.retrieval.queries.len(), 6);
        assert_eq!(splits.retrieval.pool.len(), 18);
    }
}
