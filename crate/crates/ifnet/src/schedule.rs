//! Training schedules, the Adam optimizer and the training loop.
//!
//! Three schedules are supported: Basic (one store), FineTune (first
//! store until a split epoch, then the second, optimizer state kept) and
//! Separation (one batch from each of two stores per iteration pushed
//! through shared weights, summed losses, one update).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::CorrespondenceStore;
use crate::error::{Error, Result};
use crate::losses::{roi_loss_node, LossConfig};
use crate::mining::{form_triplets_with, sample_batch, CorrespondenceBatch};
use crate::net::Network;
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone)]
pub enum ScheduleKind {
    Basic { store: CorrespondenceStore },
    FineTune { first: CorrespondenceStore, second: CorrespondenceStore, split_epoch: usize },
    Separation { geometry: CorrespondenceStore, illumination: CorrespondenceStore },
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Basic { .. } => "basic",
            ScheduleKind::FineTune { .. } => "finetune",
            ScheduleKind::Separation { .. } => "separation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSchedule {
    pub kind: ScheduleKind,
    pub epochs: usize,
    /// Anchors per batch (N).
    pub batch_n: usize,
    /// Positives per anchor (M).
    pub batch_m: usize,
}

impl TrainingSchedule {
    /// N from a total patch budget: `N = batch_size / (M + 1)`.
    pub fn batch_n_for(batch_size: usize, m: usize) -> usize {
        (batch_size / (m + 1)).max(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidSchedule("epochs must be >= 1".into()));
        }
        if self.batch_n < 2 || self.batch_m < 1 {
            return Err(Error::InvalidSchedule(format!(
                "batch needs N >= 2 and M >= 1, got N={} M={}",
                self.batch_n, self.batch_m
            )));
        }
        match &self.kind {
            ScheduleKind::Basic { .. } => {}
            ScheduleKind::FineTune { split_epoch, .. } => {
                if *split_epoch == 0 || *split_epoch >= self.epochs {
                    return Err(Error::InvalidSchedule(format!(
                        "finetune split epoch {} must lie strictly inside (0, {})",
                        split_epoch, self.epochs
                    )));
                }
            }
            ScheduleKind::Separation { geometry, illumination } => {
                if geometry == illumination {
                    return Err(Error::InvalidSchedule(
                        "separation requires two distinct stores".into(),
                    ));
                }
            }
        }
        for (label, store) in self.stores() {
            if store.tracks.len() < self.batch_n {
                return Err(Error::InsufficientTracks {
                    store: label.into(),
                    got: store.tracks.len(),
                    need: self.batch_n,
                });
            }
        }
        Ok(())
    }

    fn stores(&self) -> Vec<(&'static str, &CorrespondenceStore)> {
        match &self.kind {
            ScheduleKind::Basic { store } => vec![("basic", store)],
            ScheduleKind::FineTune { first, second, .. } => vec![("first", first), ("second", second)],
            ScheduleKind::Separation { geometry, illumination } => {
                vec![("geometry", geometry), ("illumination", illumination)]
            }
        }
    }

    /// Batches per epoch: the smallest involved store, whole batches
    /// only, never cycled.
    pub fn iterations_per_epoch(&self) -> usize {
        let min_tracks = self.stores().iter().map(|(_, s)| s.tracks.len()).min().unwrap_or(0);
        min_tracks / self.batch_n
    }
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First epoch at which decay applies.
    pub decay_start: usize,
    /// Additional division every this many epochs after the start.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_start: 30,
            decay_every: 10,
            decay_factor: 10.0,
        }
    }
}

/// Step decay: `lr0` before `decay_start`, then divided by the factor
/// once per started `decay_every` window.
pub fn lr_at(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    if epoch < cfg.decay_start {
        cfg.lr0
    } else {
        let decades = (epoch - cfg.decay_start) / cfg.decay_every + 1;
        cfg.lr0 / cfg.decay_factor.powi(decades as i32)
    }
}

/// First/second moment accumulators, aligned with a parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the accumulated gradients.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step".into(),
            detail: format!("{} params vs {} state slots", params.len(), state.m.len()),
        });
    }
    state.step += 1;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(cfg.eps);
    let corr1 = one - S::from_f64(cfg.beta1.powi(state.step as i32));
    let corr2 = one - S::from_f64(cfg.beta2.powi(state.step as i32));
    for (pi, p) in params.iter_mut().enumerate() {
        if p.numel() != state.m[pi].len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step".into(),
                detail: format!("param {} has {} values, state has {}", pi, p.numel(), state.m[pi].len()),
            });
        }
        let Some(grad) = p.grad().map(|g| g.to_vec()) else { continue };
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let values = p.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            values[i] = values[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── steps ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveMining {
    /// Farthest positive per row (the default).
    Hardest,
    /// Uniformly random positive per row (ablation control).
    Random,
}

fn positive_override<R: Rng>(
    mode: PositiveMining,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    match mode {
        PositiveMining::Hardest => None,
        PositiveMining::Random => Some((0..n).map(|_| rng.gen_range(0..m)).collect()),
    }
}

/// One optimizer step on a single batch. Returns the loss value.
#[allow(clippy::too_many_arguments)]
pub fn basic_step<S: Scalar>(
    net: &mut Network<S>,
    batch: &CorrespondenceBatch,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
    state: &mut AdamState<S>,
    lr: f64,
    chosen_positives: Option<Vec<usize>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let param_ids = net.insert_params(&mut g, true);
    let (triplets, handles) = form_triplets_with(&mut g, net, &param_ids, batch, true, chosen_positives)?;
    let loss = roi_loss_node(&mut g, &triplets, loss_cfg)?;
    g.backward_scalar(loss)?;
    net.update_running_stats(&g, &handles);
    net.zero_grads();
    net.accumulate_grads(&g, &param_ids);
    adam_step(net.params_mut(), state, lr, opt_cfg)?;
    Ok(g.values(loss)[0].to_f64())
}

/// One optimizer step on a batch from each domain. Both branches run
/// through the same parameter leaves (mining never crosses batches),
/// the branch losses are summed, and exactly one update is applied.
pub fn separation_step<S: Scalar>(
    net: &mut Network<S>,
    batch_geo: &CorrespondenceBatch,
    batch_ill: &CorrespondenceBatch,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let param_ids = net.insert_params(&mut g, true);
    let (trip_geo, handles_geo) = form_triplets_with(&mut g, net, &param_ids, batch_geo, true, None)?;
    let (trip_ill, handles_ill) = form_triplets_with(&mut g, net, &param_ids, batch_ill, true, None)?;
    let loss_geo = roi_loss_node(&mut g, &trip_geo, loss_cfg)?;
    let loss_ill = roi_loss_node(&mut g, &trip_ill, loss_cfg)?;
    let total = g.add(loss_geo, loss_ill)?;
    g.backward_scalar(total)?;
    net.update_running_stats(&g, &handles_geo);
    net.update_running_stats(&g, &handles_ill);
    net.zero_grads();
    net.accumulate_grads(&g, &param_ids);
    adam_step(net.params_mut(), state, lr, opt_cfg)?;
    Ok((g.values(loss_geo)[0].to_f64(), g.values(loss_ill)[0].to_f64()))
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss_geo: f64,
    /// Present only under the separation schedule.
    pub loss_ill: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingReport {
    /// Equality of everything reproducible; wall-clock timings are
    /// excluded on purpose.
    pub fn semantically_equal(&self, other: &TrainingReport) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch && a.lr == b.lr && a.loss_geo == b.loss_geo && a.loss_ill == b.loss_ill
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss_geo,loss_ill,wall_ms\n");
        for e in &self.epochs {
            let ill = e.loss_ill.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.lr, e.loss_geo, ill, e.wall_ms));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub positive_mining: PositiveMining,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many epochs (0: final checkpoint only).
    pub checkpoint_interval: usize,
    /// Per-epoch progress lines on stdout.
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(seed: u64) -> Self {
        TrainOptions {
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed,
            positive_mining: PositiveMining::Hardest,
            checkpoint_dir: None,
            checkpoint_interval: 0,
            verbose: false,
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize, lane: u64) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shuffled_indices<R: Rng>(count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    idx
}

/// Runs a schedule to completion. Deterministic given the seed: batch
/// composition depends only on (seed, epoch, store content), never on
/// the schedule kind, so FineTune over two copies of one store replays
/// Basic exactly.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    schedule: &TrainingSchedule,
    opts: &TrainOptions,
) -> Result<TrainingReport> {
    schedule.validate()?;
    let mut state = AdamState::new(net.params());
    let iters = schedule.iterations_per_epoch();
    let mut report = TrainingReport { epochs: Vec::with_capacity(schedule.epochs), checkpoints: Vec::new() };

    for epoch in 0..schedule.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, &opts.optimizer);
        let (mut sum_geo, mut sum_ill) = (0.0f64, 0.0f64);
        let single_store = match &schedule.kind {
            ScheduleKind::Basic { store } => Some(store),
            ScheduleKind::FineTune { first, second, split_epoch } => {
                if epoch < *split_epoch {
                    Some(first)
                } else {
                    if opts.verbose && epoch == *split_epoch {
                        println!("epoch {}: switching to second store", epoch);
                    }
                    Some(second)
                }
            }
            ScheduleKind::Separation { .. } => None,
        };
        match (single_store, &schedule.kind) {
            (Some(store), _) => {
                sum_geo = run_single_store_epoch(net, store, schedule, opts, &mut state, epoch, lr, iters)?;
            }
            (None, ScheduleKind::Separation { geometry, illumination }) => {
                let mut rng_geo = ChaCha8Rng::seed_from_u64(epoch_seed(opts.seed, epoch, 1));
                let mut rng_ill = ChaCha8Rng::seed_from_u64(epoch_seed(opts.seed, epoch, 2));
                let order_geo = shuffled_indices(geometry.tracks.len(), &mut rng_geo);
                let order_ill = shuffled_indices(illumination.tracks.len(), &mut rng_ill);
                for it in 0..iters {
                    let slice_geo = &order_geo[it * schedule.batch_n..(it + 1) * schedule.batch_n];
                    let slice_ill = &order_ill[it * schedule.batch_n..(it + 1) * schedule.batch_n];
                    let batch_geo = sample_batch(geometry, slice_geo, schedule.batch_m, &mut rng_geo)?;
                    let batch_ill = sample_batch(illumination, slice_ill, schedule.batch_m, &mut rng_ill)?;
                    let (lg, li) = separation_step(
                        net,
                        &batch_geo,
                        &batch_ill,
                        &opts.loss,
                        &opts.optimizer,
                        &mut state,
                        lr,
                    )?;
                    sum_geo += lg;
                    sum_ill += li;
                }
            }
            (None, _) => unreachable!("single_store is None only for separation"),
        }
        let divisor = iters.max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss_geo: sum_geo / divisor,
            loss_ill: matches!(schedule.kind, ScheduleKind::Separation { .. })
                .then_some(sum_ill / divisor),
            wall_ms: started.elapsed().as_millis(),
        };
        if opts.verbose {
            match stats.loss_ill {
                Some(ill) => println!(
                    "epoch {:>3}  lr {:<8}  loss_geo {:.6}  loss_ill {:.6}",
                    epoch, lr, stats.loss_geo, ill
                ),
                None => println!("epoch {:>3}  lr {:<8}  loss {:.6}", epoch, lr, stats.loss_geo),
            }
        }
        report.epochs.push(stats);

        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_interval > 0 && (epoch + 1) % opts.checkpoint_interval == 0 {
                let path = dir.join(format!("ckpt_epoch_{:04}.ckpt", epoch));
                net.save_checkpoint(&path)?;
                report.checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = &opts.checkpoint_dir {
        let path = dir.join("final.ckpt");
        net.save_checkpoint(&path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_single_store_epoch<S: Scalar>(
    net: &mut Network<S>,
    store: &CorrespondenceStore,
    schedule: &TrainingSchedule,
    opts: &TrainOptions,
    state: &mut AdamState<S>,
    epoch: usize,
    lr: f64,
    iters: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(opts.seed, epoch, 0));
    let order = shuffled_indices(store.tracks.len(), &mut rng);
    let mut sum = 0.0f64;
    for it in 0..iters {
        let slice = &order[it * schedule.batch_n..(it + 1) * schedule.batch_n];
        let batch = sample_batch(store, slice, schedule.batch_m, &mut rng)?;
        let chosen = positive_override(opts.positive_mining, batch.n(), batch.m(), &mut rng);
        sum += basic_step(net, &batch, &opts.loss, &opts.optimizer, state, lr, chosen)?;
    }
    Ok(sum)
}
