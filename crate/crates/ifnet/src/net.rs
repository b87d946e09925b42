//! Convolutional descriptor network: a stack of 3×3 conv / batch-norm /
//! relu stages followed by one full-extent conv collapsing the feature
//! map into the descriptor, which is L2-normalized row-wise. Patches are
//! bilinearly resampled to the network input side and standardized
//! per patch before entering the stack.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, ValueId};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const STD_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_MAGIC: &str = "IFNETCKPT1";

/// One 3×3 stage of the conv stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_side: usize,
    pub channel_plan: Vec<ConvStage>,
    pub descriptor_dim: usize,
    pub batchnorm_enabled: bool,
    pub rng_seed: u64,
}

impl NetConfig {
    /// Full-width plan: 32-32-64-64-128-128 with stride 2 at stages 3
    /// and 5, then a global conv to the descriptor.
    pub fn full(rng_seed: u64) -> Self {
        NetConfig {
            input_side: 32,
            channel_plan: plan(&[(32, 1), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1)]),
            descriptor_dim: 128,
            batchnorm_enabled: true,
            rng_seed,
        }
    }

    /// Widths divided by 8 for desk-scale runs.
    pub fn toy(rng_seed: u64) -> Self {
        NetConfig {
            input_side: 32,
            channel_plan: plan(&[(4, 1), (4, 1), (8, 2), (8, 1), (16, 2), (16, 1)]),
            descriptor_dim: 128,
            batchnorm_enabled: true,
            rng_seed,
        }
    }

    pub fn with_descriptor_dim(mut self, dim: usize) -> Self {
        self.descriptor_dim = dim;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.descriptor_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "descriptor_dim must be >= 2, got {}",
                self.descriptor_dim
            )));
        }
        let mut downsample = 1usize;
        for (i, stage) in self.channel_plan.iter().enumerate() {
            if stage.out_channels == 0 || stage.stride == 0 {
                return Err(Error::InvalidConfig(format!("stage {} has zero channels or stride", i)));
            }
            downsample *= stage.stride;
        }
        if self.input_side == 0 || self.input_side % downsample != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_side {} not divisible by total downsampling factor {}",
                self.input_side, downsample
            )));
        }
        Ok(())
    }

    fn final_side(&self) -> usize {
        self.input_side / self.channel_plan.iter().map(|s| s.stride).product::<usize>()
    }

    fn plan_string(&self) -> String {
        self.channel_plan
            .iter()
            .map(|s| format!("{}:{}", s.out_channels, s.stride))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn parse_plan(text: &str) -> Option<Vec<ConvStage>> {
        if text.is_empty() {
            return Some(Vec::new());
        }
        text.split(',')
            .map(|tok| {
                let (c, s) = tok.split_once(':')?;
                Some(ConvStage { out_channels: c.parse().ok()?, stride: s.parse().ok()? })
            })
            .collect()
    }
}

fn plan(stages: &[(usize, usize)]) -> Vec<ConvStage> {
    stages.iter().map(|&(out_channels, stride)| ConvStage { out_channels, stride }).collect()
}

/// Batch of unit-norm descriptor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch<S: Scalar> {
    dim: usize,
    rows: Vec<S>,
}

impl<S: Scalar> DescriptorBatch<S> {
    /// Validates the unit-norm invariant (f64 accumulation, 1e-5 slack
    /// to admit f32 rounding).
    pub fn new(dim: usize, rows: Vec<S>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::DimMismatch { left: dim, right: rows.len() });
        }
        let batch = DescriptorBatch { dim, rows };
        for i in 0..batch.count() {
            let norm = batch.row_norm(i);
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidParams(format!(
                    "descriptor row {} has norm {} (must be 1 within 1e-5)",
                    i, norm
                )));
            }
        }
        Ok(batch)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[S] {
        &self.rows
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
    }

    /// Sub-batch of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> DescriptorBatch<S> {
        let mut rows = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            rows.extend_from_slice(self.row(i));
        }
        DescriptorBatch { dim: self.dim, rows }
    }
}

#[derive(Debug, Clone)]
struct LayerSpec {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Handles into a recorded forward pass.
pub struct ForwardHandles {
    /// `[B, descriptor_dim]` unit-norm rows.
    pub descriptors: ValueId,
    bn_nodes: Vec<ValueId>,
}

/// The descriptor network: parameters, batch-norm running statistics and
/// the architecture derived from its config.
#[derive(Debug, Clone)]
pub struct Network<S: Scalar> {
    pub config: NetConfig,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor<S>>,
    /// Per batch-norm layer: (running mean, running var).
    bn_running: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Network<S> {
    /// Deterministic initialization: uniform fan-in scaling for weights
    /// (bound `sqrt(3 / fan_in)`), zero biases, unit running variance.
    pub fn init(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut in_c = 1usize;
        for stage in &config.channel_plan {
            layers.push(LayerSpec { in_c, out_c: stage.out_channels, kernel: 3, stride: stage.stride, pad: 1 });
            in_c = stage.out_channels;
        }
        layers.push(LayerSpec {
            in_c,
            out_c: config.descriptor_dim,
            kernel: config.final_side(),
            stride: 1,
            pad: 0,
        });

        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut params = Vec::new();
        let mut bn_running = Vec::new();
        for layer in &layers {
            let fan_in = (layer.in_c * layer.kernel * layer.kernel) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let n = layer.out_c * layer.in_c * layer.kernel * layer.kernel;
            let weight: Vec<S> = (0..n).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect();
            params.push(
                Tensor::new(vec![layer.out_c, layer.in_c, layer.kernel, layer.kernel], weight)?.with_grad(),
            );
            params.push(Tensor::zeros(vec![layer.out_c]).with_grad());
            if config.batchnorm_enabled {
                bn_running.push((vec![S::zero(); layer.out_c], vec![S::one(); layer.out_c]));
            }
        }
        Ok(Network { config, layers, params, bn_running })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Content hash of the parameter set; two handles onto shared
    /// weights always agree on it.
    pub fn params_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            for &v in p.values() {
                h ^= v.to_f64().to_bits();
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Inserts all parameters as graph leaves, in declaration order.
    pub fn insert_params(&self, g: &mut Graph<S>, trainable: bool) -> Vec<ValueId> {
        self.params
            .iter()
            .map(|p| if trainable { g.leaf_grad(p) } else { g.leaf(p) })
            .collect()
    }

    /// Records the forward pass on `input` (`[B, 1, side, side]`) using
    /// previously inserted parameter leaves. Both training branches of a
    /// separation step call this with the *same* `param_ids`, which is
    /// what makes the weights shared.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        input: ValueId,
        param_ids: &[ValueId],
        train_mode: bool,
    ) -> Result<ForwardHandles> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.config.input_side
            || shape[3] != self.config.input_side
        {
            return Err(Error::ShapeMismatch {
                op: "network_forward".into(),
                detail: format!(
                    "expected [B, 1, {side}, {side}], got {shape:?}",
                    side = self.config.input_side
                ),
            });
        }
        let batch = shape[0];
        let mut x = input;
        let mut bn_nodes = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let w = param_ids[2 * li];
            let b = param_ids[2 * li + 1];
            x = g.conv2d(x, w, b, layer.stride, layer.pad)?;
            if self.config.batchnorm_enabled {
                let running = &self.bn_running[li];
                x = if train_mode {
                    g.batch_norm(x, S::from_f64(BN_EPS), None)?
                } else {
                    g.batch_norm(x, S::from_f64(BN_EPS), Some((&running.0, &running.1)))?
                };
                bn_nodes.push(x);
            }
            let last = li + 1 == self.layers.len();
            if !last {
                x = g.relu(x);
            }
        }
        let flat = g.reshape(x, vec![batch, self.config.descriptor_dim])?;
        let descriptors = g.l2_normalize_rows(flat)?;
        Ok(ForwardHandles { descriptors, bn_nodes })
    }

    /// Folds the batch statistics saved by a train-mode forward into the
    /// running statistics (momentum 0.1).
    pub fn update_running_stats(&mut self, g: &Graph<S>, handles: &ForwardHandles) {
        let mom = S::from_f64(BN_MOMENTUM);
        let keep = S::one() - mom;
        for (bi, &node) in handles.bn_nodes.iter().enumerate() {
            if let Some((mean, var)) = g.bn_batch_stats(node) {
                let (rm, rv) = &mut self.bn_running[bi];
                for c in 0..rm.len() {
                    rm[c] = keep * rm[c] + mom * mean[c];
                    rv[c] = keep * rv[c] + mom * var[c];
                }
            }
        }
    }

    /// Reads accumulated leaf gradients back into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph<S>, param_ids: &[ValueId]) {
        for (p, &id) in self.params.iter_mut().zip(param_ids) {
            if let Some(grad) = g.grad(id) {
                p.accumulate_grad(grad);
            }
        }
    }

    /// Maps patches to unit descriptors. In train mode batch statistics
    /// feed the normalization (and the running stats are updated);
    /// otherwise the running statistics are used.
    pub fn describe(&mut self, patches: &[Patch], train_mode: bool) -> Result<DescriptorBatch<S>> {
        let input = preprocess_patches::<S>(patches, self.config.input_side)?;
        let mut g = Graph::new();
        let param_ids = self.insert_params(&mut g, false);
        let x = g.leaf(&input);
        let handles = self.forward(&mut g, x, &param_ids, train_mode)?;
        if train_mode {
            self.update_running_stats(&g, &handles);
        }
        DescriptorBatch::new(self.config.descriptor_dim, g.values(handles.descriptors).to_vec())
    }

    /// Read-only eval-mode description; callable from multiple threads.
    pub fn describe_eval(&self, patches: &[Patch]) -> Result<DescriptorBatch<S>> {
        let input = preprocess_patches::<S>(patches, self.config.input_side)?;
        let mut g = Graph::new();
        let param_ids = self.insert_params(&mut g, false);
        let x = g.leaf(&input);
        let handles = self.forward(&mut g, x, &param_ids, false)?;
        DescriptorBatch::new(self.config.descriptor_dim, g.values(handles.descriptors).to_vec())
    }

    // ── checkpoint io ───────────────────────────────────────────────

    /// Header (magic + config key=value lines), then parameter tensors
    /// and batch-norm running statistics as text snapshots in fixed
    /// declaration order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file =
            fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        let header = format!(
            "{}\ninput_side={}\ndescriptor_dim={}\nbatchnorm={}\nplan={}\nseed={}\n",
            CHECKPOINT_MAGIC,
            self.config.input_side,
            self.config.descriptor_dim,
            self.config.batchnorm_enabled,
            self.config.plan_string(),
            self.config.rng_seed,
        );
        w.write_all(header.as_bytes()).map_err(|e| Error::io("writing checkpoint header", e))?;
        for p in &self.params {
            p.write_snapshot(&mut w).map_err(|e| Error::io("writing checkpoint tensor", e))?;
        }
        for (mean, var) in &self.bn_running {
            let m = Tensor::new(vec![mean.len()], mean.clone()).expect("stat shape");
            let v = Tensor::new(vec![var.len()], var.clone()).expect("stat shape");
            m.write_snapshot(&mut w).map_err(|e| Error::io("writing checkpoint stats", e))?;
            v.write_snapshot(&mut w).map_err(|e| Error::io("writing checkpoint stats", e))?;
        }
        w.flush().map_err(|e| Error::io("writing checkpoint", e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Network<S>> {
        let bad = |detail: String| Error::BadCheckpoint { path: path.to_path_buf(), detail };
        let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io("reading checkpoint", e))?;
        if line.trim() != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic '{}'", line.trim())));
        }
        let mut input_side = None;
        let mut descriptor_dim = None;
        let mut batchnorm = None;
        let mut plan_text = None;
        let mut seed = None;
        for _ in 0..5 {
            line.clear();
            r.read_line(&mut line).map_err(|e| Error::io("reading checkpoint", e))?;
            let (k, v) = line
                .trim()
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header line '{}'", line.trim())))?;
            match k {
                "input_side" => input_side = v.parse().ok(),
                "descriptor_dim" => descriptor_dim = v.parse().ok(),
                "batchnorm" => batchnorm = v.parse().ok(),
                "plan" => plan_text = NetConfig::parse_plan(v),
                "seed" => seed = v.parse().ok(),
                other => return Err(bad(format!("unknown header key '{}'", other))),
            }
        }
        let config = NetConfig {
            input_side: input_side.ok_or_else(|| bad("missing input_side".into()))?,
            channel_plan: plan_text.ok_or_else(|| bad("missing or bad plan".into()))?,
            descriptor_dim: descriptor_dim.ok_or_else(|| bad("missing descriptor_dim".into()))?,
            batchnorm_enabled: batchnorm.ok_or_else(|| bad("missing batchnorm".into()))?,
            rng_seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        };
        let mut net = Network::init(config)?;
        for i in 0..net.params.len() {
            let t =
                Tensor::<S>::read_snapshot(&mut r).map_err(|e| bad(format!("tensor {}: {}", i, e)))?;
            if t.shape() != net.params[i].shape() {
                return Err(bad(format!(
                    "tensor {} shape {:?} does not match architecture {:?}",
                    i,
                    t.shape(),
                    net.params[i].shape()
                )));
            }
            net.params[i] = t.with_grad();
        }
        for bi in 0..net.bn_running.len() {
            let m = Tensor::<S>::read_snapshot(&mut r).map_err(|e| bad(format!("bn mean {}: {}", bi, e)))?;
            let v = Tensor::<S>::read_snapshot(&mut r).map_err(|e| bad(format!("bn var {}: {}", bi, e)))?;
            if m.numel() != net.bn_running[bi].0.len() || v.numel() != net.bn_running[bi].1.len() {
                return Err(bad(format!("bn stats {} have wrong extent", bi)));
            }
            net.bn_running[bi] = (m.values().to_vec(), v.values().to_vec());
        }
        Ok(net)
    }
}

/// Bilinear resample to `side`×`side` and standardize each patch:
/// subtract its mean, divide by `max(std, 1e-6)`. Output `[B, 1, side, side]`.
pub fn preprocess_patches<S: Scalar>(patches: &[Patch], side: usize) -> Result<Tensor<S>> {
    if patches.is_empty() {
        return Err(Error::EmptyBatch("preprocess_patches"));
    }
    let src_side = patches[0].side();
    let mut values = Vec::with_capacity(patches.len() * side * side);
    for patch in patches {
        if patch.side() != src_side || patch.side() < 2 {
            return Err(Error::WrongPatchSize { expected: src_side, got: patch.side() });
        }
        let resampled = resample_bilinear(patch, side);
        let n = S::from_f64((side * side) as f64);
        let mean = resampled.iter().copied().sum::<S>() / n;
        let var = resampled.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let std = var.sqrt().max(S::from_f64(STD_FLOOR));
        values.extend(resampled.iter().map(|&v| (v - mean) / std));
    }
    Tensor::new(vec![patches.len(), 1, side, side], values)
}

fn resample_bilinear<S: Scalar>(patch: &Patch, side: usize) -> Vec<S> {
    let src = patch.side();
    let scale = src as f64 / side as f64;
    let max = (src - 1) as f64;
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src - 1);
        let fy = sy - y0 as f64;
        for ox in 0..side {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let fx = sx - x0 as f64;
            let v00 = patch.intensity(y0, x0) as f64;
            let v10 = patch.intensity(y0, x1) as f64;
            let v01 = patch.intensity(y1, x0) as f64;
            let v11 = patch.intensity(y1, x1) as f64;
            let v = v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy;
            out.push(S::from_f64(v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_store, SynthMode};

    fn toy_config(seed: u64) -> NetConfig {
        NetConfig::toy(seed).with_descriptor_dim(4)
    }

    fn test_patches(n: usize) -> Vec<Patch> {
        let store = synth_store(99, n.max(2), 2, SynthMode::Both).unwrap();
        store.tracks.iter().take(n).map(|t| t.members[0].patch.clone()).collect()
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a = Network::<f32>::init(toy_config(7)).unwrap();
        let b = Network::<f32>::init(toy_config(7)).unwrap();
        assert_eq!(a.params_fingerprint(), b.params_fingerprint());
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.values(), pb.values());
        }
    }

    #[test]
    fn toy_plan_stays_under_ten_thousand_parameters() {
        let net = Network::<f32>::init(toy_config(1)).unwrap();
        assert!(net.param_count() < 10_000, "{} parameters", net.param_count());
        let patches = test_patches(3);
        let desc = net.describe_eval(&patches).unwrap();
        assert_eq!(desc.count(), 3);
        assert_eq!(desc.dim(), 4);
    }

    #[test]
    fn indivisible_input_side_is_rejected() {
        let mut cfg = toy_config(1);
        cfg.input_side = 30; // two stride-2 stages need a multiple of 4
        assert!(matches!(Network::<f32>::init(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn identical_patches_get_identical_rows() {
        let net = Network::<f64>::init(toy_config(3)).unwrap();
        let patch = test_patches(1).remove(0);
        let batch = vec![patch.clone(), patch.clone(), patch];
        let desc = net.describe_eval(&batch).unwrap();
        assert_eq!(desc.row(0), desc.row(1));
        assert_eq!(desc.row(0), desc.row(2));
    }

    #[test]
    fn descriptor_rows_are_unit_norm() {
        let net = Network::<f64>::init(toy_config(5)).unwrap();
        let desc = net.describe_eval(&test_patches(6)).unwrap();
        for i in 0..desc.count() {
            assert!((desc.row_norm(i) - 1.0).abs() < 1e-6, "row {} norm {}", i, desc.row_norm(i));
        }
    }

    #[test]
    fn describe_leaves_parameters_untouched() {
        let mut net = Network::<f32>::init(toy_config(11)).unwrap();
        let before = net.params_fingerprint();
        let patches = test_patches(4);
        net.describe(&patches, true).unwrap();
        net.describe(&patches, true).unwrap();
        assert_eq!(net.params_fingerprint(), before);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = Network::<f32>::init(toy_config(13)).unwrap();
        // Move the running stats off their init values first.
        net.describe(&test_patches(4), true).unwrap();
        net.save_checkpoint(&path).unwrap();
        let back = Network::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.params_fingerprint(), net.params_fingerprint());
        let patches = test_patches(3);
        assert_eq!(
            back.describe_eval(&patches).unwrap().rows(),
            net.describe_eval(&patches).unwrap().rows()
        );
    }

    #[test]
    fn eval_mode_is_batch_size_invariant() {
        let net = Network::<f64>::init(toy_config(17)).unwrap();
        let patches = test_patches(5);
        let all = net.describe_eval(&patches).unwrap();
        let solo = net.describe_eval(&patches[2..3]).unwrap();
        for (a, b) in all.row(2).iter().zip(solo.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
