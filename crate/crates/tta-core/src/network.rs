//! The classifier under adaptation: input projection, residual MLP blocks
//! with learnable-affine normalization, and a linear head.
//!
//! Only the normalization affine parameters (gamma, beta) are adaptable at
//! test time; everything else stays frozen. Stochastic depth drops whole
//! residual branches to identity, which is also how sub-networks are
//! sampled for consistency-based adaptation.

use crate::error::{Result, TtaError};
use crate::tape::{NodeId, NormStats, Tape};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    BatchNorm,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
    pub n_classes: usize,
    pub norm_mode: NormMode,
    pub eps: f64,
}

impl ArchConfig {
    pub fn new(input_dim: usize, n_classes: usize, norm_mode: NormMode) -> Self {
        ArchConfig {
            input_dim,
            hidden_width: 64,
            n_blocks: 8,
            n_classes,
            norm_mode,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.n_classes < 2 {
            return Err(TtaError::invalid(format!(
                "degenerate architecture: d={}, h={}, C={}",
                self.input_dim, self.hidden_width, self.n_classes
            )));
        }
        Ok(())
    }
}

/// Normalization layer with learnable affine; running statistics are only
/// consulted in batch-norm mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl NormLayer {
    fn new(width: usize) -> Self {
        NormLayer {
            gamma: Tensor::full(vec![width], 1.0),
            beta: Tensor::zeros(vec![width]),
            running_mean: Tensor::zeros(vec![width]),
            running_var: Tensor::full(vec![width], 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: NormLayer,
}

/// Per-block keep/drop decisions for one stochastic-depth draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubNetworkMask {
    keep: Vec<bool>,
}

impl SubNetworkMask {
    /// Independent per-block drops with probability `p_drop`, deterministic
    /// under the seed.
    pub fn sample(n_blocks: usize, p_drop: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(TtaError::invalid(format!(
                "p_drop must be in [0, 1), got {p_drop}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = (0..n_blocks).map(|_| rng.gen::<f64>() >= p_drop).collect();
        Ok(SubNetworkMask { keep })
    }

    pub fn all_keep(n_blocks: usize) -> Self {
        SubNetworkMask {
            keep: vec![true; n_blocks],
        }
    }

    pub fn all_drop(n_blocks: usize) -> Self {
        SubNetworkMask {
            keep: vec![false; n_blocks],
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }
}

/// Identifies one parameter tensor of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    ProjWeight,
    ProjBias,
    BlockWeight(usize),
    BlockBias(usize),
    Gamma(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
}

impl ParamKey {
    pub fn is_adaptable(&self) -> bool {
        matches!(self, ParamKey::Gamma(_) | ParamKey::Beta(_))
    }
}

/// Which leaves a forward pass registers as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackSet {
    None,
    Adaptable,
    All,
}

/// Statistics source for batch-norm layers during a forward pass.
/// Layer-norm always normalizes per sample and ignores this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Current-batch statistics (adaptation mode); running estimates are
    /// left untouched.
    Batch,
    /// Frozen running statistics (deployment / probe mode).
    Running,
}

/// Node handles produced by one forward pass.
pub struct Trace {
    pub logits: NodeId,
    /// Parameter leaves registered as trainable, in registry order.
    pub bindings: Vec<(ParamKey, NodeId)>,
    /// Normalization node per kept block, for running-stat maintenance.
    pub norm_nodes: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: ArchConfig,
    proj_weight: Tensor,
    proj_bias: Tensor,
    blocks: Vec<ResidualBlock>,
    head_weight: Tensor,
    head_bias: Tensor,
    seed_lineage: Vec<u64>,
}

fn he_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

impl Model {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (arch.input_dim, arch.hidden_width);
        let proj_weight = he_normal(&mut rng, d, h, d);
        let blocks = (0..arch.n_blocks)
            .map(|_| ResidualBlock {
                weight: he_normal(&mut rng, h, h, h),
                bias: Tensor::zeros(vec![h]),
                norm: NormLayer::new(h),
            })
            .collect();
        let head_weight = he_normal(&mut rng, h, arch.n_classes, h);
        let head_bias = Tensor::zeros(vec![arch.n_classes]);
        Ok(Model {
            arch,
            proj_weight,
            proj_bias: Tensor::zeros(vec![h]),
            blocks,
            head_weight,
            head_bias,
            seed_lineage: vec![seed],
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    pub fn record_seed(&mut self, seed: u64) {
        self.seed_lineage.push(seed);
    }

    // ── Parameter registry ──────────────────────────────────────────────

    /// Every parameter tensor, in a stable order.
    pub fn all_parameters(&self) -> Vec<ParamKey> {
        let mut keys = vec![ParamKey::ProjWeight, ParamKey::ProjBias];
        for i in 0..self.blocks.len() {
            keys.push(ParamKey::BlockWeight(i));
            keys.push(ParamKey::BlockBias(i));
            keys.push(ParamKey::Gamma(i));
            keys.push(ParamKey::Beta(i));
        }
        keys.push(ParamKey::HeadWeight);
        keys.push(ParamKey::HeadBias);
        keys
    }

    /// The adaptable subset: gamma and beta of every normalization layer,
    /// in block order. This order is shared by the optimizer and the
    /// Fisher importance map.
    pub fn adaptable_parameters(&self) -> Vec<ParamKey> {
        let mut keys = Vec::with_capacity(2 * self.blocks.len());
        for i in 0..self.blocks.len() {
            keys.push(ParamKey::Gamma(i));
            keys.push(ParamKey::Beta(i));
        }
        keys
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::ProjWeight => &self.proj_weight,
            ParamKey::ProjBias => &self.proj_bias,
            ParamKey::BlockWeight(i) => &self.blocks[i].weight,
            ParamKey::BlockBias(i) => &self.blocks[i].bias,
            ParamKey::Gamma(i) => &self.blocks[i].norm.gamma,
            ParamKey::Beta(i) => &self.blocks[i].norm.beta,
            ParamKey::HeadWeight => &self.head_weight,
            ParamKey::HeadBias => &self.head_bias,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::ProjWeight => &mut self.proj_weight,
            ParamKey::ProjBias => &mut self.proj_bias,
            ParamKey::BlockWeight(i) => &mut self.blocks[i].weight,
            ParamKey::BlockBias(i) => &mut self.blocks[i].bias,
            ParamKey::Gamma(i) => &mut self.blocks[i].norm.gamma,
            ParamKey::Beta(i) => &mut self.blocks[i].norm.beta,
            ParamKey::HeadWeight => &mut self.head_weight,
            ParamKey::HeadBias => &mut self.head_bias,
        }
    }

    pub fn norm_layer(&self, block: usize) -> &NormLayer {
        &self.blocks[block].norm
    }

    // ── Forward ─────────────────────────────────────────────────────────

    fn leaf(
        &self,
        tape: &mut Tape,
        key: ParamKey,
        track: TrackSet,
        bindings: &mut Vec<(ParamKey, NodeId)>,
    ) -> Result<NodeId> {
        let trainable = match track {
            TrackSet::None => false,
            TrackSet::Adaptable => key.is_adaptable(),
            TrackSet::All => true,
        };
        let value = self.param(key).clone();
        if trainable {
            let id = tape.trainable(value)?;
            bindings.push((key, id));
            Ok(id)
        } else {
            tape.constant(value)
        }
    }

    fn norm_stats(&self, block: usize, stats: StatsMode) -> NormStats {
        match (self.arch.norm_mode, stats) {
            (NormMode::LayerNorm, _) => NormStats::PerRow,
            (NormMode::BatchNorm, StatsMode::Batch) => NormStats::PerBatch,
            (NormMode::BatchNorm, StatsMode::Running) => NormStats::Fixed {
                mean: self.blocks[block].norm.running_mean.data().to_vec(),
                var: self.blocks[block].norm.running_var.data().to_vec(),
            },
        }
    }

    /// Build the forward graph for a batch on the given tape. Dropped
    /// blocks contribute exactly their input.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        mask: Option<&SubNetworkMask>,
        stats: StatsMode,
        track: TrackSet,
    ) -> Result<Trace> {
        if batch.shape().len() != 2 || batch.cols() != self.arch.input_dim {
            return Err(TtaError::ShapeMismatch {
                op: "forward",
                expected: format!("[B, {}]", self.arch.input_dim),
                got: format!("{:?}", batch.shape()),
            });
        }
        if let Some(m) = mask {
            if m.keep().len() != self.blocks.len() {
                return Err(TtaError::LayoutMismatch {
                    what: format!(
                        "mask covers {} blocks, model has {}",
                        m.keep().len(),
                        self.blocks.len()
                    ),
                });
            }
        }

        let mut bindings = Vec::new();
        let mut norm_nodes = Vec::new();
        let x = tape.constant(batch.clone())?;
        let pw = self.leaf(tape, ParamKey::ProjWeight, track, &mut bindings)?;
        let pb = self.leaf(tape, ParamKey::ProjBias, track, &mut bindings)?;
        let xw = tape.matmul(x, pw)?;
        let mut h = tape.add(xw, pb)?;

        for i in 0..self.blocks.len() {
            if let Some(m) = mask {
                if !m.keep()[i] {
                    continue;
                }
            }
            let w = self.leaf(tape, ParamKey::BlockWeight(i), track, &mut bindings)?;
            let b = self.leaf(tape, ParamKey::BlockBias(i), track, &mut bindings)?;
            let gamma = self.leaf(tape, ParamKey::Gamma(i), track, &mut bindings)?;
            let beta = self.leaf(tape, ParamKey::Beta(i), track, &mut bindings)?;
            let hw = tape.matmul(h, w)?;
            let lin = tape.add(hw, b)?;
            let normed = tape.normalization(lin, gamma, beta, self.norm_stats(i, stats), self.arch.eps)?;
            norm_nodes.push((i, normed));
            let act = tape.relu(normed)?;
            h = tape.add(h, act)?;
        }

        let hw = self.leaf(tape, ParamKey::HeadWeight, track, &mut bindings)?;
        let hb = self.leaf(tape, ParamKey::HeadBias, track, &mut bindings)?;
        let hm = tape.matmul(h, hw)?;
        let logits = tape.add(hm, hb)?;
        Ok(Trace {
            logits,
            bindings,
            norm_nodes,
        })
    }

    /// Logits for a batch without gradient bookkeeping.
    pub fn predict(
        &self,
        batch: &Tensor,
        mask: Option<&SubNetworkMask>,
        stats: StatsMode,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, batch, mask, stats, TrackSet::None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Training-mode forward: batch-norm layers normalize with current
    /// batch statistics and fold them into the running estimates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
        mask: Option<&SubNetworkMask>,
        stat_momentum: f64,
    ) -> Result<Trace> {
        let trace = self.forward_on_tape(tape, batch, mask, StatsMode::Batch, TrackSet::All)?;
        if self.arch.norm_mode == NormMode::BatchNorm {
            for &(block, node) in &trace.norm_nodes {
                if let Some((mean, var)) = tape.norm_batch_stats(node) {
                    let (mean, var) = (mean.to_vec(), var.to_vec());
                    let norm = &mut self.blocks[block].norm;
                    for (rm, m) in norm.running_mean.data_mut().iter_mut().zip(&mean) {
                        *rm = (1.0 - stat_momentum) * *rm + stat_momentum * m;
                    }
                    for (rv, v) in norm.running_var.data_mut().iter_mut().zip(&var) {
                        *rv = (1.0 - stat_momentum) * *rv + stat_momentum * v;
                    }
                }
            }
        }
        Ok(trace)
    }

    // ── Checkpoint container ────────────────────────────────────────────

    pub fn save_checkpoint<W: std::io::Write>(&self, w: W) -> Result<()> {
        let ck = Checkpoint {
            schema_version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(w, &ck)?;
        Ok(())
    }

    pub fn load_checkpoint<R: std::io::Read>(r: R) -> Result<Model> {
        let ck: Checkpoint = serde_json::from_reader(r)?;
        if ck.schema_version != CHECKPOINT_VERSION {
            return Err(TtaError::invalid(format!(
                "unsupported checkpoint schema version {}",
                ck.schema_version
            )));
        }
        ck.model.arch.validate()?;
        Ok(ck.model)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.save_checkpoint(&mut buf)?;
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    model: Model,
}
