//! Online adaptation engine: per-batch sample selection, loss assembly for
//! the entropy-based and consistency-based objectives, the restricted SGD
//! update on normalization affine parameters, scenario reset semantics,
//! and forward/backward accounting.

use crate::error::{Result, TtaError};
use crate::fisher::{regularizer_on_tape, FisherMap};
use crate::metrics::{
    forgetting_probe, BatchRecord, EceAccumulator, LossBreakdown, ProbeRecord, RunReport,
    DEFAULT_ECE_BINS,
};
use crate::network::{Model, ParamKey, StatsMode, SubNetworkMask, TrackSet};
use crate::optim::SgdMomentum;
use crate::selection::{
    combined_score_eata, combined_score_eatac, update_moving_average, SelectionConfig,
    SelectionState,
};
use crate::tape::{Grads, NodeId, Tape};
use crate::tensor::{argmax, softmax_rows, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Frozen model, frozen statistics.
    Source,
    /// Current-batch normalization statistics, no parameter updates.
    NormStats,
    /// Entropy minimization on every sample (no selection, no anchor).
    EntropyOnly,
    /// Entropy minimization on selected samples.
    Eta,
    /// Entropy minimization on selected samples plus the Fisher anchor.
    Eata,
    /// Consistency + min-max entropy on selected samples.
    EtaC,
    /// Consistency + min-max entropy plus the Fisher anchor.
    EataC,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Source,
        Method::NormStats,
        Method::EntropyOnly,
        Method::Eta,
        Method::Eata,
        Method::EtaC,
        Method::EataC,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::NormStats => "norm-stats",
            Method::EntropyOnly => "entropy-only",
            Method::Eta => "eta",
            Method::Eata => "eata",
            Method::EtaC => "eta-c",
            Method::EataC => "eata-c",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                TtaError::invalid(format!(
                    "unknown method '{s}', expected one of: {}",
                    Method::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }

    /// Consistency-family methods drive a sub-network pass.
    pub fn is_consistency(&self) -> bool {
        matches!(self, Method::EtaC | Method::EataC)
    }

    pub fn adapts(&self) -> bool {
        !matches!(self, Method::Source | Method::NormStats)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Restore the checkpoint, optimizer state, and tracker after every batch.
    Episodic,
    /// Reset at every domain boundary in the stream.
    SingleDomain,
    /// Never reset.
    Lifelong,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Episodic, Scenario::SingleDomain, Scenario::Lifelong];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Episodic => "episodic",
            Scenario::SingleDomain => "single-domain",
            Scenario::Lifelong => "lifelong",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                TtaError::invalid(format!(
                    "unknown scenario '{s}', expected one of: {}",
                    Scenario::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    /// Fisher anchor trade-off; forced to zero for methods without the anchor.
    pub beta: f64,
    /// Min-max entropy factor of the consistency objective.
    pub alpha_reg: f64,
    /// Fusion smoothing constant; defaults to `p_drop` when absent.
    pub p_smooth: Option<f64>,
    /// Stochastic-depth drop ratio for sub-network sampling.
    pub p_drop: f64,
    pub selection: SelectionConfig,
    pub scenario: Scenario,
    pub steps_per_batch: usize,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn new(method: Method, n_classes: usize) -> Self {
        AdaptConfig {
            method,
            lr: 0.01,
            momentum: 0.9,
            beta: 1.0,
            alpha_reg: 0.1,
            p_smooth: None,
            p_drop: 0.2,
            selection: SelectionConfig::for_classes(n_classes),
            scenario: Scenario::SingleDomain,
            steps_per_batch: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(TtaError::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TtaError::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.beta < 0.0 {
            return Err(TtaError::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.alpha_reg < 0.0 {
            return Err(TtaError::invalid(format!(
                "alpha_reg must be >= 0, got {}",
                self.alpha_reg
            )));
        }
        if let Some(p) = self.p_smooth {
            if !(0.0..=1.0).contains(&p) {
                return Err(TtaError::invalid(format!(
                    "p_smooth must be in [0, 1], got {p}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(TtaError::invalid(format!(
                "p_drop must be in [0, 1), got {}",
                self.p_drop
            )));
        }
        if self.steps_per_batch == 0 {
            return Err(TtaError::invalid("steps_per_batch must be >= 1"));
        }
        self.selection.validate()
    }

    /// The anchor weight actually applied: only the anchored methods use it.
    pub fn effective_beta(&self) -> f64 {
        match self.method {
            Method::Eata | Method::EataC => self.beta,
            _ => 0.0,
        }
    }

    pub fn smoothing(&self) -> f64 {
        self.p_smooth.unwrap_or(self.p_drop)
    }
}

/// Per-batch results and accounting. Forward/backward counts follow the
/// per-sample convention: one backward per selected sample per step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Full-network argmax per sample, from the pre-update forward.
    pub predictions: Vec<usize>,
    /// Max softmax probability per sample.
    pub confidences: Vec<f64>,
    /// Distinct samples selected in at least one step.
    pub selected: usize,
    pub forwards: u64,
    pub backwards: u64,
    pub losses: LossBreakdown,
    /// (row, sub-network argmax) for samples that got a sub-network pass.
    pub sub_predictions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub inputs: Tensor,
    /// Ground truth, used only for metrics; adaptation never sees it.
    pub labels: Vec<usize>,
    pub domain: String,
}

#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Probe every this many batches (0 = endpoints only).
    pub cadence: usize,
}

pub struct AdaptEngine {
    cfg: AdaptConfig,
    model: Model,
    pristine: Model,
    fisher: Option<FisherMap>,
    opt: SgdMomentum,
    sel: SelectionState,
    mask_rng: ChaCha8Rng,
}

impl AdaptEngine {
    pub fn new(model: Model, fisher: Option<FisherMap>, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.effective_beta() > 0.0 {
            match &fisher {
                None => {
                    return Err(TtaError::invalid(format!(
                        "method {} with beta {} requires a fisher map",
                        cfg.method, cfg.beta
                    )))
                }
                Some(f) => f.check_layout(&model)?,
            }
        }
        let opt = SgdMomentum::new(&model, model.adaptable_parameters(), cfg.lr, cfg.momentum)?;
        let mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(AdaptEngine {
            pristine: model.clone(),
            model,
            fisher,
            opt,
            sel: SelectionState::new(),
            cfg,
            mask_rng,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn pristine(&self) -> &Model {
        &self.pristine
    }

    pub fn selection_state(&self) -> &SelectionState {
        &self.sel
    }

    /// Restore the checkpoint, zero the optimizer, forget the tracker.
    pub fn reset(&mut self) {
        self.model = self.pristine.clone();
        self.opt.reset();
        self.sel = SelectionState::new();
    }

    pub fn process_batch(&mut self, batch: &Tensor) -> Result<BatchOutcome> {
        match self.cfg.method {
            Method::Source => self.forward_only(batch, StatsMode::Running),
            Method::NormStats => self.forward_only(batch, StatsMode::Batch),
            Method::EntropyOnly | Method::Eta | Method::Eata => self.adapt_entropy(batch),
            Method::EtaC | Method::EataC => self.adapt_consistency(batch),
        }
    }

    fn forward_only(&mut self, batch: &Tensor, stats: StatsMode) -> Result<BatchOutcome> {
        let logits = self.model.predict(batch, None, stats)?;
        let probs = softmax_rows(&logits);
        let (predictions, confidences) = predictions_of(&probs);
        Ok(BatchOutcome {
            predictions,
            confidences,
            selected: 0,
            forwards: batch.rows() as u64,
            backwards: 0,
            losses: LossBreakdown::default(),
            sub_predictions: Vec::new(),
        })
    }

    /// Order tape gradients by the optimizer's parameter layout.
    fn ordered_grads(
        &self,
        bindings: &[(ParamKey, NodeId)],
        grads: &mut Grads,
    ) -> Vec<Option<Tensor>> {
        self.opt
            .keys()
            .iter()
            .map(|key| {
                bindings
                    .iter()
                    .find(|(k, _)| k == key)
                    .and_then(|(_, node)| grads.take(*node))
            })
            .collect()
    }

    fn adapt_entropy(&mut self, batch: &Tensor) -> Result<BatchOutcome> {
        let b = batch.rows();
        let adaptable = self.model.adaptable_parameters();
        let mut predictions = Vec::new();
        let mut confidences = Vec::new();
        let mut ever_selected = vec![false; b];
        let mut forwards = 0u64;
        let mut backwards = 0u64;
        let mut losses = LossBreakdown::default();

        for step in 0..self.cfg.steps_per_batch {
            let mut tape = Tape::new();
            let trace = self.model.forward_on_tape(
                &mut tape,
                batch,
                None,
                StatsMode::Batch,
                TrackSet::Adaptable,
            )?;
            let probs_node = tape.softmax(trace.logits)?;
            let probs = tape.value(probs_node).clone();
            forwards += b as u64;
            if step == 0 {
                let (p, c) = predictions_of(&probs);
                predictions = p;
                confidences = c;
            }

            let mut weights = vec![0.0; b];
            for r in 0..b {
                weights[r] = if self.cfg.method == Method::EntropyOnly {
                    1.0
                } else {
                    combined_score_eata(probs.row(r), &self.sel, &self.cfg.selection)?
                };
            }
            let sel_rows: Vec<usize> = (0..b).filter(|&r| weights[r] > 0.0).collect();
            if sel_rows.is_empty() {
                break;
            }
            for &r in &sel_rows {
                ever_selected[r] = true;
            }
            let n_sel = sel_rows.len();

            let ent = tape.entropy(probs_node)?;
            let w = tape.constant(Tensor::new(vec![b], weights)?)?;
            let weighted = tape.mul(ent, w)?;
            let total = tape.sum(weighted)?;
            let data = tape.scale(total, 1.0 / n_sel as f64)?;
            let mut loss = data;
            let beta = self.cfg.effective_beta();
            let mut reg_value = 0.0;
            if beta > 0.0 {
                let fisher = self.fisher.as_ref().expect("checked at construction");
                let reg = regularizer_on_tape(&mut tape, &trace.bindings, &adaptable, fisher)?;
                reg_value = tape.value(reg).data()[0];
                let scaled = tape.scale(reg, beta)?;
                loss = tape.add(data, scaled)?;
            }
            if step == 0 {
                losses = LossBreakdown {
                    entropy: tape.value(data).data()[0],
                    consistency: 0.0,
                    min_max: 0.0,
                    regularizer: reg_value,
                    total: tape.value(loss).data()[0],
                };
            }

            let mut grads = tape.backward(loss)?;
            let ordered = self.ordered_grads(&trace.bindings, &mut grads);
            self.opt.step(&mut self.model, &ordered)?;
            backwards += n_sel as u64;

            if self.cfg.method != Method::EntropyOnly {
                let sel_probs = probs.select_rows(&sel_rows)?;
                update_moving_average(&mut self.sel, &sel_probs, &self.cfg.selection)?;
            }
        }

        Ok(BatchOutcome {
            predictions,
            confidences,
            selected: ever_selected.iter().filter(|&&s| s).count(),
            forwards,
            backwards,
            losses,
            sub_predictions: Vec::new(),
        })
    }

    fn adapt_consistency(&mut self, batch: &Tensor) -> Result<BatchOutcome> {
        let b = batch.rows();
        let adaptable = self.model.adaptable_parameters();
        let p = self.cfg.smoothing();
        // One sub-network draw per batch, shared across steps.
        let mask_seed = self.mask_rng.gen::<u64>();
        let mask = SubNetworkMask::sample(self.model.n_blocks(), self.cfg.p_drop, mask_seed)?;

        let mut predictions = Vec::new();
        let mut confidences = Vec::new();
        let mut sub_predictions = Vec::new();
        let mut ever_selected = vec![false; b];
        let mut forwards = 0u64;
        let mut backwards = 0u64;
        let mut losses = LossBreakdown::default();

        for step in 0..self.cfg.steps_per_batch {
            // Gradient-free full-network pass: predictions and selection.
            let logits = self.model.predict(batch, None, StatsMode::Batch)?;
            let full_probs = softmax_rows(&logits);
            forwards += b as u64;
            let (full_preds, confs) = predictions_of(&full_probs);
            if step == 0 {
                predictions = full_preds.clone();
                confidences = confs;
            }

            let mut sel_rows = Vec::new();
            for r in 0..b {
                if combined_score_eatac(full_probs.row(r), &self.sel, &self.cfg.selection)? > 0.0 {
                    sel_rows.push(r);
                }
            }
            if sel_rows.is_empty() {
                break;
            }
            for &r in &sel_rows {
                ever_selected[r] = true;
            }
            let n_sel = sel_rows.len();

            // Gradient-tracked sub-network pass on the selected samples only.
            let sub_batch = batch.select_rows(&sel_rows)?;
            let mut tape = Tape::new();
            let trace = self.model.forward_on_tape(
                &mut tape,
                &sub_batch,
                Some(&mask),
                StatsMode::Batch,
                TrackSet::Adaptable,
            )?;
            let sub_probs_node = tape.softmax(trace.logits)?;
            let sub_probs = tape.value(sub_probs_node).clone();
            forwards += n_sel as u64;

            let mut signs = Vec::with_capacity(n_sel);
            for (i, &r) in sel_rows.iter().enumerate() {
                let sp = argmax(sub_probs.row(i));
                if step == 0 {
                    sub_predictions.push((r, sp));
                }
                signs.push(if sp == full_preds[r] { 1.0 } else { -1.0 });
            }

            // Fused target: (full + (1-p)·sub) / (2-p), full detached by
            // entering the tape as a constant.
            let full_sel = tape.constant(full_probs.select_rows(&sel_rows)?)?;
            let sub_scaled = tape.scale(sub_probs_node, 1.0 - p)?;
            let mixed = tape.add(full_sel, sub_scaled)?;
            let fuse = tape.scale(mixed, 1.0 / (2.0 - p))?;

            let kl = tape.kl_divergence(sub_probs_node, fuse)?;
            let ent = tape.entropy(sub_probs_node)?;
            let sign_w = tape.constant(Tensor::new(
                vec![n_sel],
                signs.iter().map(|s| s * self.cfg.alpha_reg).collect(),
            )?)?;
            let signed_ent = tape.mul(ent, sign_w)?;
            let per_row = tape.add(kl, signed_ent)?;
            let data = tape.mean(per_row)?;

            let mut loss = data;
            let beta = self.cfg.effective_beta();
            let mut reg_value = 0.0;
            if beta > 0.0 {
                let fisher = self.fisher.as_ref().expect("checked at construction");
                let reg = regularizer_on_tape(&mut tape, &trace.bindings, &adaptable, fisher)?;
                reg_value = tape.value(reg).data()[0];
                let scaled = tape.scale(reg, beta)?;
                loss = tape.add(data, scaled)?;
            }
            if step == 0 {
                let mean_of = |id: NodeId| {
                    let v = tape.value(id);
                    v.data().iter().sum::<f64>() / v.numel() as f64
                };
                losses = LossBreakdown {
                    entropy: 0.0,
                    consistency: mean_of(kl),
                    min_max: mean_of(signed_ent),
                    regularizer: reg_value,
                    total: tape.value(loss).data()[0],
                };
            }

            let mut grads = tape.backward(loss)?;
            let ordered = self.ordered_grads(&trace.bindings, &mut grads);
            self.opt.step(&mut self.model, &ordered)?;
            backwards += n_sel as u64;

            let sel_full = full_probs.select_rows(&sel_rows)?;
            update_moving_average(&mut self.sel, &sel_full, &self.cfg.selection)?;
        }

        Ok(BatchOutcome {
            predictions,
            confidences,
            selected: ever_selected.iter().filter(|&&s| s).count(),
            forwards,
            backwards,
            losses,
            sub_predictions,
        })
    }

    /// Consume an ordered stream of batches under the configured scenario
    /// and accumulate the run report. Probes evaluate clean accuracy on
    /// frozen parameters at the configured cadence plus both endpoints.
    pub fn run_stream(
        &mut self,
        stream: &[StreamBatch],
        probe: Option<&ProbeSpec>,
    ) -> Result<RunReport> {
        let mut ece = EceAccumulator::new(DEFAULT_ECE_BINS)?;
        let mut batches = Vec::with_capacity(stream.len());
        let mut trajectory = Vec::new();
        if let Some(p) = probe {
            trajectory.push(ProbeRecord {
                after_batch: 0,
                clean_accuracy: forgetting_probe(&self.model, &p.inputs, &p.labels)?,
            });
        }

        let mut prev_domain: Option<&str> = None;
        for (i, sb) in stream.iter().enumerate() {
            if sb.labels.len() != sb.inputs.rows() {
                return Err(TtaError::LayoutMismatch {
                    what: format!(
                        "batch {i}: {} labels for {} rows",
                        sb.labels.len(),
                        sb.inputs.rows()
                    ),
                });
            }
            if self.cfg.scenario == Scenario::SingleDomain {
                if let Some(prev) = prev_domain {
                    if prev != sb.domain {
                        self.reset();
                    }
                }
            }
            prev_domain = Some(&sb.domain);

            let outcome = self.process_batch(&sb.inputs).map_err(|e| match e {
                TtaError::NonFinite { op, context } => TtaError::NonFinite {
                    op,
                    context: format!("{context} (batch {i})"),
                },
                other => other,
            })?;

            let mut correct = 0usize;
            for (r, &y) in sb.labels.iter().enumerate() {
                let ok = outcome.predictions[r] == y;
                if ok {
                    correct += 1;
                }
                ece.add(outcome.confidences[r], ok)?;
            }
            let mean_confidence =
                outcome.confidences.iter().sum::<f64>() / outcome.confidences.len().max(1) as f64;
            let mut uncertain = 0usize;
            let mut sub_wrong = 0usize;
            for &(row, sp) in &outcome.sub_predictions {
                if sp != outcome.predictions[row] {
                    uncertain += 1;
                    if sp != sb.labels[row] {
                        sub_wrong += 1;
                    }
                }
            }
            batches.push(BatchRecord {
                index: i,
                domain: sb.domain.clone(),
                correct,
                total: sb.labels.len(),
                mean_confidence,
                selected: outcome.selected,
                forwards: outcome.forwards,
                backwards: outcome.backwards,
                losses: outcome.losses,
                uncertain,
                sub_wrong,
            });

            if self.cfg.scenario == Scenario::Episodic {
                self.reset();
            }
            if let Some(p) = probe {
                if p.cadence > 0 && (i + 1) % p.cadence == 0 {
                    trajectory.push(ProbeRecord {
                        after_batch: i + 1,
                        clean_accuracy: forgetting_probe(&self.model, &p.inputs, &p.labels)?,
                    });
                }
            }
        }

        if let Some(p) = probe {
            if trajectory.last().map(|t| t.after_batch) != Some(stream.len()) {
                trajectory.push(ProbeRecord {
                    after_batch: stream.len(),
                    clean_accuracy: forgetting_probe(&self.model, &p.inputs, &p.labels)?,
                });
            }
        }

        RunReport::assemble(
            self.cfg.method.to_string(),
            self.cfg.scenario.to_string(),
            self.cfg.seed,
            serde_json::to_value(&self.cfg)?,
            batches,
            &ece,
            trajectory,
        )
    }
}

fn predictions_of(probs: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let mut preds = Vec::with_capacity(probs.rows());
    let mut confs = Vec::with_capacity(probs.rows());
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let p = argmax(row);
        preds.push(p);
        confs.push(row[p]);
    }
    (preds, confs)
}
