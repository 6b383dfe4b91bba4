//! Diagonal Fisher importance of the adaptable parameters, estimated from
//! pseudo-labeled in-distribution samples, and the quadratic anchoring
//! regularizer built from it.

use crate::error::{Result, TtaError};
use crate::network::{Model, ParamKey, StatsMode, TrackSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};

pub const FISHER_VERSION: u32 = 1;

/// Per-scalar importance and anchor values, aligned with
/// `Model::adaptable_parameters` order. Immutable once estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherMap {
    omega: Vec<Tensor>,
    anchor: Vec<Tensor>,
    sample_count: usize,
}

impl FisherMap {
    pub fn omega(&self) -> &[Tensor] {
        &self.omega
    }

    pub fn anchor(&self) -> &[Tensor] {
        &self.anchor
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn check_layout(&self, model: &Model) -> Result<()> {
        let keys = model.adaptable_parameters();
        if keys.len() != self.omega.len() || keys.len() != self.anchor.len() {
            return Err(TtaError::LayoutMismatch {
                what: format!(
                    "fisher map holds {} tensors, model has {} adaptable parameters",
                    self.omega.len(),
                    keys.len()
                ),
            });
        }
        for (i, &k) in keys.iter().enumerate() {
            if self.omega[i].shape() != model.param(k).shape()
                || self.anchor[i].shape() != model.param(k).shape()
            {
                return Err(TtaError::LayoutMismatch {
                    what: format!("fisher tensor {i} does not match {k:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        let file = FisherFile {
            schema_version: FISHER_VERSION,
            map: self.clone(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<FisherMap> {
        let file: FisherFile = serde_json::from_reader(r)?;
        if file.schema_version != FISHER_VERSION {
            return Err(TtaError::invalid(format!(
                "unsupported fisher schema version {}",
                file.schema_version
            )));
        }
        Ok(file.map)
    }
}

#[derive(Serialize, Deserialize)]
struct FisherFile {
    schema_version: u32,
    map: FisherMap,
}

/// Estimate per-scalar importance as the mean of squared per-sample
/// cross-entropy gradients under hard pseudo-labels. Normalization layers
/// run on their running statistics; the model is left untouched.
pub fn estimate_fisher(model: &Model, id_samples: &Tensor) -> Result<FisherMap> {
    let q = id_samples.rows();
    if q == 0 || id_samples.numel() == 0 {
        return Err(TtaError::EmptyInput {
            what: "estimate_fisher: no ID samples",
        });
    }
    let keys = model.adaptable_parameters();
    let mut omega: Vec<Tensor> = keys
        .iter()
        .map(|&k| Tensor::zeros(model.param(k).shape().to_vec()))
        .collect();

    for r in 0..q {
        let row = Tensor::new(vec![1, id_samples.cols()], id_samples.row(r).to_vec())?;
        let mut tape = Tape::new();
        let trace =
            model.forward_on_tape(&mut tape, &row, None, StatsMode::Running, TrackSet::Adaptable)?;
        let pseudo = argmax(tape.value(trace.logits).row(0));
        let loss = tape.softmax_cross_entropy(trace.logits, &[pseudo])?;
        let mut grads = tape.backward(loss)?;
        for (key, node) in &trace.bindings {
            let idx = keys
                .iter()
                .position(|k| k == key)
                .expect("binding outside adaptable set");
            if let Some(g) = grads.take(*node) {
                for (o, gv) in omega[idx].data_mut().iter_mut().zip(g.data()) {
                    *o += gv * gv;
                }
            }
        }
    }
    for t in &mut omega {
        for o in t.data_mut() {
            *o /= q as f64;
        }
    }
    let anchor = keys.iter().map(|&k| model.param(k).clone()).collect();
    Ok(FisherMap {
        omega,
        anchor,
        sample_count: q,
    })
}

/// Build Σ ω·(θ − θ°)² on the tape over the parameter leaves present in
/// `live`. Parameters absent from the graph (dropped blocks) contribute
/// neither value nor gradient for this step.
pub fn regularizer_on_tape(
    tape: &mut Tape,
    live: &[(ParamKey, NodeId)],
    adaptable_order: &[ParamKey],
    fisher: &FisherMap,
) -> Result<NodeId> {
    if adaptable_order.len() != fisher.omega.len() {
        return Err(TtaError::LayoutMismatch {
            what: format!(
                "fisher map holds {} tensors for {} adaptable parameters",
                fisher.omega.len(),
                adaptable_order.len()
            ),
        });
    }
    let mut acc = tape.constant(Tensor::scalar(0.0))?;
    for (key, node) in live {
        let idx = adaptable_order
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| TtaError::LayoutMismatch {
                what: format!("{key:?} is not an adaptable parameter"),
            })?;
        let anchor = tape.constant(fisher.anchor[idx].clone())?;
        let omega = tape.constant(fisher.omega[idx].clone())?;
        let neg_anchor = tape.scale(anchor, -1.0)?;
        let diff = tape.add(*node, neg_anchor)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(sq, omega)?;
        let s = tape.sum(weighted)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Value of the full regularizer over every adaptable parameter of the
/// model, outside any tape.
pub fn regularizer_value(model: &Model, fisher: &FisherMap) -> Result<f64> {
    fisher.check_layout(model)?;
    let keys = model.adaptable_parameters();
    let mut total = 0.0;
    for (i, &k) in keys.iter().enumerate() {
        let cur = model.param(k).data();
        let anc = fisher.anchor[i].data();
        let om = fisher.omega[i].data();
        for j in 0..cur.len() {
            let d = cur[j] - anc[j];
            total += om[j] * d * d;
        }
    }
    Ok(total)
}
