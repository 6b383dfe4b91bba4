//! Evaluation metrics and the per-run report container: accuracy,
//! expected calibration error with reliability-diagram bins, clean-accuracy
//! forgetting probes, and the full/sub-network disagreement audit.

use crate::error::{Result, TtaError};
use crate::network::{Model, StatsMode};
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_ECE_BINS: usize = 15;

/// Streaming calibration statistics over equal-width confidence bins on
/// (0, 1]; a confidence of exactly 0 lands in the first bin. Accumulators
/// merge associatively, so shards can be combined.
#[derive(Debug, Clone, PartialEq)]
pub struct EceAccumulator {
    bins: usize,
    conf_sum: Vec<f64>,
    correct: Vec<u64>,
    count: Vec<u64>,
}

impl EceAccumulator {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(TtaError::invalid("ece bin count must be >= 1"));
        }
        Ok(EceAccumulator {
            bins,
            conf_sum: vec![0.0; bins],
            correct: vec![0; bins],
            count: vec![0; bins],
        })
    }

    fn bin_of(&self, confidence: f64) -> usize {
        if confidence <= 0.0 {
            return 0;
        }
        let idx = (confidence * self.bins as f64).ceil() as usize;
        idx.saturating_sub(1).min(self.bins - 1)
    }

    pub fn add(&mut self, confidence: f64, correct: bool) -> Result<()> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(TtaError::invalid(format!(
                "confidence must be in [0, 1], got {confidence}"
            )));
        }
        let b = self.bin_of(confidence);
        self.conf_sum[b] += confidence;
        self.count[b] += 1;
        if correct {
            self.correct[b] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EceAccumulator) -> Result<()> {
        if self.bins != other.bins {
            return Err(TtaError::LayoutMismatch {
                what: format!("merging {} bins into {}", other.bins, self.bins),
            });
        }
        for b in 0..self.bins {
            self.conf_sum[b] += other.conf_sum[b];
            self.correct[b] += other.correct[b];
            self.count[b] += other.count[b];
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum()
    }

    /// Σ_b (n_b/N)·|acc_b − conf_b|; empty bins contribute nothing.
    pub fn ece(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(TtaError::EmptyInput {
                what: "ece over no predictions",
            });
        }
        let mut e = 0.0;
        for b in 0..self.bins {
            if self.count[b] == 0 {
                continue;
            }
            let nb = self.count[b] as f64;
            let acc = self.correct[b] as f64 / nb;
            let conf = self.conf_sum[b] / nb;
            e += nb / n as f64 * (acc - conf).abs();
        }
        Ok(e)
    }

    pub fn bin_rows(&self) -> Vec<BinRecord> {
        (0..self.bins)
            .map(|b| {
                let nb = self.count[b];
                BinRecord {
                    bin: b,
                    lo: b as f64 / self.bins as f64,
                    hi: (b + 1) as f64 / self.bins as f64,
                    count: nb,
                    mean_confidence: if nb > 0 { self.conf_sum[b] / nb as f64 } else { 0.0 },
                    accuracy: if nb > 0 { self.correct[b] as f64 / nb as f64 } else { 0.0 },
                }
            })
            .collect()
    }
}

/// One-shot ECE over a prediction list.
pub fn ece(predictions: &[(f64, bool)], bins: usize) -> Result<f64> {
    let mut acc = EceAccumulator::new(bins)?;
    for &(c, ok) in predictions {
        acc.add(c, ok)?;
    }
    acc.ece()
}

/// Clean accuracy of the frozen model on a held-out set; batch-norm runs
/// on running statistics and nothing is mutated.
pub fn forgetting_probe(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if inputs.rows() == 0 || inputs.numel() == 0 {
        return Err(TtaError::EmptyInput {
            what: "forgetting_probe: empty evaluation set",
        });
    }
    if labels.len() != inputs.rows() {
        return Err(TtaError::LayoutMismatch {
            what: format!("{} labels for {} rows", labels.len(), inputs.rows()),
        });
    }
    let logits = model.predict(inputs, None, StatsMode::Running)?;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if argmax(logits.row(r)) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Count full/sub argmax mismatches and, among them, the fraction where the
/// sub-network prediction is wrong. `None` when no mismatch occurred.
pub fn disagreement_audit(
    full: &[usize],
    sub: &[usize],
    sub_correct: &[bool],
) -> Result<(usize, Option<f64>)> {
    if full.len() != sub.len() || full.len() != sub_correct.len() {
        return Err(TtaError::LayoutMismatch {
            what: format!(
                "disagreement_audit lengths {}/{}/{}",
                full.len(),
                sub.len(),
                sub_correct.len()
            ),
        });
    }
    let mut uncertain = 0usize;
    let mut wrong = 0usize;
    for i in 0..full.len() {
        if full[i] != sub[i] {
            uncertain += 1;
            if !sub_correct[i] {
                wrong += 1;
            }
        }
    }
    let indicator = if uncertain > 0 {
        Some(wrong as f64 / uncertain as f64)
    } else {
        None
    };
    Ok((uncertain, indicator))
}

// ── Run report ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entropy: f64,
    pub consistency: f64,
    pub min_max: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    pub mean_confidence: f64,
    pub selected: usize,
    pub forwards: u64,
    pub backwards: u64,
    pub losses: LossBreakdown,
    /// Full/sub argmax mismatches among samples that received a
    /// sub-network prediction.
    pub uncertain: usize,
    /// Mismatched samples whose sub-network prediction was wrong.
    pub sub_wrong: usize,
}

impl BatchRecord {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub after_batch: usize,
    pub clean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub total_correct: usize,
    pub total_samples: usize,
    pub total_selected: usize,
    pub total_forwards: u64,
    pub total_backwards: u64,
}

/// Per-domain summary over the contiguous batches of one stream domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub domain: String,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub samples: usize,
    pub selected: usize,
    pub forwards: u64,
    pub backwards: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub config_echo: serde_json::Value,
    pub aggregate: Aggregate,
    pub domains: Vec<DomainRecord>,
    pub batches: Vec<BatchRecord>,
    pub reliability: Vec<BinRecord>,
    pub trajectory: Vec<ProbeRecord>,
}

impl RunReport {
    /// Assemble a report; the aggregate is recomputed from the per-batch
    /// records so the two can never drift apart.
    pub fn assemble(
        method: String,
        scenario: String,
        seed: u64,
        config_echo: serde_json::Value,
        batches: Vec<BatchRecord>,
        ece_acc: &EceAccumulator,
        trajectory: Vec<ProbeRecord>,
    ) -> Result<RunReport> {
        let total_correct: usize = batches.iter().map(|b| b.correct).sum();
        let total_samples: usize = batches.iter().map(|b| b.total).sum();
        let conf_weighted: f64 = batches
            .iter()
            .map(|b| b.mean_confidence * b.total as f64)
            .sum();
        let aggregate = Aggregate {
            accuracy: if total_samples > 0 {
                total_correct as f64 / total_samples as f64
            } else {
                0.0
            },
            ece: if ece_acc.total() > 0 { ece_acc.ece()? } else { 0.0 },
            mean_confidence: if total_samples > 0 {
                conf_weighted / total_samples as f64
            } else {
                0.0
            },
            total_correct,
            total_samples,
            total_selected: batches.iter().map(|b| b.selected).sum(),
            total_forwards: batches.iter().map(|b| b.forwards).sum(),
            total_backwards: batches.iter().map(|b| b.backwards).sum(),
        };
        let mut domains: Vec<DomainRecord> = Vec::new();
        for b in &batches {
            if domains.last().map(|d| d.domain.as_str()) != Some(b.domain.as_str()) {
                domains.push(DomainRecord {
                    domain: b.domain.clone(),
                    accuracy: 0.0,
                    mean_confidence: 0.0,
                    samples: 0,
                    selected: 0,
                    forwards: 0,
                    backwards: 0,
                });
            }
            let d = domains.last_mut().expect("pushed above");
            d.accuracy += b.correct as f64;
            d.mean_confidence += b.mean_confidence * b.total as f64;
            d.samples += b.total;
            d.selected += b.selected;
            d.forwards += b.forwards;
            d.backwards += b.backwards;
        }
        for d in &mut domains {
            if d.samples > 0 {
                d.accuracy /= d.samples as f64;
                d.mean_confidence /= d.samples as f64;
            }
        }
        Ok(RunReport {
            schema_version: REPORT_VERSION,
            method,
            scenario,
            seed,
            config_echo,
            aggregate,
            domains,
            batches,
            reliability: ece_acc.bin_rows(),
            trajectory,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_reader<R: std::io::Read>(r: R) -> Result<RunReport> {
        let report: RunReport = serde_json::from_reader(r)?;
        if report.schema_version != REPORT_VERSION {
            return Err(TtaError::invalid(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn batches_csv(&self) -> String {
        let mut out = String::from(
            "batch,domain,accuracy,mean_confidence,selected,forwards,backwards,\
             loss_entropy,loss_consistency,loss_min_max,loss_regularizer,loss_total,\
             uncertain,sub_wrong\n",
        );
        for b in &self.batches {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                b.index,
                b.domain,
                b.accuracy(),
                b.mean_confidence,
                b.selected,
                b.forwards,
                b.backwards,
                b.losses.entropy,
                b.losses.consistency,
                b.losses.min_max,
                b.losses.regularizer,
                b.losses.total,
                b.uncertain,
                b.sub_wrong,
            ));
        }
        out
    }

    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,count,mean_confidence,accuracy\n");
        for r in &self.reliability {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{:.6},{:.6}\n",
                r.bin, r.lo, r.hi, r.count, r.mean_confidence, r.accuracy
            ));
        }
        out
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("after_batch,clean_accuracy\n");
        for p in &self.trajectory {
            out.push_str(&format!("{},{:.6}\n", p.after_batch, p.clean_accuracy));
        }
        out
    }
}
