//! Synthetic class-conditional Gaussian mixture benchmark data with
//! disjoint train / clean-test / probe / fisher splits and label-noise
//! bookkeeping.

use crate::error::{BenchError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tta_core::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub probe_per_class: usize,
    pub fisher_per_class: usize,
    /// Scale of the class means; larger means wider inter-class margins.
    pub cluster_margin: f64,
    /// Probability that a sample's recorded label is resampled uniformly.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 10,
            input_dim: 32,
            train_per_class: 200,
            test_per_class: 100,
            probe_per_class: 100,
            fisher_per_class: 50,
            cluster_margin: 4.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(BenchError::config(format!(
                "dataset.classes: need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_dim < 1 {
            return Err(BenchError::config("dataset.input_dim: must be >= 1"));
        }
        if self.classes > self.input_dim {
            return Err(BenchError::config(format!(
                "dataset.classes: {} classes need input_dim >= {} for orthogonal cluster placement",
                self.classes, self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(BenchError::config(format!(
                "dataset.label_noise: must be in [0, 1], got {}",
                self.label_noise
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(BenchError::config(
                "dataset.train_per_class / test_per_class: must be >= 1",
            ));
        }
        Ok(())
    }
}

/// One split of the dataset, with the bookkeeping needed to audit split
/// disjointness and the label-noise process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Tensor,
    /// Recorded labels (after the noise process).
    pub labels: Vec<usize>,
    /// Global sample ids, unique across the whole bundle.
    pub sample_ids: Vec<u64>,
    /// Cluster each sample was actually drawn from.
    pub true_cluster: Vec<usize>,
    /// Whether the noise process resampled the recorded label.
    pub noise_applied: Vec<bool>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub train: Split,
    pub clean_test: Split,
    pub id_probe: Split,
    pub fisher_pool: Split,
}

struct SplitBuilder {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    sample_ids: Vec<u64>,
    true_cluster: Vec<usize>,
    noise_applied: Vec<bool>,
}

impl SplitBuilder {
    fn new() -> Self {
        SplitBuilder {
            rows: Vec::new(),
            labels: Vec::new(),
            sample_ids: Vec::new(),
            true_cluster: Vec::new(),
            noise_applied: Vec::new(),
        }
    }

    fn finish(self) -> Result<Split> {
        Ok(Split {
            inputs: Tensor::from_rows(&self.rows).map_err(BenchError::Core)?,
            labels: self.labels,
            sample_ids: self.sample_ids,
            true_cluster: self.true_cluster,
            noise_applied: self.noise_applied,
        })
    }
}

/// Deterministically generate the four disjoint splits. Class means are
/// random directions scaled to the configured margin; samples add unit
/// isotropic noise. The noise process resamples a label uniformly over all
/// classes with probability `label_noise`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;

    // Orthonormal random directions (Gram-Schmidt) scaled to the margin:
    // every pair of class means sits at distance margin·sqrt(2).
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while means.len() < spec.classes {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for prev in &means {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                / (spec.cluster_margin * spec.cluster_margin);
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for x in &mut v {
            *x *= spec.cluster_margin / norm;
        }
        means.push(v);
    }

    let mut builders = [
        SplitBuilder::new(),
        SplitBuilder::new(),
        SplitBuilder::new(),
        SplitBuilder::new(),
    ];
    let counts = [
        spec.train_per_class,
        spec.test_per_class,
        spec.probe_per_class,
        spec.fisher_per_class,
    ];
    let mut next_id: u64 = 0;
    for class in 0..spec.classes {
        for (builder, &count) in builders.iter_mut().zip(&counts) {
            for _ in 0..count {
                let row: Vec<f64> = means[class]
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + z
                    })
                    .collect();
                let noisy = rng.gen::<f64>() < spec.label_noise;
                let label = if noisy {
                    rng.gen_range(0..spec.classes)
                } else {
                    class
                };
                builder.rows.push(row);
                builder.labels.push(label);
                builder.sample_ids.push(next_id);
                builder.true_cluster.push(class);
                builder.noise_applied.push(noisy);
                next_id += 1;
            }
        }
    }

    let [train, clean_test, id_probe, fisher_pool] = builders;
    Ok(DatasetBundle {
        schema_version: BUNDLE_VERSION,
        spec: spec.clone(),
        train: train.finish()?,
        clean_test: clean_test.finish()?,
        id_probe: id_probe.finish()?,
        fisher_pool: fisher_pool.finish()?,
    })
}

impl DatasetBundle {
    pub fn splits(&self) -> [(&'static str, &Split); 4] {
        [
            ("train", &self.train),
            ("clean_test", &self.clean_test),
            ("id_probe", &self.id_probe),
            ("fisher_pool", &self.fisher_pool),
        ]
    }

    /// No sample id may appear in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, split) in self.splits() {
            for &id in &split.sample_ids {
                if !seen.insert(id) {
                    return Err(BenchError::invariant(format!(
                        "sample id {id} of split {name} appears twice"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<DatasetBundle> {
        let b: DatasetBundle =
            serde_json::from_reader(r).map_err(|e| BenchError::Config(e.to_string()))?;
        if b.schema_version != BUNDLE_VERSION {
            return Err(BenchError::config(format!(
                "unsupported dataset schema version {}",
                b.schema_version
            )));
        }
        Ok(b)
    }
}
