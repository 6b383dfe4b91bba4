//! Experiment configuration: a JSON file schema with a required schema
//! version, optional fields everywhere else, and a normalization pass that
//! materializes every default (including derived seeds) so the echoed
//! config is fully explicit and round-trips losslessly.

use crate::corrupt::{default_grid, CorruptionKind, CorruptionSpec};
use crate::dataset::DatasetSpec;
use crate::error::{BenchError, Result};
use crate::train::TrainSettings;
use serde::{Deserialize, Serialize};
use tta_core::{AdaptConfig, ArchConfig, Method, NormMode, Scenario, SelectionConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Desk-scale default for the diversity threshold. The cosine geometry of
/// probability vectors depends on the class count: against a near-uniform
/// tracker over C classes a one-hot prediction already scores 1/sqrt(C)
/// (~0.32 at C = 10), so thresholds tuned for thousand-class heads filter
/// everything here. 0.3 sits just under that point: confident predictions
/// of an already-seen class read as redundant, anything softer or rarer
/// passes.
pub const DEFAULT_EPSILON: f64 = 0.3;
pub const DEFAULT_ALPHA_MA: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_PROBE_CADENCE: usize = 8;
pub const DEFAULT_FISHER_Q: usize = 500;

/// Per-method learning-rate defaults (consistency objectives tolerate and
/// need larger steps than entropy minimization).
pub fn default_lr(method: Method) -> f64 {
    match method {
        Method::EtaC | Method::EataC => 0.2,
        _ => 0.15,
    }
}

/// Per-method anchor-weight defaults; methods without the anchor get zero.
pub fn default_beta(method: Method) -> f64 {
    match method {
        Method::Eata => 1000.0,
        Method::EataC => 500.0,
        _ => 0.0,
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for one named stage of the pipeline.
pub fn derive_seed(master: u64, stage: u64) -> u64 {
    splitmix64(master ^ stage.wrapping_mul(0xd1b54a32d192ed03))
}

pub const STAGE_DATASET: u64 = 1;
pub const STAGE_TRAIN: u64 = 2;
pub const STAGE_ADAPT: u64 = 3;
pub const STAGE_CORRUPTION: u64 = 4;
pub const STAGE_STREAM: u64 = 5;

// ── File schema ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub classes: Option<usize>,
    pub input_dim: Option<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub probe_per_class: Option<usize>,
    pub fisher_per_class: Option<usize>,
    pub cluster_margin: Option<f64>,
    pub label_noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub hidden_width: Option<usize>,
    pub n_blocks: Option<usize>,
    pub norm_mode: Option<String>,
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub stat_momentum: Option<f64>,
    pub p_drop: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSection {
    pub kind: Option<String>,
    pub severity: Option<u8>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub method: Option<String>,
    pub scenario: Option<String>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub beta: Option<f64>,
    pub alpha_reg: Option<f64>,
    pub p_smooth: Option<f64>,
    pub p_drop: Option<f64>,
    pub e0: Option<f64>,
    pub epsilon: Option<f64>,
    pub alpha_ma: Option<f64>,
    pub steps_per_batch: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub corruptions: Option<Vec<CorruptionSection>>,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub probe_cadence: Option<usize>,
    #[serde(default)]
    pub fisher_q: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub run_name: Option<String>,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            schema_version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSection::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            corruptions: None,
            adapt: AdaptSection::default(),
            batch_size: None,
            probe_cadence: None,
            fisher_q: None,
            output_dir: None,
            run_name: None,
        }
    }
}

impl FileConfig {
    pub fn parse_json(text: &str) -> Result<FileConfig> {
        let cfg: FileConfig =
            serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_VERSION {
            return Err(BenchError::config(format!(
                "schema_version: expected {CONFIG_VERSION}, got {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Materialize every default into an explicit config. Normalization is
    /// idempotent: a normalized config normalizes to itself.
    pub fn normalize(&self) -> Result<FileConfig> {
        let mut out = self.clone();
        let master = out.seed;

        let d = &mut out.dataset;
        let defaults = DatasetSpec::default();
        d.classes.get_or_insert(defaults.classes);
        d.input_dim.get_or_insert(defaults.input_dim);
        d.train_per_class.get_or_insert(defaults.train_per_class);
        d.test_per_class.get_or_insert(defaults.test_per_class);
        d.probe_per_class.get_or_insert(defaults.probe_per_class);
        d.fisher_per_class.get_or_insert(defaults.fisher_per_class);
        d.cluster_margin.get_or_insert(defaults.cluster_margin);
        d.label_noise.get_or_insert(defaults.label_noise);
        d.seed.get_or_insert(derive_seed(master, STAGE_DATASET));

        let a = &mut out.arch;
        a.hidden_width.get_or_insert(64);
        a.n_blocks.get_or_insert(8);
        a.norm_mode.get_or_insert_with(|| "batch-norm".into());
        a.eps.get_or_insert(1e-5);

        let t = &mut out.train;
        let tdef = TrainSettings::default();
        t.epochs.get_or_insert(tdef.epochs);
        t.lr.get_or_insert(tdef.lr);
        t.batch_size.get_or_insert(tdef.batch_size);
        t.stat_momentum.get_or_insert(tdef.stat_momentum);
        t.p_drop.get_or_insert(tdef.p_drop);
        t.weight_decay.get_or_insert(tdef.weight_decay);
        t.seed.get_or_insert(derive_seed(master, STAGE_TRAIN));

        let ad = &mut out.adapt;
        ad.method.get_or_insert_with(|| "source".into());
        ad.scenario.get_or_insert_with(|| "single-domain".into());
        let method = Method::parse(ad.method.as_deref().unwrap_or(""))
            .map_err(|e| BenchError::config(format!("adapt.method: {e}")))?;
        ad.lr.get_or_insert(default_lr(method));
        ad.momentum.get_or_insert(0.9);
        ad.beta.get_or_insert(default_beta(method));
        ad.alpha_reg.get_or_insert(0.1);
        ad.p_drop.get_or_insert(0.2);
        let p_drop = ad.p_drop.unwrap();
        ad.p_smooth.get_or_insert(p_drop);
        let classes = out.dataset.classes.unwrap();
        ad.e0.get_or_insert(0.4 * (classes as f64).ln());
        ad.epsilon.get_or_insert(DEFAULT_EPSILON);
        ad.alpha_ma.get_or_insert(DEFAULT_ALPHA_MA);
        ad.steps_per_batch.get_or_insert(1);
        ad.seed.get_or_insert(derive_seed(master, STAGE_ADAPT));

        if out.corruptions.is_none() {
            let grid = default_grid(derive_seed(master, STAGE_CORRUPTION));
            out.corruptions = Some(
                grid.iter()
                    .map(|s| CorruptionSection {
                        kind: Some(s.kind.to_string()),
                        severity: Some(s.severity),
                        seed: Some(s.seed),
                    })
                    .collect(),
            );
        } else if let Some(list) = &mut out.corruptions {
            for (i, c) in list.iter_mut().enumerate() {
                if c.kind.is_none() {
                    return Err(BenchError::config(format!("corruptions[{i}].kind: missing")));
                }
                c.severity.get_or_insert(5);
                c.seed
                    .get_or_insert(derive_seed(master, STAGE_CORRUPTION.wrapping_add(i as u64 + 1)));
            }
        }

        out.batch_size.get_or_insert(DEFAULT_BATCH_SIZE);
        out.probe_cadence.get_or_insert(DEFAULT_PROBE_CADENCE);
        out.fisher_q.get_or_insert(DEFAULT_FISHER_Q);
        out.output_dir.get_or_insert_with(|| "out".into());
        let scenario = out.adapt.scenario.clone().unwrap();
        out.run_name
            .get_or_insert_with(|| format!("{}-{}", method, scenario));
        Ok(out)
    }
}

// ── Runtime view ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub train: TrainSettings,
    pub corruptions: Vec<CorruptionSpec>,
    pub adapt: AdaptConfig,
    pub batch_size: usize,
    pub probe_cadence: usize,
    pub fisher_q: usize,
    pub output_dir: String,
    pub run_name: String,
    /// The normalized file config this runtime view was built from.
    pub echo: FileConfig,
}

impl RuntimeConfig {
    pub fn from_file(cfg: &FileConfig) -> Result<RuntimeConfig> {
        let n = cfg.normalize()?;
        let dataset = DatasetSpec {
            classes: n.dataset.classes.unwrap(),
            input_dim: n.dataset.input_dim.unwrap(),
            train_per_class: n.dataset.train_per_class.unwrap(),
            test_per_class: n.dataset.test_per_class.unwrap(),
            probe_per_class: n.dataset.probe_per_class.unwrap(),
            fisher_per_class: n.dataset.fisher_per_class.unwrap(),
            cluster_margin: n.dataset.cluster_margin.unwrap(),
            label_noise: n.dataset.label_noise.unwrap(),
            seed: n.dataset.seed.unwrap(),
        };
        dataset.validate()?;

        let norm_mode = match n.arch.norm_mode.as_deref().unwrap() {
            "batch-norm" => NormMode::BatchNorm,
            "layer-norm" => NormMode::LayerNorm,
            other => {
                return Err(BenchError::config(format!(
                    "arch.norm_mode: unknown mode '{other}', expected batch-norm or layer-norm"
                )))
            }
        };
        let arch = ArchConfig {
            input_dim: dataset.input_dim,
            hidden_width: n.arch.hidden_width.unwrap(),
            n_blocks: n.arch.n_blocks.unwrap(),
            n_classes: dataset.classes,
            norm_mode,
            eps: n.arch.eps.unwrap(),
        };
        arch.validate()
            .map_err(|e| BenchError::config(format!("arch: {e}")))?;

        let train = TrainSettings {
            epochs: n.train.epochs.unwrap(),
            lr: n.train.lr.unwrap(),
            batch_size: n.train.batch_size.unwrap(),
            stat_momentum: n.train.stat_momentum.unwrap(),
            p_drop: n.train.p_drop.unwrap(),
            weight_decay: n.train.weight_decay.unwrap(),
            seed: n.train.seed.unwrap(),
        };
        train.validate()?;

        let mut corruptions = Vec::new();
        for (i, c) in n.corruptions.as_ref().unwrap().iter().enumerate() {
            let kind = CorruptionKind::parse(c.kind.as_deref().unwrap())
                .map_err(|e| BenchError::config(format!("corruptions[{i}].kind: {e}")))?;
            let spec = CorruptionSpec {
                kind,
                severity: c.severity.unwrap(),
                seed: c.seed.unwrap(),
            };
            spec.validate()
                .map_err(|e| BenchError::config(format!("corruptions[{i}]: {e}")))?;
            corruptions.push(spec);
        }
        if corruptions.is_empty() {
            return Err(BenchError::config("corruptions: list must not be empty"));
        }

        let ad = &n.adapt;
        let method = Method::parse(ad.method.as_deref().unwrap())
            .map_err(|e| BenchError::config(format!("adapt.method: {e}")))?;
        let scenario = Scenario::parse(ad.scenario.as_deref().unwrap())
            .map_err(|e| BenchError::config(format!("adapt.scenario: {e}")))?;
        let adapt = AdaptConfig {
            method,
            lr: ad.lr.unwrap(),
            momentum: ad.momentum.unwrap(),
            beta: ad.beta.unwrap(),
            alpha_reg: ad.alpha_reg.unwrap(),
            p_smooth: Some(ad.p_smooth.unwrap()),
            p_drop: ad.p_drop.unwrap(),
            selection: SelectionConfig {
                e0: ad.e0.unwrap(),
                epsilon: ad.epsilon.unwrap(),
                alpha_ma: ad.alpha_ma.unwrap(),
            },
            scenario,
            steps_per_batch: ad.steps_per_batch.unwrap(),
            seed: ad.seed.unwrap(),
        };
        adapt
            .validate()
            .map_err(|e| BenchError::config(format!("adapt: {e}")))?;

        let batch_size = n.batch_size.unwrap();
        if batch_size == 0 {
            return Err(BenchError::config("batch_size: must be >= 1"));
        }
        let fisher_q = n.fisher_q.unwrap();
        if fisher_q == 0 {
            return Err(BenchError::config("fisher_q: must be >= 1"));
        }
        let pool = dataset.classes * dataset.fisher_per_class;
        if fisher_q > pool {
            return Err(BenchError::config(format!(
                "fisher_q: {fisher_q} exceeds the fisher pool of {pool} samples"
            )));
        }

        Ok(RuntimeConfig {
            seed: n.seed,
            dataset,
            arch,
            train,
            corruptions,
            adapt,
            batch_size,
            probe_cadence: n.probe_cadence.unwrap(),
            fisher_q,
            output_dir: n.output_dir.clone().unwrap(),
            run_name: n.run_name.clone().unwrap(),
            echo: n,
        })
    }
}
