//! Experiment orchestration: artifact production (dataset, source model,
//! fisher map) with on-disk caching, corrupted stream construction with
//! severity-monotonicity validation, adaptation runs, and output
//! persistence.

use crate::config::{derive_seed, RuntimeConfig, STAGE_STREAM};
use crate::corrupt::{CorruptionKind, CorruptionSpec};
use crate::dataset::{generate_dataset, DatasetBundle};
use crate::error::{BenchError, Result};
use crate::train::{evaluate, train_source};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use tta_core::{
    estimate_fisher, AdaptEngine, FisherMap, Model, ProbeSpec, RunReport, StreamBatch,
};

/// Environment variable overriding the configured output root directory.
pub const OUT_ROOT_ENV: &str = "TTA_BENCH_OUT";

pub struct Artifacts {
    pub bundle: DatasetBundle,
    pub model: Model,
    pub fisher: Option<FisherMap>,
}

pub struct AdaptationOutput {
    pub report: RunReport,
    pub final_model: Model,
    /// Corruption specs actually used (seeds may have been bumped by the
    /// severity-monotonicity validation).
    pub corruptions: Vec<CorruptionSpec>,
}

// ── In-memory pipeline ──────────────────────────────────────────────────

pub fn make_dataset(rt: &RuntimeConfig) -> Result<DatasetBundle> {
    let bundle = generate_dataset(&rt.dataset)?;
    bundle.check_disjoint()?;
    Ok(bundle)
}

pub fn make_model(rt: &RuntimeConfig, bundle: &DatasetBundle) -> Result<Model> {
    train_source(bundle, rt.arch.clone(), &rt.train)
}

pub fn make_fisher(rt: &RuntimeConfig, bundle: &DatasetBundle, model: &Model) -> Result<FisherMap> {
    let rows: Vec<usize> = (0..rt.fisher_q).collect();
    let pool = bundle.fisher_pool.inputs.select_rows(&rows)?;
    Ok(estimate_fisher(model, &pool)?)
}

pub fn prepare_artifacts(rt: &RuntimeConfig) -> Result<Artifacts> {
    let bundle = make_dataset(rt)?;
    let model = make_model(rt, &bundle)?;
    let fisher = if rt.adapt.effective_beta() > 0.0 {
        Some(make_fisher(rt, &bundle, &model)?)
    } else {
        None
    };
    Ok(Artifacts {
        bundle,
        model,
        fisher,
    })
}

/// Frozen-model accuracy per corruption spec on the corrupted test split.
pub fn corruption_accuracies(
    model: &Model,
    bundle: &DatasetBundle,
    specs: &[CorruptionSpec],
) -> Result<Vec<f64>> {
    specs
        .iter()
        .map(|spec| {
            let corrupted = spec.apply(&bundle.clean_test.inputs)?;
            evaluate(model, &corrupted, &bundle.clean_test.labels)
        })
        .collect()
}

/// Enforce the severity-monotonicity invariant: within each kind, frozen
/// source accuracy must be non-increasing in severity. On violation every
/// corruption seed is bumped and the check is retried.
pub fn resolve_corruptions(
    model: &Model,
    bundle: &DatasetBundle,
    specs: &[CorruptionSpec],
) -> Result<Vec<CorruptionSpec>> {
    const MAX_ATTEMPTS: u64 = 16;
    let mut current: Vec<CorruptionSpec> = specs.to_vec();
    for attempt in 0..MAX_ATTEMPTS {
        let accs = corruption_accuracies(model, bundle, &current)?;
        let mut by_kind: BTreeMap<&'static str, Vec<(u8, f64)>> = BTreeMap::new();
        for (spec, &acc) in current.iter().zip(&accs) {
            by_kind
                .entry(spec.kind.as_str())
                .or_default()
                .push((spec.severity, acc));
        }
        let mut monotone = true;
        'kinds: for rows in by_kind.values() {
            let mut sorted = rows.clone();
            sorted.sort_by_key(|&(s, _)| s);
            for w in sorted.windows(2) {
                if w[1].1 > w[0].1 {
                    monotone = false;
                    break 'kinds;
                }
            }
        }
        if monotone {
            return Ok(current);
        }
        for spec in &mut current {
            spec.seed = spec.seed.wrapping_add(0x5bd1e995 + attempt);
        }
    }
    Err(BenchError::invariant(
        "severity monotonicity could not be established after reseeding",
    ))
}

/// Build the online stream: one domain per corruption spec in order, each
/// a seeded shuffle of the corrupted test split chunked into batches.
pub fn build_stream(
    rt: &RuntimeConfig,
    bundle: &DatasetBundle,
    specs: &[CorruptionSpec],
) -> Result<Vec<StreamBatch>> {
    let mut out = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let corrupted = spec.apply(&bundle.clean_test.inputs)?;
        let n = corrupted.rows();
        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_seed = derive_seed(rt.seed, STAGE_STREAM.wrapping_add(i as u64));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        for chunk in order.chunks(rt.batch_size) {
            out.push(StreamBatch {
                inputs: corrupted.select_rows(chunk)?,
                labels: chunk.iter().map(|&r| bundle.clean_test.labels[r]).collect(),
                domain: spec.domain(),
            });
        }
    }
    Ok(out)
}

/// Run the configured adaptation over the validated stream.
pub fn run_adaptation(rt: &RuntimeConfig, artifacts: &Artifacts) -> Result<AdaptationOutput> {
    let corruptions = resolve_corruptions(&artifacts.model, &artifacts.bundle, &rt.corruptions)?;
    let stream = build_stream(rt, &artifacts.bundle, &corruptions)?;
    let probe = ProbeSpec {
        inputs: artifacts.bundle.id_probe.inputs.clone(),
        labels: artifacts.bundle.id_probe.labels.clone(),
        cadence: rt.probe_cadence,
    };
    let mut engine = AdaptEngine::new(
        artifacts.model.clone(),
        artifacts.fisher.clone(),
        rt.adapt.clone(),
    )?;
    let report = engine.run_stream(&stream, Some(&probe))?;
    Ok(AdaptationOutput {
        report,
        final_model: engine.model().clone(),
        corruptions,
    })
}

// ── Disk layer ──────────────────────────────────────────────────────────

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn section_hash(parts: &[String]) -> String {
    format!("{:016x}", fnv64(parts.join("|").as_bytes()))
}

pub fn out_root(rt: &RuntimeConfig) -> PathBuf {
    match std::env::var(OUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(&rt.output_dir),
    }
}

fn json_of<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| BenchError::Config(e.to_string()))
}

pub fn dataset_path(rt: &RuntimeConfig) -> Result<PathBuf> {
    let h = section_hash(&[json_of(&rt.dataset)?]);
    Ok(out_root(rt).join("artifacts").join(format!("dataset-{h}.json")))
}

pub fn model_path(rt: &RuntimeConfig) -> Result<PathBuf> {
    let h = section_hash(&[json_of(&rt.dataset)?, json_of(&rt.arch)?, json_of(&rt.train)?]);
    Ok(out_root(rt).join("artifacts").join(format!("model-{h}.json")))
}

pub fn fisher_path(rt: &RuntimeConfig) -> Result<PathBuf> {
    let h = section_hash(&[
        json_of(&rt.dataset)?,
        json_of(&rt.arch)?,
        json_of(&rt.train)?,
        rt.fisher_q.to_string(),
    ]);
    Ok(out_root(rt).join("artifacts").join(format!("fisher-{h}.json")))
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load the dataset bundle from cache or generate and persist it.
/// Returns the bundle, its path, and whether it was newly produced.
pub fn ensure_dataset(rt: &RuntimeConfig) -> Result<(DatasetBundle, PathBuf, bool)> {
    let path = dataset_path(rt)?;
    if path.exists() {
        let bundle = DatasetBundle::load(fs::File::open(&path)?)?;
        return Ok((bundle, path, false));
    }
    let bundle = make_dataset(rt)?;
    let mut buf = Vec::new();
    bundle.save(&mut buf)?;
    write_atomically(&path, &buf)?;
    Ok((bundle, path, true))
}

pub fn ensure_model(
    rt: &RuntimeConfig,
    bundle: &DatasetBundle,
) -> Result<(Model, PathBuf, bool)> {
    let path = model_path(rt)?;
    if path.exists() {
        let model = Model::load_checkpoint(fs::File::open(&path)?).map_err(BenchError::Core)?;
        return Ok((model, path, false));
    }
    let model = make_model(rt, bundle)?;
    write_atomically(&path, &model.checkpoint_bytes().map_err(BenchError::Core)?)?;
    Ok((model, path, true))
}

pub fn ensure_fisher(
    rt: &RuntimeConfig,
    bundle: &DatasetBundle,
    model: &Model,
) -> Result<(FisherMap, PathBuf, bool)> {
    let path = fisher_path(rt)?;
    if path.exists() {
        let fisher = FisherMap::load(fs::File::open(&path)?).map_err(BenchError::Core)?;
        fisher.check_layout(model).map_err(BenchError::Core)?;
        return Ok((fisher, path, false));
    }
    let fisher = make_fisher(rt, bundle, model)?;
    let mut buf = Vec::new();
    fisher.save(&mut buf).map_err(BenchError::Core)?;
    write_atomically(&path, &buf)?;
    Ok((fisher, path, true))
}

pub struct RunPaths {
    pub dir: PathBuf,
    pub report: PathBuf,
}

/// Full disk-backed experiment: produce (or reuse) artifacts, run the
/// adaptation, and write the report set under `<out>/<run_name>/`.
pub fn run_experiment(
    rt: &RuntimeConfig,
    overwrite: bool,
) -> Result<(RunPaths, AdaptationOutput)> {
    let (bundle, _, _) = ensure_dataset(rt)?;
    let (model, _, _) = ensure_model(rt, &bundle)?;
    let fisher = if rt.adapt.effective_beta() > 0.0 {
        Some(ensure_fisher(rt, &bundle, &model)?.0)
    } else {
        None
    };
    let artifacts = Artifacts {
        bundle,
        model,
        fisher,
    };
    let output = run_adaptation(rt, &artifacts)?;

    let dir = out_root(rt).join(&rt.run_name);
    if dir.exists() {
        if !overwrite {
            return Err(BenchError::config(format!(
                "run directory {} already exists (pass --overwrite to replace it)",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;

    // Echo the normalized config, with any reseeded corruption specs.
    let mut echo = rt.echo.clone();
    echo.corruptions = Some(
        output
            .corruptions
            .iter()
            .map(|s| crate::config::CorruptionSection {
                kind: Some(s.kind.to_string()),
                severity: Some(s.severity),
                seed: Some(s.seed),
            })
            .collect(),
    );
    fs::write(dir.join("config.json"), echo.to_json_string()?)?;
    let report_path = dir.join("report.json");
    fs::write(
        &report_path,
        output.report.to_json_string().map_err(BenchError::Core)?,
    )?;
    fs::write(dir.join("batches.csv"), output.report.batches_csv())?;
    fs::write(dir.join("reliability.csv"), output.report.reliability_csv())?;
    fs::write(dir.join("trajectory.csv"), output.report.trajectory_csv())?;

    Ok((
        RunPaths {
            dir,
            report: report_path,
        },
        output,
    ))
}

/// Accuracy of the frozen source model over the whole severity grid,
/// grouped by kind; used by diagnostics and tests.
pub fn severity_profile(
    model: &Model,
    bundle: &DatasetBundle,
    specs: &[CorruptionSpec],
) -> Result<Vec<(CorruptionKind, u8, f64)>> {
    let accs = corruption_accuracies(model, bundle, specs)?;
    Ok(specs
        .iter()
        .zip(accs)
        .map(|(s, a)| (s.kind, s.severity, a))
        .collect())
}
