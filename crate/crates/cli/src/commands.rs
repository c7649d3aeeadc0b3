use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vfiqa_core::clip::load_clip;
use vfiqa_core::dataset::{self, auto_annotate, load_triplet, read_manifest, write_manifest, Source};
use vfiqa_core::eval::{read_mos_csv, rank_correlations, two_afc, CorrelationReport, EvalResults, PairedResult};
use vfiqa_core::metrics::{MetricOptions, MetricRegistry, VideoMetric};
use vfiqa_core::train::{train as run_training, EpochStats, ManifestSource, TripletSource};
use vfiqa_core::{weights, MetricModel, ModelConfig, TrainConfig};

pub fn create_metric(name: &str, model: Option<&Path>, stride: usize) -> Result<Box<dyn VideoMetric>> {
    let registry = MetricRegistry::with_builtins();
    let opts = MetricOptions { model: model.map(Path::to_path_buf), stride };
    registry.create(name, &opts).with_context(|| {
        let names: Vec<_> = registry.names().collect();
        format!("creating metric `{name}` (available: {})", names.join(", "))
    })
}

pub fn score(a: &Path, reference: &Path, metric: &dyn VideoMetric) -> Result<f64> {
    let v = load_clip(a)?;
    let r = load_clip(reference)?;
    Ok(metric.distance(&v, &r)?)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
    /// Frames per clip; `None` takes the first labeled triplet's length.
    pub frames: Option<usize>,
}

pub fn train(opts: &TrainOptions, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
    let source = ManifestSource::open(&opts.manifest)?;
    let frames = match opts.frames {
        Some(n) => n,
        None => (0..source.len())
            .find_map(|i| source.load(i).ok())
            .map(|s| s.reference.frame_count())
            .context("no labeled triplet could be loaded")?,
    };
    let mut model = MetricModel::<f32>::new(ModelConfig::with_frames(frames), opts.config.seed)?;
    let log = run_training(&mut model, &source, opts.config.clone(), &mut on_epoch)?;
    weights::save(&model, &opts.out).with_context(|| format!("writing {}", opts.out.display()))?;
    Ok(log)
}

/// 2AFC of `metric` over the labeled triplets of a manifest.
pub fn eval(manifest: &Path, metric: &dyn VideoMetric) -> Result<EvalResults> {
    let mut results = Vec::new();
    for t in read_manifest(manifest)?.iter().filter(|t| t.is_labeled()) {
        let (a, b, r) = match load_triplet(manifest, t) {
            Ok(clips) => clips,
            Err(e) => {
                log::warn!("skipping triplet `{}`: {e}", t.id);
                continue;
            }
        };
        let d_a = metric.distance(&a, &r)?;
        let d_b = metric.distance(&b, &r)?;
        results.push(PairedResult { triplet_id: t.id.clone(), d_a, d_b, h: t.h.unwrap_or_default() });
    }
    if results.is_empty() {
        bail!("{} has no loadable labeled triplets", manifest.display());
    }
    Ok(EvalResults { two_afc: Some(two_afc(&results)?), ..Default::default() })
}

pub fn corr(csv: &Path) -> Result<(EvalResults, CorrelationReport)> {
    let records = read_mos_csv(csv)?;
    let report = rank_correlations(&records);
    if report.groups.is_empty() {
        bail!("no group in {} has a defined correlation", csv.display());
    }
    Ok((EvalResults::from_correlations(&report), report))
}

#[derive(Debug, Default, Clone, PartialEq, Serialize)]
pub struct AutoSummary {
    pub labeled: usize,
    pub deferred: usize,
    pub failed: usize,
    pub already_labeled: usize,
}

/// Labels unlabeled triplets whose metric gap exceeds `threshold`, leaving
/// the rest for annotators, and writes the manifest to `out`.
pub fn annotate_auto(manifest: &Path, out: &Path, metric: &dyn VideoMetric, threshold: f64) -> Result<AutoSummary> {
    let mut triplets = read_manifest(manifest)?;
    let mut summary = AutoSummary::default();
    for t in triplets.iter_mut() {
        if t.source != Source::Unlabeled {
            summary.already_labeled += 1;
            continue;
        }
        let label = load_triplet(manifest, t).and_then(|(a, b, r)| auto_annotate(&a, &b, &r, metric, threshold));
        match label {
            Ok(Some(h)) => {
                t.h = Some(h);
                t.source = Source::Auto;
                summary.labeled += 1;
            }
            Ok(None) => summary.deferred += 1,
            Err(e) => {
                log::warn!("leaving triplet `{}` unlabeled: {e}", t.id);
                summary.failed += 1;
            }
        }
    }
    write_manifest(out, &triplets)?;
    Ok(summary)
}

pub fn select_patch(a: &Path, b: &Path, size: usize, stride: usize) -> Result<(usize, usize)> {
    let va = load_clip(a)?;
    let vb = load_clip(b)?;
    Ok(dataset::select_patch(&va, &vb, size, stride)?)
}
