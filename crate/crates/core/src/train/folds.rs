use std::path::Path;

use super::{infer, train, IterRecord, TrainConfig, TrainOutput};
use crate::data::{kfold_split, train_indices, Sample};
use crate::error::Result;
use crate::metrics::{MetricsReport, SampleMetrics};
use crate::model::Model;

pub struct FoldExperiment {
    /// Per-sample metrics on each held-out fold.
    pub fold_reports: Vec<MetricsReport>,
    /// One row per fold (that fold's aggregate) plus the overall aggregate.
    pub summary: MetricsReport,
    pub outputs: Vec<TrainOutput>,
}

/// Evaluate `model` on `samples`, naming rows by dataset index. Centerline
/// scores are included for 2D samples that carry a centerline.
pub fn evaluate(model: &mut Model<f32>, samples: &[(usize, &Sample)], window: Option<&[usize]>) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for &(idx, s) in samples {
        let out = infer(model, &s.input, window)?;
        let cl = s.centerline.as_ref().filter(|_| s.spatial().len() == 2);
        rows.push(SampleMetrics::evaluate(&format!("sample{idx}"), &out.prob, &s.mask, cl)?);
    }
    Ok(MetricsReport::from_samples(&rows))
}

/// k-fold cross-validation: fold `f` trains on the other folds with seed
/// `cfg.seed + f`, selects by Dice on fold `f` and is evaluated there.
/// With `out_dir`, each fold's run goes to `fold{f}/` and reports to
/// `fold{f}/metrics.csv` and `summary.csv`.
pub fn run_fold_experiment(
    cfg: &TrainConfig,
    dataset: &[Sample],
    k: usize,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(usize, &IterRecord),
) -> Result<FoldExperiment> {
    cfg.validate()?;
    let folds = kfold_split(dataset.len(), k, cfg.seed)?;
    let mut fold_reports = Vec::with_capacity(k);
    let mut outputs = Vec::with_capacity(k);
    let mut summary = MetricsReport::default();
    for (f, held) in folds.iter().enumerate() {
        let train_set: Vec<Sample> = train_indices(&folds, f).iter().map(|&i| dataset[i].clone()).collect();
        let val_set: Vec<Sample> = held.iter().map(|&i| dataset[i].clone()).collect();
        let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(f as u64), ..cfg.clone() };
        log::info!("fold {f}: {} training, {} held-out samples", train_set.len(), val_set.len());
        let out = train(&fold_cfg, &train_set, &val_set, &mut |r| observer(f, r))?;
        let mut selected = out.selected().clone();
        let held_samples: Vec<(usize, &Sample)> = held.iter().map(|&i| (i, &dataset[i])).collect();
        let report = evaluate(&mut selected, &held_samples, cfg.window.as_deref())?;
        let agg = report.aggregate();
        summary.push(&format!("fold{f}"), agg.counts, agg.cells);
        if summary.notes.is_empty() {
            summary.notes = report.notes.clone();
        }
        if let Some(dir) = out_dir {
            let fold_dir = dir.join(format!("fold{f}"));
            out.write(&fold_dir)?;
            report.write_csv(&fold_dir.join("metrics.csv"))?;
        }
        fold_reports.push(report);
        outputs.push(out);
    }
    if let Some(dir) = out_dir {
        summary.write_csv(&dir.join("summary.csv"))?;
    }
    Ok(FoldExperiment { fold_reports, summary, outputs })
}
