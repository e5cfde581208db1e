use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use cs2net::data::{read_input, read_label};
use cs2net::metrics::{auc_roc_slices, roc_png, write_gray_png, write_roc_csv, MetricsReport, SampleMetrics};

use super::{data_files, key_with_suffix};
use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Pixel-wise metrics on 2D images.
    Pixel,
    /// Pixel-wise metrics plus centerline SE/FDR with a 3-pixel tolerance.
    Centerline,
    /// Voxel-wise metrics on volumes.
    Volume3d,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Predictions: `{key}_prob` files (or `{key}_mask` when no probability
    /// map exists).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: `{key}_mask` files, plus `{key}_centerline` for
    /// centerline mode.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Pixel)]
    pub mode: Mode,
    /// Output directory for `metrics.csv`, `roc.csv` and `roc.png`.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

fn by_key(files: &[PathBuf], suffix: &str) -> BTreeMap<String, PathBuf> {
    files.iter().filter_map(|p| key_with_suffix(p, suffix).map(|k| (k, p.clone()))).collect()
}

fn unmatched(a: &BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>) -> Vec<String> {
    a.keys().filter(|k| !b.contains_key(*k)).cloned().collect()
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let pred_files = data_files(&args.pred)?;
    let gt_files = data_files(&args.gt)?;
    let mut preds = by_key(&pred_files, "_prob");
    for (k, p) in by_key(&pred_files, "_mask") {
        preds.entry(k).or_insert(p);
    }
    let gts = by_key(&gt_files, "_mask");
    let centerlines = by_key(&gt_files, "_centerline");
    let (missing_gt, missing_pred) = (unmatched(&preds, &gts), unmatched(&gts, &preds));
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        let mut msg = String::from("prediction and ground-truth files do not match");
        if !missing_gt.is_empty() {
            msg.push_str(&format!("; no ground truth for: {}", missing_gt.join(", ")));
        }
        if !missing_pred.is_empty() {
            msg.push_str(&format!("; no prediction for: {}", missing_pred.join(", ")));
        }
        return Err(Failure::usage(msg));
    }
    if preds.is_empty() {
        return Err(Failure::usage(format!("no `_mask` files in {}", args.gt.display())));
    }

    let mut rows = Vec::with_capacity(preds.len());
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (key, pred_path) in &preds {
        let prob = read_input(pred_path)?;
        let gt = read_label(&gts[key])?;
        let rank = gt.dims().len() - 1;
        match (args.mode, rank) {
            (Mode::Volume3d, 3) | (Mode::Pixel | Mode::Centerline, 2) => {}
            (mode, r) => {
                let name = mode.to_possible_value().expect("no skipped variants");
                return Err(Failure::usage(format!("{key}: {r}D data cannot be scored in {} mode", name.get_name())));
            }
        }
        let cl = match args.mode {
            Mode::Centerline => {
                let p = centerlines.get(key).ok_or_else(|| Failure::usage(format!("no `{key}_centerline` file")))?;
                Some(read_label(p)?)
            }
            _ => None,
        };
        rows.push(SampleMetrics::evaluate(key, &prob, &gt, cl.as_ref())?);
        scores.extend_from_slice(prob.data());
        labels.extend_from_slice(gt.data());
    }
    std::fs::create_dir_all(&args.out)?;
    let report = MetricsReport::from_samples(&rows);
    report.write_csv(&args.out.join("metrics.csv"))?;
    match auc_roc_slices(&scores, &labels)? {
        Some(curve) => {
            write_roc_csv(&args.out.join("roc.csv"), &curve)?;
            let size = 256;
            write_gray_png(&args.out.join("roc.png"), size, size, &roc_png(&curve, size))?;
        }
        None => log::warn!("ground truth holds a single class; ROC curve skipped"),
    }
    print_summary(&report, &args.out.join("metrics.csv"));
    Ok(())
}

fn print_summary(report: &MetricsReport, path: &Path) {
    let agg = report.aggregate();
    let cols = ["acc", "se", "sp", "auc", "dice"];
    let parts: Vec<String> = cols.iter().map(|c| format!("{c}={}", agg.get(c).expect("known column"))).collect();
    println!("{} samples: {} ({})", report.rows.len(), parts.join(" "), path.display());
}
