use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use super::{auc_roc, basic_rates, binarize, centerline_metrics, confusion, dice_coefficient, or_ur};
use super::{CenterlineScores, ConfusionCounts, RocCurve, CENTERLINE_TOLERANCE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COLUMNS: [&str; 11] = ["acc", "se", "sp", "fnr", "fpr", "auc", "dice", "or", "ur", "cl_se", "cl_fdr"];

/// One report value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Value(f64),
    /// The metric applies but its denominator vanished.
    Undefined,
    /// The metric was not requested.
    NotApplicable,
}

impl Cell {
    pub fn value(self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(v),
            _ => None,
        }
    }

    fn from_option(v: Option<f64>) -> Self {
        v.map_or(Cell::Undefined, Cell::Value)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Value(v) => write!(f, "{v}"),
            Cell::Undefined => f.write_str("undefined"),
            Cell::NotApplicable => f.write_str("n/a"),
        }
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "undefined" => Ok(Cell::Undefined),
            "n/a" => Ok(Cell::NotApplicable),
            _ => s.parse().map(Cell::Value).map_err(|_| Error::parse(0, format!("bad report value {s:?}"))),
        }
    }
}

/// Metrics for one prediction against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub name: String,
    pub confusion: ConfusionCounts,
    pub auc: Option<f64>,
    pub dice: f64,
    pub over_under: Option<super::OverUnder>,
    pub centerline: Option<CenterlineScores>,
}

impl SampleMetrics {
    /// `prob` is thresholded at 0.5 for the count-based metrics and used as
    /// the score map for AUC. Centerline scores are computed when
    /// `gt_centerline` is given.
    pub fn evaluate(name: &str, prob: &Tensor<f32>, gt: &Tensor<f32>, gt_centerline: Option<&Tensor<f32>>) -> Result<Self> {
        let pred = binarize(prob, 0.5);
        Ok(SampleMetrics {
            name: name.to_string(),
            confusion: confusion(&pred, gt)?,
            auc: auc_roc(prob, gt)?.map(|c| c.auc),
            dice: dice_coefficient(&pred, gt)?,
            over_under: or_ur(&pred, gt)?,
            centerline: gt_centerline.map(|c| centerline_metrics(&pred, c, CENTERLINE_TOLERANCE)).transpose()?,
        })
    }

    pub fn cells(&self) -> [Cell; 11] {
        let r = basic_rates(&self.confusion);
        let ou = |f: fn(&super::OverUnder) -> f64| Cell::from_option(self.over_under.as_ref().map(f));
        let (cl_se, cl_fdr) = match &self.centerline {
            Some(c) => (Cell::from_option(c.se), Cell::from_option(c.fdr)),
            None => (Cell::NotApplicable, Cell::NotApplicable),
        };
        [
            Cell::from_option(r.acc),
            Cell::from_option(r.se),
            Cell::from_option(r.sp),
            Cell::from_option(r.fnr),
            Cell::from_option(r.fpr),
            Cell::from_option(self.auc),
            Cell::Value(self.dice),
            ou(|o| o.or),
            ou(|o| o.ur),
            cl_se,
            cl_fdr,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub counts: ConfusionCounts,
    pub cells: [Cell; 11],
}

impl ReportRow {
    pub fn get(&self, column: &str) -> Option<Cell> {
        COLUMNS.iter().position(|c| *c == column).map(|i| self.cells[i])
    }
}

/// Mean over the defined values, `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-item rows plus an aggregate row holding summed counts and the mean
/// of every column over the rows where it is defined.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// Written as `#` comment lines above the table.
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn from_samples(samples: &[SampleMetrics]) -> Self {
        let rows = samples
            .iter()
            .map(|s| ReportRow { name: s.name.clone(), counts: s.confusion, cells: s.cells() })
            .collect();
        let mut report = MetricsReport { rows, notes: Vec::new() };
        if samples.iter().any(|s| s.centerline.is_some()) {
            report.notes.push(format!(
                "cl_fdr = skeleton pixels farther than {CENTERLINE_TOLERANCE} px from the reference centerline / all skeleton pixels"
            ));
        }
        report
    }

    pub fn push(&mut self, name: &str, counts: ConfusionCounts, cells: [Cell; 11]) {
        self.rows.push(ReportRow { name: name.to_string(), counts, cells });
    }

    pub fn aggregate(&self) -> ReportRow {
        let counts = self.rows.iter().fold(ConfusionCounts::default(), |acc, r| acc + r.counts);
        let mut cells = [Cell::NotApplicable; 11];
        for (i, cell) in cells.iter_mut().enumerate() {
            let column: Vec<Option<f64>> = self.rows.iter().map(|r| r.cells[i].value()).collect();
            *cell = match mean_defined(&column) {
                Some(v) => Cell::Value(v),
                None if self.rows.iter().any(|r| r.cells[i] == Cell::Undefined) => Cell::Undefined,
                None => Cell::NotApplicable,
            };
        }
        ReportRow { name: "aggregate".into(), counts, cells }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for n in &self.notes {
            writeln!(out, "# {n}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["name", "tp", "fp", "tn", "fn"];
        header.extend(COLUMNS);
        w.write_record(&header)?;
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            let c = r.counts;
            let mut rec = vec![r.name.clone(), c.tp.to_string(), c.fp.to_string(), c.tn.to_string(), c.fn_.to_string()];
            rec.extend(r.cells.iter().map(Cell::to_string));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Parse a report written by [`MetricsReport::write_csv`]; the final
    /// aggregate row is dropped and recomputed on demand.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let notes = text.lines().take_while(|l| l.starts_with("# ")).map(|l| l[2..].to_string()).collect();
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 5 + COLUMNS.len() {
                return Err(Error::parse(0, format!("report row has {} fields", rec.len())));
            }
            let num = |i: usize| rec[i].parse::<u64>().map_err(|_| Error::parse(0, format!("bad count {:?}", &rec[i])));
            let counts = ConfusionCounts { tp: num(1)?, fp: num(2)?, tn: num(3)?, fn_: num(4)? };
            let mut cells = [Cell::NotApplicable; 11];
            for (i, c) in cells.iter_mut().enumerate() {
                *c = rec[5 + i].parse()?;
            }
            rows.push(ReportRow { name: rec[0].to_string(), counts, cells });
        }
        if rows.last().is_some_and(|r| r.name == "aggregate") {
            rows.pop();
        }
        Ok(MetricsReport { rows, notes })
    }
}

/// `threshold,fpr,tpr` rows, thresholds written as `inf` / `-inf` at the ends.
pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
