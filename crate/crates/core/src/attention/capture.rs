use std::path::Path;

use crate::error::Result;
use crate::tensor::{Real, TensorRef};

/// One captured attention matrix (first batch item). Every row is a
/// distribution: entries are non-negative and sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// 8-bit grayscale heatmap, each row scaled so its maximum is 255.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().copied().fold(0.0f64, f64::max);
            out.extend(row.iter().map(|&v| {
                if max > 0.0 {
                    (v / max * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            }));
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm_bytes())?;
        Ok(())
    }
}

/// Per-pass buffer of attention matrices, holding at most `max_rows` rows
/// of each.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    max_rows: usize,
    maps: Vec<AttentionMap>,
}

impl AttentionCapture {
    pub fn new(max_rows: usize) -> Self {
        AttentionCapture {
            max_rows: max_rows.max(1),
            maps: Vec::new(),
        }
    }

    pub fn maps(&self) -> &[AttentionMap] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<AttentionMap> {
        self.maps
    }

    /// Record batch item 0 of a `[B, R, K]` softmax output. With
    /// `normalized_over_rows` the softmax ran over axis 1, so the stored map
    /// is the transpose (its rows are the distributions).
    pub(crate) fn record<T: Real>(&mut self, label: &str, value: TensorRef<'_, T>, normalized_over_rows: bool) {
        let d = value.dims();
        let (r, k) = (d[1], d[2]);
        let item = &value.data[..r * k];
        let (rows, cols) = if normalized_over_rows { (k, r) } else { (r, k) };
        let keep = rows.min(self.max_rows);
        let mut data = Vec::with_capacity(keep * cols);
        for i in 0..keep {
            for j in 0..cols {
                let v = if normalized_over_rows { item[j * k + i] } else { item[i * k + j] };
                data.push(v.as_f64());
            }
        }
        self.maps.push(AttentionMap {
            label: label.to_string(),
            rows: keep,
            cols,
            data,
        });
    }
}
