use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, ExperimentConfig, HarnessError, Result};
use crate::data::{DataError, Manifest};

pub const DEFAULT_FRAME_COUNTS: [usize; 5] = [5, 10, 15, 20, 25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frames: usize,
    /// Test-split accuracy.
    pub accuracy: f64,
    /// Test-split mean loss; the selection criterion.
    pub loss: f64,
    pub episodes_run: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub rows: Vec<SweepRow>,
    /// Frame count with the lowest test loss.
    pub selected: usize,
}

/// Index of the row with the lowest loss; ties go to the row with fewer
/// frames, the cheaper input.
pub fn select_frames(rows: &[SweepRow]) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| {
        rows[a]
            .loss
            .total_cmp(&rows[b].loss)
            .then(rows[a].frames.cmp(&rows[b].frames))
    })
}

/// One full training run per frame count, everything else fixed.
pub fn sweep_frames(
    base: &ExperimentConfig,
    manifest: &Manifest,
    counts: &[usize],
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<SweepReport> {
    if counts.is_empty() {
        return Err(HarnessError::Config("no frame counts to sweep".into()));
    }
    let need = *counts.iter().max().expect("non-empty");
    if need > manifest.geometry.frames {
        return Err(DataError::Frames {
            clip: manifest.root().display().to_string(),
            requested: need,
            available: manifest.geometry.frames,
        }
        .into());
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &frames in counts {
        let mut cfg = base.clone();
        cfg.data.frames = frames;
        let outcome = train(&cfg, manifest)?;
        let row = SweepRow {
            frames,
            accuracy: outcome.result.test.accuracy,
            loss: outcome.result.test.loss,
            episodes_run: outcome.result.records.len(),
            truncated: outcome.result.truncated,
        };
        progress(&row);
        rows.push(row);
    }
    let selected = rows[select_frames(&rows).expect("non-empty")].frames;
    Ok(SweepReport {
        name: base.name.clone(),
        rows,
        selected,
    })
}

impl SweepReport {
    /// Plain-text table, one row per frame count, selected row marked.
    pub fn to_table(&self) -> String {
        let mut out = format!("Frame sweep: {}\n", self.name);
        out.push_str("| Frames | Precision | Loss function |\n|---|---|---|\n");
        for r in &self.rows {
            let mark = if r.frames == self.selected { " *" } else { "" };
            let trunc = if r.truncated { " (truncated)" } else { "" };
            let _ = writeln!(out, "| {}{mark} | {:.4} | {:.4}{trunc} |", r.frames, r.accuracy, r.loss);
        }
        let _ = writeln!(
            out,
            "selected: {} frames (lowest test loss; ties go to fewer frames)",
            self.selected
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(frames: usize, loss: f64) -> SweepRow {
        SweepRow {
            frames,
            accuracy: 0.5,
            loss,
            episodes_run: 1,
            truncated: false,
        }
    }

    #[test]
    fn argmin_with_tie_break() {
        let rows = [row(5, 0.7), row(10, 0.6), row(15, 0.65), row(20, 0.6), row(25, 0.9)];
        assert_eq!(rows[select_frames(&rows).unwrap()].frames, 10);
        let tied: Vec<_> = DEFAULT_FRAME_COUNTS.iter().rev().map(|&f| row(f, 0.6931)).collect();
        assert_eq!(tied[select_frames(&tied).unwrap()].frames, 5);
        assert_eq!(select_frames(&[]), None);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let report = SweepReport {
            name: "x".into(),
            rows: DEFAULT_FRAME_COUNTS.iter().map(|&f| row(f, f as f64)).collect(),
            selected: 5,
        };
        let t = report.to_table();
        assert_eq!(t.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Frames")).count(), 5);
        assert!(t.contains("| 5 * |"));
    }
}
