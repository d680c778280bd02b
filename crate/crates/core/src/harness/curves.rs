use std::fs;
use std::path::Path;

use super::{io_err, EpisodeRecord, HarnessError, Result};

pub const CURVES_HEADER: &str = "episode,train_loss,train_acc,val_loss,val_acc,lr,seconds";

/// Values are written with `{:?}` so they read back bit-exactly.
pub fn write_curves(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.episode, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Parses a curves file. Rows are numbered from 1 after the header.
pub fn read_curves(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |row: usize, detail: String| HarnessError::Csv {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVES_HEADER => {}
        Some(h) => return Err(bad(0, format!("unexpected header `{h}`"))),
        None => return Err(bad(0, "file is empty".into())),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 7 {
            return Err(bad(row, format!("expected 7 columns, found {}", cells.len())));
        }
        let num = |k: usize| -> Result<f64> {
            cells[k]
                .parse::<f64>()
                .map_err(|_| bad(row, format!("`{}` is not a number", cells[k])))
        };
        let episode = cells[0]
            .parse::<usize>()
            .map_err(|_| bad(row, format!("`{}` is not an episode index", cells[0])))?;
        records.push(EpisodeRecord {
            episode,
            train_loss: num(1)?,
            train_acc: num(2)?,
            val_loss: num(3)?,
            val_acc: num(4)?,
            lr: num(5)?,
            seconds: num(6)?,
        });
    }
    if records.is_empty() {
        return Err(bad(0, "no episode rows".into()));
    }
    Ok(records)
}
