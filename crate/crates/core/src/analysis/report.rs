use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::montage;
use crate::intervention::Provenance;

use super::{ScanOutput, SweepOutput};

/// Files written for one run, relative to its directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn finish(self) -> ReportFiles {
        ReportFiles {
            dir: self.dir,
            files: self.files,
        }
    }
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::invalid("csv", e.to_string())
}

#[derive(Serialize)]
struct ScanCsvRow<'a> {
    rank: usize,
    index: usize,
    seed: u64,
    vector_id: &'a str,
    x: Option<usize>,
    y: Option<usize>,
    cosine_similarity: f64,
    l1_distance: f64,
    full_image: &'a str,
    grid_image: &'a str,
}

/// Writes `config.json`, `report.json`, `report.csv`, the per-sample image
/// pairs and the `top4.png` / `bottom4.png` montages (grid row above full
/// row).
pub fn write_scan_report(dir: &Path, config: &serde_json::Value, scan: &ScanOutput) -> Result<ReportFiles> {
    let mut w = Writer::new(dir)?;
    w.json("config.json", config)?;
    let records: Vec<_> = scan.records().collect();
    w.json(
        "report.json",
        &serde_json::json!({
            "config": config,
            "grid_size": scan.grid_size,
            "samples": records.len(),
            "records": records,
        }),
    )?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    for (rank, r) in records.iter().enumerate() {
        let (x, y) = match r.vector.provenance {
            Provenance::Extracted { x, y, .. } => (Some(x), Some(y)),
            _ => (None, None),
        };
        csv.serialize(ScanCsvRow {
            rank,
            index: r.index,
            seed: r.seed,
            vector_id: &r.vector.id,
            x,
            y,
            cosine_similarity: r.cosine_similarity,
            l1_distance: r.l1_distance,
            full_image: &r.full_image,
            grid_image: &r.grid_image,
        })
        .map_err(csv_error)?;
    }
    w.bytes("report.csv", &csv.into_inner().map_err(csv_error)?)?;

    let mut by_index: Vec<_> = scan.samples.iter().collect();
    by_index.sort_by_key(|s| s.record.index);
    for s in by_index {
        w.bytes(&s.record.full_image, &s.full.encode_png()?)?;
        w.bytes(&s.record.grid_image, &s.grid.encode_png()?)?;
    }
    for (name, picks) in [("top4.png", scan.top(4)), ("bottom4.png", scan.bottom(4))] {
        let grid_row = picks.iter().map(|s| s.grid.clone()).collect();
        let full_row = picks.iter().map(|s| s.full.clone()).collect();
        w.bytes(name, &montage(&[grid_row, full_row], 2)?.encode_png()?)?;
    }
    Ok(w.finish())
}

/// Writes `config.json`, `report.json` (every run), `report.csv` (one row
/// per grid size) and `summary.json`.
pub fn write_sweep_report(dir: &Path, config: &serde_json::Value, sweep: &SweepOutput) -> Result<ReportFiles> {
    let mut w = Writer::new(dir)?;
    w.json("config.json", config)?;
    w.json(
        "report.json",
        &serde_json::json!({
            "config": config,
            "spec": sweep.spec,
            "runs": sweep.runs,
        }),
    )?;
    w.bytes("report.csv", sweep.to_csv()?.as_bytes())?;
    w.json("summary.json", &sweep.summary())?;
    Ok(w.finish())
}
