//! Run directory layout:
//!
//! ```text
//! config.json
//! metrics.csv                      step,loss,ppl
//! checkpoints/cartridge-step-000000.crtg
//! final.crtg
//! ```

use std::fs;
use std::path::Path;

use crate::cartridge::{load_cartridge, save_cartridge};
use crate::error::{LabError, Result};
use crate::numerics::Real;

use super::{Checkpoint, CheckpointSeries, MetricsRow, TrainConfig};

const CHECKPOINT_DIR: &str = "checkpoints";

fn checkpoint_name(step: usize) -> String {
    format!("cartridge-step-{step:06}.crtg")
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(LabError::from)).collect()
}

/// Writes the series into `dir`, creating it if needed.
pub fn save_run<T: Real>(dir: &Path, series: &CheckpointSeries<T>, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    write_metrics_csv(&series.metrics, &dir.join("metrics.csv"))?;
    for c in &series.checkpoints {
        save_cartridge(&c.cartridge, &dir.join(CHECKPOINT_DIR).join(checkpoint_name(c.step)))?;
    }
    save_cartridge(series.final_cartridge(), &dir.join("final.crtg"))?;
    Ok(())
}

/// Checkpoints of a saved run, in step order.
pub fn load_checkpoints<T: Real>(dir: &Path) -> Result<Vec<Checkpoint<T>>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir.join(CHECKPOINT_DIR))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let step = name
            .strip_prefix("cartridge-step-")
            .and_then(|s| s.strip_suffix(".crtg"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(step) = step {
            found.push((step, path));
        }
    }
    found.sort_by_key(|(s, _)| *s);
    found
        .into_iter()
        .map(|(step, path)| {
            Ok(Checkpoint {
                step,
                cartridge: load_cartridge(&path)?,
            })
        })
        .collect()
}
