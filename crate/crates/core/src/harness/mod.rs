//! Config-driven experiments: stream construction, scenario execution,
//! checkpoints and aggregate tables.

mod checkpoint;
mod config;
mod run;
mod table;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, NetworkConfig, RunSpec, Scenario, SweepAxis};
pub use run::{
    build_stream, concat_training, metric_for, run_dir, run_experiment, run_partial, run_single, slug,
    ExperimentSummary, RunOutcome,
};
pub use table::{aggregate, emit_table, median, median_sorted, CellStats, Table, TableValue};

use crate::error::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "RAWM_OUTPUT_ROOT";

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Every `report.json` below `root`, in path order.
pub fn collect_reports(root: &Path) -> Result<Vec<crate::metrics::EvalReport>> {
    let mut paths = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "report.json") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            crate::metrics::EvalReport::from_json(&text)
        })
        .collect()
}
