//! Cartesian parameter scans over bath and system reorganization energies.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, ScanSpec, SystemAxis};
use crate::plot::{write_svg, PlotSeries};
use crate::tasks::{run_cell, CellOutput};
use crate::CliError;

/// One scan cell: its configuration and output name.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

/// Cells in row-major order (η outer, system axis inner).
pub fn cells(base: &RunConfig, spec: &ScanSpec) -> Result<Vec<Cell>, CliError> {
    let (axis, values) = match &spec.system {
        SystemAxis::Lambda(v) => ("lambda", v),
        SystemAxis::Delta(v) => ("delta", v),
    };
    let mut out = Vec::new();
    for &eta in &spec.eta {
        for &x in values {
            let mut cfg = base.clone();
            cfg.task.kind = spec.task;
            cfg.bath.eta = eta;
            cfg.params = match spec.system {
                SystemAxis::Lambda(_) => cfg.params.clone().with_lambda(x)?,
                SystemAxis::Delta(_) => vibcorr::VibronicParams { delta: x, ..cfg.params.clone() },
            };
            cfg.params.validate()?;
            let stem = match spec.task {
                crate::TaskKind::G1 => format!("g1_{}", cfg.task.first),
                _ => format!("g2_{}_{}", cfg.task.first, cfg.task.second),
            };
            out.push(Cell { label: format!("{stem}_eta{eta}_{axis}{x}"), config: cfg });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ManifestEntry {
    file: Option<String>,
    status: String,
    params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize)]
struct Manifest {
    complete: bool,
    cells: Vec<ManifestEntry>,
}

/// Run every cell on a pool of `threads` workers, write one CSV per cell,
/// `manifest.json` and (optionally) `scan.svg`.
///
/// The first failing cell stops cells that have not started yet; the
/// manifest then lists what was finished.
pub fn run_scan(base: &RunConfig, dir: &Path, threads: usize) -> Result<Vec<PathBuf>, CliError> {
    let spec = base.scan.as_ref().ok_or_else(|| crate::ConfigError {
        line: None,
        message: "scan requested without a [scan] block".into(),
    })?;
    let cells = cells(base, spec)?;
    std::fs::create_dir_all(dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    let abort = AtomicBool::new(false);
    let results: Vec<Option<Result<CellOutput, CliError>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                if abort.load(Ordering::SeqCst) {
                    return None;
                }
                let res = run_cell(&cell.config, spec.task).and_then(|mut out| {
                    out.file_name = format!("{}.csv", cell.label);
                    out.write(dir)?;
                    Ok(out)
                });
                if res.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                Some(res)
            })
            .collect()
    });

    let mut entries = Vec::new();
    let mut paths = Vec::new();
    let mut series = Vec::new();
    let mut first_err = None;
    for (cell, res) in cells.iter().zip(results) {
        let params = cell.config.provenance().into_iter().map(|(k, v)| (k, v.into())).collect();
        let (file, status) = match res {
            None => (None, "skipped".to_string()),
            Some(Ok(out)) => {
                paths.push(dir.join(&out.file_name));
                series.push(PlotSeries { label: cell.label.clone(), x: out.trace.grid.clone(), y: out.trace.values.clone() });
                (Some(out.file_name), "ok".to_string())
            }
            Some(Err(e)) => {
                let msg = format!("failed: {e}");
                first_err.get_or_insert(CliError::Scan { cell: cell.label.clone(), source: Box::new(e) });
                (None, msg)
            }
        };
        entries.push(ManifestEntry { file, status, params });
    }
    let manifest = Manifest { complete: first_err.is_none(), cells: entries };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("plain values") + "\n")?;
    paths.push(manifest_path);
    if let Some(e) = first_err {
        return Err(e);
    }
    if base.output.svg && !series.is_empty() {
        let x_label = match spec.task {
            crate::TaskKind::G1 => "t (ps)",
            _ => "τ (ps)",
        };
        let svg = dir.join("scan.svg");
        write_svg(&svg, &series, x_label, "value")?;
        paths.push(svg);
    }
    Ok(paths)
}
