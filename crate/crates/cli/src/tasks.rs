//! Single-cell task runners shared by the direct subcommands and scans.

use std::fs;
use std::path::{Path, PathBuf};

use vibcorr::bath::expansion_coeffs;
use vibcorr::correlations::{
    normalization_reference, steady_state_time, CorrelationTrace, Detector, ReferenceRule, Simulator, TimeRun,
};
use vibcorr::oracle::{run_suite, write_reports, OracleReport};
use vibcorr::trace_io::write_trace;
use vibcorr::units::FS_PER_PS;

use crate::config::{Anchor, RunConfig, TaskKind};
use crate::CliError;

/// One computed trace with its header metadata.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub file_name: String,
    pub trace: CorrelationTrace,
    pub metadata: Vec<(String, String)>,
}

impl CellOutput {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(&self.file_name);
        let file = fs::File::create(&path)?;
        write_trace(std::io::BufWriter::new(file), &self.trace, &self.metadata)?;
        Ok(path)
    }
}

/// Simulator for the config; a Drude rate that coincides with a Matsubara
/// frequency is shifted by the documented relative amount.
pub fn simulator(cfg: &RunConfig) -> Result<(Simulator, bool), CliError> {
    let (bath, perturbed) = match expansion_coeffs(&cfg.bath) {
        Err(vibcorr::Error::DegenerateMatsubara { k, rate }) => {
            eprintln!("warning: big_lambda_cm1 = {rate} equals Matsubara frequency {k}; shifting it by 1e-6 relative");
            (cfg.bath.perturbed(), true)
        }
        _ => (cfg.bath.clone(), false),
    };
    let sim = Simulator::with_phonon_basis(cfg.params.clone(), bath, cfg.propagator.clone(), cfg.task.phonon_basis)?
        .with_pre_equilibration(cfg.pre_equilibration_fs);
    Ok((sim, perturbed))
}

fn record_interval_ps(cfg: &RunConfig) -> f64 {
    cfg.propagator.dt * cfg.propagator.record_stride as f64 / FS_PER_PS
}

/// Record-grid times roughly every 0.1 ps up to `t_end_ps`.
fn candidate_anchors(cfg: &RunConfig, t_end_ps: f64) -> Vec<f64> {
    let rec = record_interval_ps(cfg);
    let every = ((0.1 / rec).round() as usize).max(1);
    let n = (t_end_ps / rec).round() as usize;
    (every..=n).step_by(every).map(|i| i as f64 * rec).collect()
}

fn push(meta: &mut Vec<(String, String)>, k: &str, v: impl ToString) {
    meta.push((k.to_string(), v.to_string()));
}

fn reference(
    run: &TimeRun,
    d: Detector,
    cfg: &RunConfig,
    rule: &ReferenceRule,
    meta: &mut Vec<(String, String)>,
) -> Result<f64, CliError> {
    let r = normalization_reference(&run.detection(d), cfg.bath.eta, rule)?;
    push(meta, &format!("reference_{d}"), r.value);
    push(meta, &format!("t_ref_{d}_ps"), r.t_ref_ps);
    Ok(r.value)
}

/// Detection probability `D_c(t)` of the `first` detector.
pub fn run_g1(cfg: &RunConfig) -> Result<CellOutput, CliError> {
    let (sim, perturbed) = simulator(cfg)?;
    let run = sim.time_run(cfg.task.t_end_ps, &[])?;
    let mut meta = cfg.provenance();
    push(&mut meta, "big_lambda_perturbed", perturbed);
    push(&mut meta, "max_trace_error", run.max_trace_error);
    push(&mut meta, "max_hermiticity_error", run.max_hermiticity_error);
    let d = cfg.task.first;
    let mut trace = run.detection(d);
    if cfg.task.normalize {
        let rule = ReferenceRule::for_model(&cfg.params);
        let r = reference(&run, d, cfg, &rule, &mut meta)?;
        trace = trace.normalized_by(r)?;
    }
    Ok(CellOutput { file_name: format!("g1_{d}.csv"), trace, metadata: meta })
}

/// Two-time correlation for the configured detector pair.
pub fn run_g2(cfg: &RunConfig) -> Result<CellOutput, CliError> {
    let (sim, perturbed) = simulator(cfg)?;
    let task = &cfg.task;
    let rule = ReferenceRule::for_model(&cfg.params);
    let closed = cfg.bath.eta == 0.0;
    let fixed = match task.t_anchor {
        Anchor::At(t) => Some(t),
        Anchor::Steady if closed => Some(task.t_anchor_closed_ps),
        Anchor::Steady => None,
    };
    let t_end = fixed.map_or(task.t_end_ps, |t| t.max(task.t_end_ps));
    let snapshots = match fixed {
        Some(t) => vec![t],
        None => candidate_anchors(cfg, t_end),
    };
    let run = sim.time_run(t_end, &snapshots)?;

    let mut meta = cfg.provenance();
    push(&mut meta, "big_lambda_perturbed", perturbed);
    push(&mut meta, "max_trace_error", run.max_trace_error);
    push(&mut meta, "max_hermiticity_error", run.max_hermiticity_error);
    let anchor_ps = match fixed {
        Some(t) => t,
        None => {
            let t_ss = [task.first, task.second]
                .iter()
                .map(|d| steady_state_time(&run.detection(*d), &rule))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(0.0, f64::max);
            push(&mut meta, "t_steady_ps", t_ss);
            *snapshots.iter().find(|&&t| t >= t_ss - 1e-9).ok_or(vibcorr::Error::SteadyStateNotReached { t_end_ps: t_end })?
        }
    };
    push(&mut meta, "t_anchor_used_ps", anchor_ps);
    let anchor = run.snapshot_at(anchor_ps).expect("anchor was requested as a snapshot");
    let reg = sim.regress(anchor, task.first, task.tau_end_ps)?;
    let trace = if task.normalize {
        let r1 = reference(&run, task.first, cfg, &rule, &mut meta)?;
        let r2 = if task.second == task.first { r1 } else { reference(&run, task.second, cfg, &rule, &mut meta)? };
        reg.unnormalized(task.second).normalized_by(r1 * r2)?
    } else {
        reg.unnormalized(task.second)
    };
    Ok(CellOutput { file_name: format!("g2_{}_{}.csv", task.first, task.second), trace, metadata: meta })
}

pub fn run_cell(cfg: &RunConfig, kind: TaskKind) -> Result<CellOutput, CliError> {
    match kind {
        TaskKind::G1 => run_g1(cfg),
        TaskKind::G2 => run_g2(cfg),
        other => unreachable!("{} is not a per-cell task", other.name()),
    }
}

/// Pre-equilibrate and store the hierarchy as a checkpoint plus a JSON
/// summary of the physical state.
pub fn run_equilibrate(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (sim, perturbed) = simulator(cfg)?;
    let mut prop = sim.propagator()?;
    let state = sim.initial_state(&mut prop)?;
    let rho = state.physical();
    let det = sim.detectors();
    let drift = vibcorr::heom::heom_rhs(
        &state,
        state.time,
        sim.operators(),
        &sim.bath,
        vibcorr::DriveField::Off,
        &cfg.propagator,
    )?;
    let drift_norm = vibcorr::linalg::max_abs(&drift.ado(0).to_owned());
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("equilibrated.ckpt");
    state.write_checkpoint(std::io::BufWriter::new(fs::File::create(&ckpt)?))?;
    let mut summary = serde_json::Map::new();
    for (k, v) in cfg.provenance() {
        summary.insert(k, v.into());
    }
    summary.insert("big_lambda_perturbed".into(), perturbed.into());
    summary.insert("n_ados".into(), state.len().into());
    summary.insert("trace".into(), rho.trace().re.into());
    summary.insert("photon_detection".into(), det.probability(Detector::Photon, &rho.elements).into());
    summary.insert("phonon_detection".into(), det.probability(Detector::Phonon, &rho.elements).into());
    summary.insert("hermiticity_deviation".into(), rho.hermiticity_deviation().into());
    summary.insert("max_abs_drho_dt_per_fs".into(), drift_norm.into());
    let json = dir.join("equilibrate.json");
    fs::write(&json, serde_json::to_string_pretty(&summary).expect("plain values") + "\n")?;
    Ok(vec![ckpt, json])
}

/// Run the oracle suite and write `oracle.jsonl`; fails if any check fails.
pub fn run_verify(dir: &Path) -> Result<(PathBuf, Vec<OracleReport>), CliError> {
    let reports = run_suite();
    fs::create_dir_all(dir)?;
    let path = dir.join("oracle.jsonl");
    write_reports(std::io::BufWriter::new(fs::File::create(&path)?), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok((path, reports))
    } else {
        Err(CliError::Oracle(failed.join(", ")))
    }
}
