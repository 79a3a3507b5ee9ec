//! `calibrate`, `train` and `audit` commands.
//!
//! Exit codes: 0 success, 2 validation/configuration error, 3 calibration
//! failure, 4 training failure, 5 audit FAIL (also used when a finished
//! training run does not exhaust its budgets).

pub mod config;

use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crate::accountant::{format_sig6, read_ledger_csv, LedgerEntry};
use crate::calibration::ParamArtifact;
use crate::engine::{self, PointAssignment};
use crate::model::Model;
use crate::{Error, GroupId};

pub use config::RunConfig;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_CALIBRATION: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_AUDIT_FAIL: i32 = 5;

pub const PARAMS_FILE: &str = "params.json";
pub const MODEL_FILE: &str = "model.bin";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const METRICS_FILE: &str = "metrics.csv";
const LOCK_FILE: &str = ".idp.lock";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Calibration { .. } | Error::Infeasible { .. } => EXIT_CALIBRATION,
            Error::Training { .. } => EXIT_TRAINING,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Exclusive lock on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError {
                code: EXIT_VALIDATION,
                message: format!(
                    "output directory {} is in use by another run ({} exists)",
                    dir.display(),
                    path.display()
                ),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub struct CalibrateOutput {
    pub artifact: ParamArtifact,
    pub params_path: PathBuf,
    pub summary: String,
}

pub fn calibration_table(artifact: &ParamArtifact) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "method {}  steps {}  base rate {}  base clip {}  delta {}",
        artifact.method,
        artifact.steps,
        format_sig6(artifact.base_rate),
        artifact.base_clip,
        artifact.delta
    );
    if let Some(w) = artifact.weight {
        let _ = writeln!(s, "sample weight {w}");
    }
    let _ = writeln!(s, "shared noise multiplier {}", format_sig6(artifact.sigma_shared));
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>9} {:>11} {:>11} {:>11}",
        "group", "size", "epsilon", "q_p", "sigma_p", "c_p"
    );
    for g in &artifact.groups {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>9} {:>11} {:>11} {:>11}",
            g.id.as_str(),
            g.size,
            g.epsilon,
            format_sig6(g.q),
            format_sig6(g.sigma),
            format_sig6(g.clip)
        );
    }
    s
}

pub fn cmd_calibrate(config: &RunConfig, out_dir: &Path) -> CliResult<CalibrateOutput> {
    let run = config.resolve()?;
    let artifact = ParamArtifact::calibrate(
        &run.spec,
        run.method,
        run.weight,
        run.base_rate(),
        run.train.steps,
        run.train.base_clip,
        &run.options,
    )?;
    let _lock = DirLock::acquire(out_dir)?;
    let params_path = out_dir.join(PARAMS_FILE);
    let mut json = serde_json::to_string_pretty(&artifact).map_err(Error::from)?;
    json.push('\n');
    write_atomic(&params_path, json.as_bytes())?;
    let summary = calibration_table(&artifact);
    Ok(CalibrateOutput {
        artifact,
        params_path,
        summary,
    })
}

pub fn read_artifact(path: &Path) -> CliResult<ParamArtifact> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_VALIDATION,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError {
        code: EXIT_VALIDATION,
        message: format!("malformed parameter file {}: {e}", path.display()),
    })
}

#[derive(Debug, Clone)]
pub struct GroupSpend {
    pub id: GroupId,
    pub spent: f64,
    pub budget: f64,
    pub within_tolerance: bool,
}

pub struct TrainOutput {
    pub spends: Vec<GroupSpend>,
    pub final_accuracy: f64,
    pub mean_batch_size: f64,
}

impl TrainOutput {
    pub fn exhausted(&self) -> bool {
        self.spends.iter().all(|s| s.within_tolerance)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "final accuracy {:.4}  mean batch size {:.2}", self.final_accuracy, self.mean_batch_size);
        for g in &self.spends {
            let _ = writeln!(
                s,
                "{:<12} spent {} of {}  {}",
                g.id.as_str(),
                format_sig6(g.spent),
                g.budget,
                if g.within_tolerance { "ok" } else { "MISMATCH" }
            );
        }
        s
    }
}

pub fn cmd_train(config: &RunConfig, params: &Path, out_dir: &Path) -> CliResult<TrainOutput> {
    let run = config.resolve()?;
    let artifact = read_artifact(params)?;
    engine::check_consistency(&run.dataset, &artifact, &run.train)?;
    let spec_matches = run.spec.groups().iter().all(|g| {
        artifact
            .group(&g.id)
            .is_some_and(|a| a.epsilon == g.epsilon && a.size == g.size)
    }) && (artifact.delta - run.spec.delta()).abs() <= 1e-15;
    if !spec_matches {
        return Err(CliError {
            code: EXIT_VALIDATION,
            message: "parameter file budgets do not match the config's privacy spec".into(),
        });
    }

    let _lock = DirLock::acquire(out_dir)?;
    let assignment = PointAssignment::new(&run.dataset, &artifact)?;
    let model = Model::init(run.architecture, run.train.seed)?;
    let outcome = engine::train(
        model,
        &run.dataset,
        &assignment,
        &artifact,
        &run.train,
        run.test.as_ref(),
    )?;

    let mut model_bytes = Vec::new();
    outcome.model.write_to(&mut model_bytes)?;
    let mut ledger_bytes = Vec::new();
    outcome.ledger.write_csv(&mut ledger_bytes)?;
    let mut metrics_bytes = Vec::new();
    outcome.metrics.write_csv(&mut metrics_bytes)?;
    write_atomic(&out_dir.join(MODEL_FILE), &model_bytes)?;
    write_atomic(&out_dir.join(LEDGER_FILE), &ledger_bytes)?;
    write_atomic(&out_dir.join(METRICS_FILE), &metrics_bytes)?;

    let spends = engine::exhaustion_report(&outcome.ledger, &artifact, config.privacy.precision)?
        .into_iter()
        .map(|(id, spent, budget, ok)| GroupSpend {
            id,
            spent,
            budget,
            within_tolerance: ok,
        })
        .collect();
    Ok(TrainOutput {
        spends,
        final_accuracy: outcome.metrics.final_accuracy,
        mean_batch_size: outcome.metrics.mean_batch_size(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditStatus {
    Pass,
    /// Spend exceeds the budget.
    OverSpend,
    /// The run stopped early or left budget unused beyond tolerance.
    UnderSpend,
    NonMonotone,
    Missing,
}

impl fmt::Display for AuditStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditStatus::Pass => "PASS",
            AuditStatus::OverSpend => "FAIL (over budget)",
            AuditStatus::UnderSpend => "FAIL (under-spend: budget not exhausted)",
            AuditStatus::NonMonotone => "FAIL (spend decreases between checkpoints)",
            AuditStatus::Missing => "FAIL (group missing from ledger)",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupAudit {
    pub id: GroupId,
    pub budget: f64,
    /// Spend at the last checkpoint at or before 25/50/75/100% of the steps.
    pub trajectory: [Option<f64>; 4],
    pub final_step: u64,
    pub final_epsilon: f64,
    pub status: AuditStatus,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub steps: u64,
    pub groups: Vec<GroupAudit>,
    pub unknown_groups: Vec<GroupId>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.unknown_groups.is_empty() && self.groups.iter().all(|g| g.status == AuditStatus::Pass)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>9} {:>10} {:>10} {:>10} {:>10}  status",
            "group", "budget", "25%", "50%", "75%", "100%"
        )?;
        for g in &self.groups {
            let cells: Vec<String> = g
                .trajectory
                .iter()
                .map(|v| v.map_or("-".to_string(), format_sig6))
                .collect();
            writeln!(
                f,
                "{:<12} {:>9} {:>10} {:>10} {:>10} {:>10}  {}",
                g.id.as_str(),
                g.budget,
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                g.status
            )?;
        }
        for u in &self.unknown_groups {
            writeln!(f, "{:<12} FAIL (group not in config)", u.as_str())?;
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Relative slack for six-significant-digit rounding in the ledger file.
const PRINT_SLACK: f64 = 5e-6;

pub fn audit_entries(entries: &[LedgerEntry], config: &RunConfig) -> AuditReport {
    let steps = config.train.steps;
    let precision = config.privacy.precision;
    let mut groups = Vec::new();
    for (id, budget) in config.budgets() {
        let rows: Vec<&LedgerEntry> = entries.iter().filter(|e| e.group_id == id).collect();
        if rows.is_empty() {
            groups.push(GroupAudit {
                id,
                budget,
                trajectory: [None; 4],
                final_step: 0,
                final_epsilon: 0.0,
                status: AuditStatus::Missing,
            });
            continue;
        }
        let at = |frac: f64| {
            let limit = (frac * steps as f64).floor() as u64;
            rows.iter().filter(|r| r.step <= limit).max_by_key(|r| r.step).map(|r| r.epsilon_spent)
        };
        let trajectory = [at(0.25), at(0.5), at(0.75), at(1.0)];
        let last = rows.iter().max_by_key(|r| r.step).expect("non-empty");
        let mut sorted = rows.clone();
        sorted.sort_by_key(|r| r.step);
        let monotone = sorted
            .windows(2)
            .all(|w| w[1].step > w[0].step && w[1].epsilon_spent >= w[0].epsilon_spent);
        let over = rows.iter().any(|r| r.epsilon_spent > budget * (1.0 + PRINT_SLACK));
        let tol = precision.max(0.01 * budget);
        let status = if over {
            AuditStatus::OverSpend
        } else if !monotone {
            AuditStatus::NonMonotone
        } else if last.step < steps || budget - last.epsilon_spent > tol {
            AuditStatus::UnderSpend
        } else {
            AuditStatus::Pass
        };
        groups.push(GroupAudit {
            id,
            budget,
            trajectory,
            final_step: last.step,
            final_epsilon: last.epsilon_spent,
            status,
        });
    }
    let known: Vec<GroupId> = config.budgets().into_iter().map(|(g, _)| g).collect();
    let mut unknown_groups: Vec<GroupId> = entries
        .iter()
        .map(|e| e.group_id.clone())
        .filter(|g| !known.contains(g))
        .collect();
    unknown_groups.sort();
    unknown_groups.dedup();
    AuditReport {
        steps,
        groups,
        unknown_groups,
    }
}

pub fn cmd_audit(ledger: &Path, config: &RunConfig, emit_csv: Option<&Path>) -> CliResult<AuditReport> {
    let file = File::open(ledger).map_err(|e| CliError {
        code: EXIT_VALIDATION,
        message: format!("cannot open {}: {e}", ledger.display()),
    })?;
    let entries = read_ledger_csv(BufReader::new(file))?;
    let report = audit_entries(&entries, config);
    if let Some(out) = emit_csv {
        let mut csv = String::from("step,group,epsilon\n");
        for e in &entries {
            let _ = writeln!(csv, "{},{},{}", e.step, e.group_id, format_sig6(e.epsilon_spent));
        }
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(report)
}
