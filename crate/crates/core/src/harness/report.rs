use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_margin::{GROUP_COUNT, GROUP_NAMES};
use crate::metrics::MetricsReport;
use crate::rl_margin::{Action, PolicyTable, StateSpace};

use super::config::RunConfig;
use super::margin_phase::PhaseLog;

pub const REPORT_SCHEMA: u32 = 1;

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POLICY_FILE: &str = "policy_grid.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub mae: f64,
    pub group_mae: [Option<f64>; GROUP_COUNT],
    pub margins: [f64; GROUP_COUNT],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub state: usize,
    pub group: usize,
    pub d_bucket: usize,
    pub deviation: f64,
    pub m_bucket: usize,
    pub margin: f64,
    pub action: Action,
    pub q_values: [f64; 3],
}

/// Greedy action over the whole state grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrid {
    pub space: StateSpace,
    pub rows: Vec<PolicyRow>,
}

impl PolicyGrid {
    pub fn new(space: &StateSpace, policy: &PolicyTable) -> Result<Self> {
        if policy.entries.len() != space.len() {
            return Err(Error::Shape(format!(
                "policy over {} states for a space of {}",
                policy.entries.len(),
                space.len()
            )));
        }
        let rows = policy
            .entries
            .iter()
            .map(|e| {
                let s = space.state(e.state)?;
                Ok(PolicyRow {
                    state: e.state,
                    group: s.group,
                    d_bucket: s.d_bucket,
                    deviation: space.deviations.center(s.d_bucket),
                    m_bucket: s.m_bucket,
                    margin: space.margins.value(s.m_bucket),
                    action: e.action,
                    q_values: e.q_values,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            space: space.clone(),
            rows,
        })
    }

    pub const CSV_HEADER: &'static str = "schema,group,group_name,d_bucket,deviation,m_bucket,margin,action,q_decrease,q_keep,q_increase";

    pub fn to_csv(&self, schema: u32) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{schema},{},{},{},{},{},{},{},{},{},{}\n",
                r.group,
                GROUP_NAMES[r.group],
                r.d_bucket,
                r.deviation,
                r.m_bucket,
                r.margin,
                r.action.symbol(),
                r.q_values[0],
                r.q_values[1],
                r.q_values[2]
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub config: RunConfig,
    pub dataset_digest: String,
    pub epochs: Vec<EpochLog>,
    pub phases: Vec<PhaseLog>,
    pub final_margins: [f64; GROUP_COUNT],
    pub metrics: MetricsReport,
    pub policy: Option<PolicyGrid>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })
    }
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the JSON report, the metrics CSV and, when a policy exists, the
/// policy grid CSV. Returns the paths written.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    let p = dir.join(REPORT_FILE);
    write_atomic(&p, report.to_json().as_bytes())?;
    written.push(p);
    let p = dir.join(METRICS_FILE);
    write_atomic(&p, report.metrics.to_csv(REPORT_SCHEMA).as_bytes())?;
    written.push(p);
    if let Some(grid) = &report.policy {
        let p = dir.join(POLICY_FILE);
        write_atomic(&p, grid.to_csv(REPORT_SCHEMA).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
