//! Persisted sweep results: per-cell records, the run document, its
//! validator, and the flat CSV.

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use collafuse::metrics::InversionResult;
use collafuse::protocol::ChannelStats;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 10] = [
    "cut",
    "seed",
    "fd_client",
    "fd_server",
    "probe_f1_mean",
    "inversion_fd_cross",
    "bytes_up",
    "bytes_down",
    "client_steps",
    "server_steps",
];

/// Per-round loss traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub client_losses: Vec<Vec<f64>>,
    pub server_losses: Vec<f64>,
}

/// Everything one (cut, seed) cell produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cut: usize,
    pub seed: u64,
    /// Hex config hash of the cell.
    pub config_hash: String,
    pub fd_client: f64,
    pub fd_client_per_client: Vec<f64>,
    pub fd_server: f64,
    pub probe_f1: Vec<f64>,
    pub probe_f1_mean: f64,
    pub inversion: Vec<InversionResult>,
    pub inversion_fd_cross: f64,
    pub inversion_fd_self: f64,
    pub channel_train: ChannelStats,
    pub channel_infer: ChannelStats,
    pub client_steps: u64,
    pub server_steps: u64,
    pub traces: Vec<RoundTrace>,
}

impl CellRecord {
    pub fn bytes_up(&self) -> u64 {
        self.channel_train.bytes_up + self.channel_infer.bytes_up
    }

    pub fn bytes_down(&self) -> u64 {
        self.channel_train.bytes_down + self.channel_infer.bytes_down
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
}

impl RunDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run document serializes");
        s.push('\n');
        s
    }

    /// Validates against the schema, then deserializes.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        validate_run(&v)?;
        serde_json::from_value(v).map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS).expect("in-memory write");
        for c in &self.cells {
            w.write_record([
                c.cut.to_string(),
                c.seed.to_string(),
                fmt(c.fd_client),
                fmt(c.fd_server),
                fmt(c.probe_f1_mean),
                fmt(c.inversion_fd_cross),
                c.bytes_up().to_string(),
                c.bytes_down().to_string(),
                c.client_steps.to_string(),
                c.server_steps.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Structural schema check of a run document.
pub fn validate_run(v: &Value) -> Result<()> {
    let bad = |m: String| Err(CliError::Schema(m));
    let obj = v.as_object().ok_or_else(|| CliError::Schema("document is not an object".into()))?;
    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(x) if x == SCHEMA_VERSION as u64 => {}
        other => return bad(format!("schema_version {other:?}, expected {SCHEMA_VERSION}")),
    }
    if !obj.get("config_hash").and_then(Value::as_str).is_some_and(is_hash) {
        return bad("config_hash must be 16 hex digits".into());
    }
    if !obj.get("config").is_some_and(Value::is_object) {
        return bad("config must be an object".into());
    }
    let cells = obj.get("cells").and_then(Value::as_array).ok_or_else(|| CliError::Schema("cells must be an array".into()))?;
    for (i, c) in cells.iter().enumerate() {
        validate_cell(c).map_err(|e| CliError::Schema(format!("cells[{i}]: {e}")))?;
    }
    Ok(())
}

fn is_hash(s: &str) -> bool {
    s.len() == 16 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

fn validate_cell(c: &Value) -> std::result::Result<(), String> {
    let o = c.as_object().ok_or("not an object")?;
    let num = |k: &str| o.get(k).and_then(Value::as_f64).ok_or(format!("{k} must be a number"));
    let uint = |k: &str| o.get(k).and_then(Value::as_u64).ok_or(format!("{k} must be a non-negative integer"));
    let arr = |k: &str| o.get(k).and_then(Value::as_array).ok_or(format!("{k} must be an array"));
    uint("cut")?;
    uint("seed")?;
    uint("client_steps")?;
    uint("server_steps")?;
    if !o.get("config_hash").and_then(Value::as_str).is_some_and(is_hash) {
        return Err("config_hash must be 16 hex digits".into());
    }
    for k in ["fd_client", "fd_server", "inversion_fd_cross", "inversion_fd_self"] {
        if num(k)? < 0.0 {
            return Err(format!("{k} is negative"));
        }
    }
    let f1 = num("probe_f1_mean")?;
    if !(0.0..=1.0).contains(&f1) {
        return Err(format!("probe_f1_mean {f1} outside [0, 1]"));
    }
    for k in ["fd_client_per_client", "probe_f1"] {
        if !arr(k)?.iter().all(|x| x.as_f64().is_some_and(|v| v >= 0.0)) {
            return Err(format!("{k} must hold non-negative numbers"));
        }
    }
    for inv in arr("inversion")? {
        for k in ["attacker", "victim", "t_zeta"] {
            inv.get(k).and_then(Value::as_u64).ok_or(format!("inversion.{k} must be an integer"))?;
        }
        for k in ["cross_fd", "self_fd"] {
            inv.get(k).and_then(Value::as_f64).ok_or(format!("inversion.{k} must be a number"))?;
        }
    }
    for k in ["channel_train", "channel_infer"] {
        let ch = o.get(k).and_then(Value::as_object).ok_or(format!("{k} must be an object"))?;
        for f in ["bytes_up", "bytes_down", "messages", "sim_micros"] {
            ch.get(f).and_then(Value::as_u64).ok_or(format!("{k}.{f} must be an integer"))?;
        }
    }
    for t in arr("traces")? {
        t.get("round").and_then(Value::as_u64).ok_or("traces.round must be an integer")?;
        t.get("client_losses").and_then(Value::as_array).ok_or("traces.client_losses must be an array")?;
        t.get("server_losses").and_then(Value::as_array).ok_or("traces.server_losses must be an array")?;
    }
    Ok(())
}
