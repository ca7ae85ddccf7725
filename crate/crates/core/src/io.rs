//! Persistence: flat binary fields with JSON sidecars, checkpoints, CSV series
//! and content-addressed experiment directories.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KrfError, Result};
use crate::flow::{DiagnosticRow, FlowState, IntegralReport, Trajectory};
use crate::grid::{ScalarField, TorusGrid};

pub const MAGIC: &[u8; 4] = b"KRF1";

/// Metadata stored next to every binary field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    /// What the field holds (`phi`, `phi_dot`, `psi`, `rho`, ...).
    pub kind: String,
    pub config_hash: Option<String>,
    pub t: Option<f64>,
    pub step_index: Option<usize>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Sidecar {
    pub fn new(kind: &str, config_hash: Option<&str>) -> Self {
        Self {
            format: "KRF1".into(),
            kind: kind.into(),
            config_hash: config_hash.map(str::to_string),
            t: None,
            step_index: None,
            extra: serde_json::Value::Null,
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn dependency(path: &Path, message: impl Into<String>) -> KrfError {
    KrfError::Dependency {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Encodes a field: magic, `n_dims`, `κ`, points per axis (u32 LE), then node values (f64 LE).
pub fn encode_field(field: &ScalarField) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(12 + 4 * g.n_dims() + 8 * g.node_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(g.n_dims() as u32).to_le_bytes());
    out.extend_from_slice(&(g.base_dims() as u32).to_le_bytes());
    for &p in g.points() {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<ScalarField> {
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| KrfError::Format("truncated header".into()))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(KrfError::Format("missing KRF1 magic".into()));
    }
    let n = u32_at(4)?;
    let k = u32_at(8)?;
    if n == 0 || n > 16 {
        return Err(KrfError::Format(format!("implausible dimension {n}")));
    }
    let points = (0..n).map(|d| u32_at(12 + 4 * d)).collect::<Result<Vec<_>>>()?;
    let grid = TorusGrid::new(n, &points, k).map_err(|e| KrfError::Format(format!("bad grid header: {e}")))?;
    let start = 12 + 4 * n;
    let count = grid.node_count();
    if bytes.len() != start + 8 * count {
        return Err(KrfError::Format(format!(
            "expected {} value bytes, found {}",
            8 * count,
            bytes.len().saturating_sub(start)
        )));
    }
    let values = bytes[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScalarField::new(Arc::new(grid), values)
}

/// Writes `path` (binary) and `path` with extension `json` (sidecar).
pub fn save_field(path: &Path, field: &ScalarField, sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_field(field))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<(ScalarField, Sidecar)> {
    let mut bytes = vec![];
    fs::File::open(path)
        .map_err(|e| dependency(path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    let field = decode_field(&bytes).map_err(|e| dependency(path, e.to_string()))?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| dependency(&side, e.to_string()))?;
    let sidecar = serde_json::from_str(&text).map_err(|e| dependency(&side, e.to_string()))?;
    Ok((field, sidecar))
}

/// Reads a JSON artifact, reporting any failure as a dependency error on `path`.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| dependency(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| dependency(path, e.to_string()))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn checkpoint_name(index: usize) -> String {
    format!("state_{index:05}.krf")
}

/// Saves `φ` and the last `φ̇` of a state as `state_NNNNN.krf` / `state_NNNNN.dot.krf`.
pub fn save_checkpoint(dir: &Path, index: usize, state: &FlowState, config_hash: Option<&str>) -> Result<PathBuf> {
    let path = dir.join(checkpoint_name(index));
    let mut side = Sidecar::new("phi", config_hash);
    side.t = Some(state.t);
    side.step_index = Some(state.step_index);
    save_field(&path, &state.phi, &side)?;
    let mut dot = side.clone();
    dot.kind = "phi_dot".into();
    save_field(&dir.join(format!("state_{index:05}.dot.krf")), &state.last_phi_dot, &dot)?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<FlowState> {
    let (phi, side) = load_field(path)?;
    let dot_path = path.with_extension("dot.krf");
    let (dot, _) = load_field(&dot_path)?;
    Ok(FlowState {
        t: side.t.ok_or_else(|| dependency(path, "checkpoint sidecar lacks `t`"))?,
        phi,
        last_phi_dot: dot,
        step_index: side.step_index.unwrap_or(0),
    })
}

/// All checkpoints of a directory in index order.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<FlowState>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| dependency(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
            name.starts_with("state_") && name.ends_with(".krf") && !name.ends_with(".dot.krf")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(dependency(dir, "no checkpoints found"));
    }
    paths.iter().map(|p| load_checkpoint(p)).collect()
}

pub const DIAGNOSTIC_COLUMNS: [&str; 8] = [
    "t",
    "sup_phi",
    "inf_phi",
    "I_t",
    "excess_IplusIprime",
    "dist_static",
    "max_residual",
    "dt",
];

/// Full-precision scientific notation (17 significant digits); empty for `None`.
pub fn fmt_float(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.16e}"))
}

fn parse_float(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| KrfError::Format(format!("not a number: `{s}`")))
    }
}

/// Writes the diagnostic series; `integral` supplies the excess column when present.
pub fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticRow], integral: Option<&IntegralReport>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    w.write_record(DIAGNOSTIC_COLUMNS).map_err(csv_error)?;
    for (k, r) in rows.iter().enumerate() {
        let excess = integral.and_then(|i| i.excess.get(k).copied());
        w.write_record([
            fmt_float(Some(r.t)),
            fmt_float(Some(r.sup_phi)),
            fmt_float(Some(r.inf_phi)),
            fmt_float(Some(r.integral)),
            fmt_float(excess),
            fmt_float(r.dist_static),
            fmt_float(r.max_residual),
            fmt_float(Some(r.dt)),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> KrfError {
    KrfError::Format(e.to_string())
}

pub fn read_diagnostics_csv(path: &Path) -> Result<Vec<DiagnosticRow>> {
    let file = fs::File::open(path).map_err(|e| dependency(path, e.to_string()))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header != DIAGNOSTIC_COLUMNS {
        return Err(dependency(path, format!("unexpected columns {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            let f = |i: usize| parse_float(&rec[i]);
            let need = |i: usize| f(i)?.ok_or_else(|| dependency(path, format!("empty `{}` value", DIAGNOSTIC_COLUMNS[i])));
            Ok(DiagnosticRow {
                t: need(0)?,
                sup_phi: need(1)?,
                inf_phi: need(2)?,
                integral: need(3)?,
                dist_static: f(5)?,
                max_residual: f(6)?,
                dt: need(7)?,
            })
        })
        .collect()
}

/// Writes a CSV with the given header and numeric rows in full precision.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<Option<f64>>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_float(*v))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Trajectory from a checkpoint directory and a diagnostics CSV.
pub fn load_trajectory(checkpoints: &Path, diagnostics: &Path) -> Result<Trajectory> {
    Ok(Trajectory {
        snapshots: load_checkpoints(checkpoints)?,
        diagnostics: read_diagnostics_csv(diagnostics)?,
        rejected_halvings: 0,
    })
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// `root/<hash>`, created if needed.
pub fn experiment_dir(root: &Path, hash: &str) -> Result<PathBuf> {
    let dir = root.join(hash);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
