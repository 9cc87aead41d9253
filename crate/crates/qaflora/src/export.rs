//! CSV and JSON export for profiles, weights, and centroids.
//!
//! CSV columns are `layer,adapter_id,value` in ascending layer order, then
//! registry order within a layer. Values are written with 17 significant
//! digits so re-import reproduces the in-memory f64 matrix exactly.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{CentroidSet, DivergenceProfile, FusionWeights};

/// On-disk representation for exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    /// Infer from a path extension (`.csv` / `.json`).
    pub fn from_path(path: &Path) -> Result<ExportFormat> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ExportFormat::Csv),
            Some("json") => Ok(ExportFormat::Json),
            other => Err(Error::Input {
                message: format!("cannot infer export format from extension {other:?}"),
            }),
        }
    }
}

fn check_ids(ids: &[String]) -> Result<()> {
    for id in ids {
        if id.contains(',') || id.contains('\n') || id.contains('\r') {
            return Err(Error::Input {
                message: format!("adapter id {id:?} cannot be written to CSV"),
            });
        }
    }
    Ok(())
}

fn matrix_csv(ids: &[String], rows: &[Vec<f64>]) -> Result<String> {
    check_ids(ids)?;
    let mut out = String::from("layer,adapter_id,value\n");
    for (layer, row) in rows.iter().enumerate() {
        for (id, value) in ids.iter().zip(row.iter()) {
            out.push_str(&format!("{layer},{id},{value:.16e}\n"));
        }
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, &e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        field: "json",
        message: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

/// Export a divergence profile as CSV or JSON.
pub fn export_profile(profile: &DivergenceProfile, path: &Path, format: ExportFormat) -> Result<()> {
    profile.validate()?;
    match format {
        ExportFormat::Csv => write_text(path, &matrix_csv(&profile.adapter_ids, &profile.values)?),
        ExportFormat::Json => write_json(path, profile),
    }
}

/// Export fusion weights as CSV or JSON.
pub fn export_weights(weights: &FusionWeights, path: &Path, format: ExportFormat) -> Result<()> {
    weights.validate()?;
    match format {
        ExportFormat::Csv => write_text(path, &matrix_csv(&weights.adapter_ids, &weights.alphas)?),
        ExportFormat::Json => write_json(path, weights),
    }
}

/// Re-import a `layer,adapter_id,value` CSV into `(adapter_ids, rows)`.
pub fn import_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, &e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("layer,adapter_id,value") => {}
        other => {
            return Err(Error::Format {
                field: "header",
                message: format!("expected layer,adapter_id,value, got {other:?}"),
            })
        }
    }
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (layer, id, value) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(i), Some(v)) => (l, i, v),
            _ => {
                return Err(Error::Format {
                    field: "row",
                    message: format!("line {}: expected 3 columns", n + 2),
                })
            }
        };
        let layer: usize = layer.parse().map_err(|_| Error::Format {
            field: "layer",
            message: format!("line {}: bad layer index {layer:?}", n + 2),
        })?;
        let value: f64 = value.parse().map_err(|_| Error::Format {
            field: "value",
            message: format!("line {}: bad value {value:?}", n + 2),
        })?;
        if layer == rows.len() {
            rows.push(Vec::new());
        } else if layer != rows.len() - 1 {
            return Err(Error::Format {
                field: "layer",
                message: format!("line {}: layers must ascend contiguously", n + 2),
            });
        }
        if layer == 0 {
            ids.push(id.to_string());
        } else {
            let col = rows[layer].len();
            if ids.get(col).map(String::as_str) != Some(id) {
                return Err(Error::Format {
                    field: "adapter_id",
                    message: format!("line {}: adapter order differs from layer 0", n + 2),
                });
            }
        }
        rows[layer].push(value);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            field: "row",
            message: "no data rows".to_string(),
        });
    }
    for (l, row) in rows.iter().enumerate() {
        if row.len() != ids.len() {
            return Err(Error::Format {
                field: "row",
                message: format!("layer {l} has {} entries, expected {}", row.len(), ids.len()),
            });
        }
    }
    Ok((ids, rows))
}

/// Write a centroid set (`.cen.json`).
pub fn save_centroids(path: &Path, centroids: &CentroidSet) -> Result<()> {
    centroids.validate()?;
    write_json(path, centroids)
}

/// Load a centroid set (`.cen.json`).
pub fn load_centroids(path: &Path) -> Result<CentroidSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, &e))?;
    let set: CentroidSet = serde_json::from_str(&text).map_err(|e| Error::Format {
        field: "centroids",
        message: e.to_string(),
    })?;
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Granularity;
    use crate::fusion::Measure;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("qaflora-export-{}-{name}", std::process::id()));
        p
    }

    fn sample_profile() -> DivergenceProfile {
        DivergenceProfile {
            query_id: "q".to_string(),
            adapter_ids: vec!["math".to_string(), "code".to_string()],
            measure: Measure::Kl,
            granularity: Granularity::LastToken,
            values: vec![
                vec![std::f64::consts::PI, 3.0e-17],
                vec![1.0 / 3.0, 7.25],
            ],
        }
    }

    #[test]
    fn csv_row_count_and_order() {
        let path = tmp("rows.prof.csv");
        export_profile(&sample_profile(), &path, ExportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4); // header + N·k
        assert!(lines[1].starts_with("0,math,"));
        assert!(lines[2].starts_with("0,code,"));
        assert!(lines[3].starts_with("1,math,"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn csv_reimport_is_exact() {
        let path = tmp("exact.prof.csv");
        let profile = sample_profile();
        export_profile(&profile, &path, ExportFormat::Csv).unwrap();
        let (ids, rows) = import_matrix_csv(&path).unwrap();
        assert_eq!(ids, profile.adapter_ids);
        for (a, b) in rows.iter().flatten().zip(profile.values.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn json_roundtrip() {
        let path = tmp("p.prof.json");
        let profile = sample_profile();
        export_profile(&profile, &path, ExportFormat::Json).unwrap();
        let back: DivergenceProfile =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, profile);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn comma_in_id_rejected() {
        let mut profile = sample_profile();
        profile.adapter_ids[0] = "ma,th".to_string();
        let path = tmp("bad.prof.csv");
        assert!(matches!(
            export_profile(&profile, &path, ExportFormat::Csv),
            Err(Error::Input { .. })
        ));
    }
}
