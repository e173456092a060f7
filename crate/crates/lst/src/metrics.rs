//! Metrics records and their on-disk forms: CSV with a fixed, documented
//! column order plus a JSONL mirror.
//!
//! Determinism contract: the CSV *body* (header + data rows) is a pure
//! function of the records. Anything run-dependent — wall-clock, timestamps —
//! goes on `#`-prefixed comment lines above the header, which readers skip.
//! Floats are rendered shortest-roundtrip and parse back bit-exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One aggregate evaluation: a group of episodes run under one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Producing subcommand ("meta-test", "ablate", "sweep-retrain", ...).
    pub group: String,
    /// Ablation setting tag.
    pub setting: String,
    /// Swept knob for this row ("m=10", "distractors=3"), empty when none.
    pub variant: String,
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// 95% CI half-width; None for fewer than two episodes.
    pub ci95: Option<f64>,
    pub mean_query_loss: f64,
    /// Per-stage pseudo-label accuracy over drawn subsets; None where a stage
    /// used no pseudo-labels.
    pub stage_pl: Vec<Option<f64>>,
    /// Per-stage pseudo-label accuracy over the retained (selected) samples.
    pub stage_selected_pl: Vec<Option<f64>>,
    /// Episodes in which at least one class kept fewer than Z samples.
    pub shortfall_classes: usize,
    /// Excluded from the CSV body (kept on the comment line and in JSONL).
    pub wall_clock_seconds: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// One episode's outcome inside a group/setting/variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub group: String,
    pub setting: String,
    pub variant: String,
    pub index: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub query_loss: f64,
    pub selected_total: usize,
    pub shortfall_classes: usize,
    pub stage_pl: Vec<Option<f64>>,
    pub stage_selected_pl: Vec<Option<f64>>,
    pub config_hash: String,
}

/// Column order of `metrics*.csv`. `wall_clock_seconds` is deliberately
/// absent: it would break byte-identical reruns.
pub const METRICS_COLUMNS: [&str; 12] = [
    "group",
    "setting",
    "variant",
    "episodes",
    "mean_accuracy",
    "ci95",
    "mean_query_loss",
    "stage_pl",
    "stage_selected_pl",
    "shortfall_classes",
    "config_hash",
    "seed",
];

/// Column order of `metrics-episodes*.csv`.
pub const EPISODE_COLUMNS: [&str; 12] = [
    "group",
    "setting",
    "variant",
    "index",
    "seed",
    "accuracy",
    "query_loss",
    "selected_total",
    "shortfall_classes",
    "stage_pl",
    "stage_selected_pl",
    "config_hash",
];

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt_f64(x),
        None => "na".to_string(),
    }
}

/// Semicolon-join a per-stage list; empty list renders as the empty field.
fn fmt_stages(vs: &[Option<f64>]) -> String {
    vs.iter().map(|v| fmt_opt(*v)).collect::<Vec<_>>().join(";")
}

fn parse_f64(field: &str, column: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Contract(format!("cannot parse '{field}' in column {column}")))
}

fn parse_usize(field: &str, column: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::Contract(format!("cannot parse '{field}' in column {column}")))
}

fn parse_u64(field: &str, column: &str) -> Result<u64> {
    field
        .parse::<u64>()
        .map_err(|_| Error::Contract(format!("cannot parse '{field}' in column {column}")))
}

fn parse_opt(field: &str, column: &str) -> Result<Option<f64>> {
    if field == "na" || field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, column).map(Some)
    }
}

fn parse_stages(field: &str, column: &str) -> Result<Vec<Option<f64>>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(|p| parse_opt(p, column)).collect()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.group.clone(),
            self.setting.clone(),
            self.variant.clone(),
            self.episodes.to_string(),
            fmt_f64(self.mean_accuracy),
            self.ci95.map(fmt_f64).unwrap_or_default(),
            fmt_f64(self.mean_query_loss),
            fmt_stages(&self.stage_pl),
            fmt_stages(&self.stage_selected_pl),
            self.shortfall_classes.to_string(),
            self.config_hash.clone(),
            self.seed.to_string(),
        ]
    }

    /// Parse a CSV data row. `wall_clock_seconds` is not stored in the CSV and
    /// comes back as 0.
    pub fn from_csv_row(fields: &[&str]) -> Result<Self> {
        if fields.len() != METRICS_COLUMNS.len() {
            return Err(Error::Contract(format!(
                "metrics row has {} fields, expected {}",
                fields.len(),
                METRICS_COLUMNS.len()
            )));
        }
        Ok(MetricsRecord {
            group: fields[0].to_string(),
            setting: fields[1].to_string(),
            variant: fields[2].to_string(),
            episodes: parse_usize(fields[3], "episodes")?,
            mean_accuracy: parse_f64(fields[4], "mean_accuracy")?,
            ci95: if fields[5].is_empty() {
                None
            } else {
                Some(parse_f64(fields[5], "ci95")?)
            },
            mean_query_loss: parse_f64(fields[6], "mean_query_loss")?,
            stage_pl: parse_stages(fields[7], "stage_pl")?,
            stage_selected_pl: parse_stages(fields[8], "stage_selected_pl")?,
            shortfall_classes: parse_usize(fields[9], "shortfall_classes")?,
            wall_clock_seconds: 0.0,
            config_hash: fields[10].to_string(),
            seed: parse_u64(fields[11], "seed")?,
        })
    }
}

impl EpisodeRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.group.clone(),
            self.setting.clone(),
            self.variant.clone(),
            self.index.to_string(),
            self.seed.to_string(),
            fmt_f64(self.accuracy),
            fmt_f64(self.query_loss),
            self.selected_total.to_string(),
            self.shortfall_classes.to_string(),
            fmt_stages(&self.stage_pl),
            fmt_stages(&self.stage_selected_pl),
            self.config_hash.clone(),
        ]
    }

    pub fn from_csv_row(fields: &[&str]) -> Result<Self> {
        if fields.len() != EPISODE_COLUMNS.len() {
            return Err(Error::Contract(format!(
                "episode row has {} fields, expected {}",
                fields.len(),
                EPISODE_COLUMNS.len()
            )));
        }
        Ok(EpisodeRow {
            group: fields[0].to_string(),
            setting: fields[1].to_string(),
            variant: fields[2].to_string(),
            index: parse_usize(fields[3], "index")?,
            seed: parse_u64(fields[4], "seed")?,
            accuracy: parse_f64(fields[5], "accuracy")?,
            query_loss: parse_f64(fields[6], "query_loss")?,
            selected_total: parse_usize(fields[7], "selected_total")?,
            shortfall_classes: parse_usize(fields[8], "shortfall_classes")?,
            stage_pl: parse_stages(fields[9], "stage_pl")?,
            stage_selected_pl: parse_stages(fields[10], "stage_selected_pl")?,
            config_hash: fields[11].to_string(),
        })
    }
}

fn assert_plain(fields: &[String]) -> Result<()> {
    for f in fields {
        if f.contains(',') || f.contains('"') || f.contains('\n') || f.starts_with('#') {
            return Err(Error::Contract(format!(
                "csv field '{f}' needs quoting; metrics fields must be plain"
            )));
        }
    }
    Ok(())
}

pub(crate) fn write_csv_file(
    path: &Path,
    columns: &[&str],
    rows: Vec<Vec<String>>,
    comments: &[String],
) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        assert_plain(&row)?;
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub(crate) fn read_csv_rows(path: &Path, columns: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    let got: Vec<&str> = header.iter().collect();
    if got != columns {
        return Err(Error::Contract(format!(
            "{} has columns {got:?}, expected {columns:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }
    Ok(rows)
}

pub fn write_metrics_csv(
    path: &Path,
    records: &[MetricsRecord],
    comments: &[String],
) -> Result<()> {
    let rows = records.iter().map(|r| r.csv_row()).collect();
    write_csv_file(path, &METRICS_COLUMNS, rows, comments)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_csv_rows(path, &METRICS_COLUMNS)?
        .iter()
        .map(|row| {
            let fields: Vec<&str> = row.iter().map(|s| s.as_str()).collect();
            MetricsRecord::from_csv_row(&fields)
        })
        .collect()
}

pub fn write_episodes_csv(path: &Path, rows: &[EpisodeRow], comments: &[String]) -> Result<()> {
    let data = rows.iter().map(|r| r.csv_row()).collect();
    write_csv_file(path, &EPISODE_COLUMNS, data, comments)
}

pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeRow>> {
    read_csv_rows(path, &EPISODE_COLUMNS)?
        .iter()
        .map(|row| {
            let fields: Vec<&str> = row.iter().map(|s| s.as_str()).collect();
            EpisodeRow::from_csv_row(&fields)
        })
        .collect()
}

/// JSONL mirror: one serde object per line, including wall-clock.
pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Contract(format!("{}: bad jsonl line: {e}", path.display())))
        })
        .collect()
}

/// The deterministic part of a CSV file: everything except `#` comment lines.
pub fn csv_body(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> MetricsRecord {
        MetricsRecord {
            group: "ablate".into(),
            setting: "recursive-hard-soft".into(),
            variant: "".into(),
            episodes: 300,
            mean_accuracy: 0.7233333333333334,
            ci95: Some(0.012345678901234567),
            mean_query_loss: 0.8881784197001252e-1,
            stage_pl: vec![Some(0.61), Some(0.6433333333333333), None],
            stage_selected_pl: vec![Some(0.8), Some(0.81), None],
            shortfall_classes: 4,
            wall_clock_seconds: 12.5,
            config_hash: "deadbeefcafe".into(),
            seed: 7,
        }
    }

    fn sample_episode() -> EpisodeRow {
        EpisodeRow {
            group: "ablate".into(),
            setting: "hard".into(),
            variant: "m=10".into(),
            index: 3,
            seed: 999,
            accuracy: 0.64,
            query_loss: 1.25,
            selected_total: 93,
            shortfall_classes: 1,
            stage_pl: vec![Some(0.55)],
            stage_selected_pl: vec![None],
            config_hash: "deadbeefcafe".into(),
        }
    }

    #[test]
    fn csv_header_matches_documented_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[sample_record()], &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "group,setting,variant,episodes,mean_accuracy,ci95,mean_query_loss,\
             stage_pl,stage_selected_pl,shortfall_classes,config_hash,seed"
        );
    }

    #[test]
    fn csv_roundtrips_to_identical_records_modulo_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut original = sample_record();
        write_metrics_csv(&path, &[original.clone()], &["wall_clock_seconds=12.5".into()])
            .unwrap();
        let loaded = read_metrics_csv(&path).unwrap();
        original.wall_clock_seconds = 0.0;
        assert_eq!(loaded, vec![original]);
    }

    #[test]
    fn episode_rows_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics-episodes.csv");
        let rows = vec![sample_episode()];
        write_episodes_csv(&path, &rows, &[]).unwrap();
        assert_eq!(read_episodes_csv(&path).unwrap(), rows);
    }

    #[test]
    fn jsonl_roundtrips_including_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let records = vec![sample_record()];
        write_metrics_jsonl(&path, &records).unwrap();
        assert_eq!(read_metrics_jsonl(&path).unwrap(), records);
    }

    #[test]
    fn comment_lines_are_skipped_and_body_excludes_them() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let comments = vec!["written_at=2024-01-01T00:00:00Z".to_string()];
        write_metrics_csv(&path, &[sample_record()], &comments).unwrap();
        let body_a = csv_body(&path).unwrap();
        // Rewrite with a different comment: body must be unchanged.
        let comments = vec!["written_at=2030-12-31T23:59:59Z".to_string()];
        write_metrics_csv(&path, &[sample_record()], &comments).unwrap();
        let body_b = csv_body(&path).unwrap();
        assert_eq!(body_a, body_b);
        assert!(!body_a.contains("written_at"));
        assert_eq!(read_metrics_csv(&path).unwrap().len(), 1);
    }

    #[test]
    fn malformed_rows_and_wrong_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        let err = read_metrics_csv(&path).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");

        let err = MetricsRecord::from_csv_row(&["only", "three", "fields"]).unwrap_err();
        assert!(err.to_string().contains("fields"), "{err}");
    }

    #[test]
    fn nan_free_stage_lists_handle_none_markers() {
        let parsed = parse_stages("0.5;na;1", "stage_pl").unwrap();
        assert_eq!(parsed, vec![Some(0.5), None, Some(1.0)]);
        assert_eq!(parse_stages("", "stage_pl").unwrap(), Vec::<Option<f64>>::new());
        assert_eq!(fmt_stages(&[Some(0.5), None]), "0.5;na");
    }
}
