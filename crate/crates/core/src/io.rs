//! Versioned text formats: logs, OCV parameters, OCV tables, resistance
//! reports, hysteresis series and the ground-truth sidecar.
//!
//! Every file starts with `# format=1`. CSV files may carry further
//! `# key=value` metadata lines before the header. Floats are written with
//! Rust's shortest round-trip formatting, so parsing gives back the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocv_estimation::{FitDiagnostics, OcvTable};
use crate::ocv_model::OcvParameters;
use crate::resistance::HysteresisRecovery;
use crate::soc::{Mode, Record, TimeSeriesLog};

pub const FORMAT_LINE: &str = "# format=1";

pub const LOG_HEADER: [&str; 4] = ["t_s", "i_A", "v_V", "mode"];
pub const TABLE_HEADER: [&str; 2] = ["soc", "ocv_volts"];
pub const R0_HEADER: [&str; 3] = ["trial", "r0_hat", "e_hat"];
pub const HYSTERESIS_HEADER: [&str; 3] = ["k", "h1_V", "h2_V"];

fn parse_err(source: &str, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| parse_err(&path.display().to_string(), None, e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// A parsed commented CSV: metadata, header, and data rows with their
/// 1-based line numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct CommentedCsv {
    pub metadata: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

pub fn parse_commented_csv(
    text: &str,
    source: &str,
    expected_header: &[&str],
) -> Result<CommentedCsv> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, first)) if first.trim() == FORMAT_LINE => {}
        Some((_, first)) => {
            return Err(parse_err(
                source,
                Some(1),
                format!("expected `{FORMAT_LINE}`, found {first:?}"),
            ))
        }
        None => return Err(parse_err(source, None, "empty file")),
    }
    let mut metadata = BTreeMap::new();
    let mut header_line = None;
    for (idx, line) in lines.by_ref() {
        let lineno = idx + 1;
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest.trim().split_once('=').ok_or_else(|| {
                parse_err(
                    source,
                    Some(lineno),
                    "metadata lines must read `# key=value`",
                )
            })?;
            metadata.insert(k.trim().to_string(), v.trim().to_string());
        } else if line.trim().is_empty() {
            continue;
        } else {
            header_line = Some((lineno, line));
            break;
        }
    }
    let (header_no, header_text) =
        header_line.ok_or_else(|| parse_err(source, None, "missing header line"))?;
    let header: Vec<String> = header_text
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    if header != expected_header {
        return Err(parse_err(
            source,
            Some(header_no),
            format!(
                "expected header `{}`, found `{header_text}`",
                expected_header.join(",")
            ),
        ));
    }

    let body: String = text
        .lines()
        .skip(header_no)
        .map(|l| format!("{l}\n"))
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize + header_no);
            parse_err(source, line, e.to_string())
        })?;
        let line = rec
            .position()
            .map(|p| p.line() as usize + header_no)
            .unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != expected_header.len() {
            return Err(parse_err(
                source,
                Some(line),
                format!(
                    "expected {} fields, found {}",
                    expected_header.len(),
                    rec.len()
                ),
            ));
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(CommentedCsv {
        metadata,
        header,
        rows,
    })
}

fn field<T: std::str::FromStr>(source: &str, line: usize, name: &str, text: &str) -> Result<T> {
    text.parse().map_err(|_| {
        parse_err(
            source,
            Some(line),
            format!("cannot parse {name} from {text:?}"),
        )
    })
}

fn header_block(metadata: &BTreeMap<String, String>, header: &[&str]) -> String {
    let mut out = String::new();
    out.push_str(FORMAT_LINE);
    out.push('\n');
    for (k, v) in metadata {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str(&header.join(","));
    out.push('\n');
    out
}

fn csv_rows<I, R>(rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}

pub fn emit_log(log: &TimeSeriesLog) -> String {
    let mut out = header_block(&log.metadata, &LOG_HEADER);
    out.push_str(&csv_rows(log.records().iter().map(|r| {
        [
            r.t_s.to_string(),
            r.i_a.to_string(),
            r.v_v.to_string(),
            r.mode.code().to_string(),
        ]
    })));
    out
}

pub fn parse_log(text: &str, source: &str) -> Result<TimeSeriesLog> {
    let csv = parse_commented_csv(text, source, &LOG_HEADER)?;
    if csv.rows.is_empty() {
        return Err(parse_err(source, None, "log has no records"));
    }
    let mut log = TimeSeriesLog::default();
    log.metadata = csv.metadata;
    for (line, f) in &csv.rows {
        let mode = Mode::from_code(&f[3]).ok_or_else(|| {
            parse_err(
                source,
                Some(*line),
                format!("unknown mode {:?} (expected C, D, R or P)", f[3]),
            )
        })?;
        let rec = Record {
            t_s: field(source, *line, "t_s", &f[0])?,
            i_a: field(source, *line, "i_A", &f[1])?,
            v_v: field(source, *line, "v_V", &f[2])?,
            mode,
        };
        log.push(rec)
            .map_err(|e| parse_err(source, Some(*line), e.to_string()))?;
    }
    Ok(log)
}

pub fn read_log(path: &Path) -> Result<TimeSeriesLog> {
    parse_log(&read_text(path)?, &path.display().to_string())
}

pub fn emit_table(table: &OcvTable) -> String {
    let mut out = header_block(&BTreeMap::new(), &TABLE_HEADER);
    out.push_str(&csv_rows(
        table
            .soc
            .iter()
            .zip(&table.ocv_v)
            .map(|(s, v)| [s.to_string(), v.to_string()]),
    ));
    out
}

/// Reads back `(soc, ocv)` pairs.
pub fn parse_table(text: &str, source: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let csv = parse_commented_csv(text, source, &TABLE_HEADER)?;
    let mut soc = Vec::new();
    let mut ocv = Vec::new();
    for (line, f) in &csv.rows {
        soc.push(field(source, *line, "soc", &f[0])?);
        ocv.push(field(source, *line, "ocv_volts", &f[1])?);
    }
    Ok((soc, ocv))
}

/// Fit provenance stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FitMetadata {
    #[serde(rename = "residual_rms_V")]
    pub residual_rms_v: f64,
    pub condition_number: f64,
    pub rows: usize,
}

impl From<&FitDiagnostics> for FitMetadata {
    fn from(d: &FitDiagnostics) -> Self {
        Self {
            residual_rms_v: d.residual_rms_v,
            condition_number: d.condition_number,
            rows: d.rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_id: Option<String>,
    pub k: [f64; 8],
    #[serde(rename = "r0h_Ohm")]
    pub r0h_ohm: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMetadata>,
}

impl ParamsFile {
    pub fn new(params: &OcvParameters, cell_id: Option<String>, fit: Option<FitMetadata>) -> Self {
        Self {
            cell_id,
            k: params.k,
            r0h_ohm: params.r0h_ohm,
            epsilon: params.epsilon,
            fit,
        }
    }

    pub fn params(&self) -> Result<OcvParameters> {
        OcvParameters::new(self.k, self.r0h_ohm, self.epsilon)
    }
}

/// Line number of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub(crate) fn toml_err(text: &str, source: &str, e: toml::de::Error) -> Error {
    let line = e.span().map(|s| line_of(text, s.start));
    parse_err(source, line, e.message().to_string())
}

fn expect_format_line(text: &str, source: &str) -> Result<()> {
    match text.lines().next() {
        Some(l) if l.trim() == FORMAT_LINE => Ok(()),
        Some(l) => Err(parse_err(
            source,
            Some(1),
            format!("expected `{FORMAT_LINE}`, found {l:?}"),
        )),
        None => Err(parse_err(source, None, "empty file")),
    }
}

/// Parses a `# format=1` TOML document.
pub fn parse_versioned_toml<T: for<'de> Deserialize<'de>>(text: &str, source: &str) -> Result<T> {
    expect_format_line(text, source)?;
    toml::from_str(text).map_err(|e| toml_err(text, source, e))
}

pub fn emit_versioned_toml<T: Serialize>(value: &T) -> String {
    let body = toml::to_string(value).expect("serializable value");
    format!("{FORMAT_LINE}\n{body}")
}

pub fn emit_params(file: &ParamsFile) -> String {
    emit_versioned_toml(file)
}

pub fn parse_params(text: &str, source: &str) -> Result<ParamsFile> {
    let file: ParamsFile = parse_versioned_toml(text, source)?;
    file.params()
        .map_err(|e| parse_err(source, None, e.to_string()))?;
    Ok(file)
}

/// Resistance report: summary as metadata lines, then one row per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct R0Report {
    pub summary: BTreeMap<String, String>,
    pub trials: Vec<(f64, f64)>,
}

impl R0Report {
    pub fn r0_hat_ohm(&self, source: &str) -> Result<f64> {
        let raw = self
            .summary
            .get("r0_hat_Ohm")
            .ok_or_else(|| parse_err(source, None, "missing r0_hat_Ohm in resistance report"))?;
        raw.parse().map_err(|_| {
            parse_err(
                source,
                None,
                format!("cannot parse r0_hat_Ohm from {raw:?}"),
            )
        })
    }

    pub fn cell_id(&self) -> Option<&str> {
        self.summary.get("cell_id").map(String::as_str)
    }
}

pub fn emit_r0_report(report: &R0Report) -> String {
    let mut out = header_block(&report.summary, &R0_HEADER);
    out.push_str(&csv_rows(
        report
            .trials
            .iter()
            .enumerate()
            .map(|(t, (r, e))| [t.to_string(), r.to_string(), e.to_string()]),
    ));
    out
}

pub fn parse_r0_report(text: &str, source: &str) -> Result<R0Report> {
    let csv = parse_commented_csv(text, source, &R0_HEADER)?;
    let mut trials = Vec::with_capacity(csv.rows.len());
    for (line, f) in &csv.rows {
        trials.push((
            field(source, *line, "r0_hat", &f[1])?,
            field(source, *line, "e_hat", &f[2])?,
        ));
    }
    Ok(R0Report {
        summary: csv.metadata,
        trials,
    })
}

pub fn emit_hysteresis(rec: &HysteresisRecovery, mut metadata: BTreeMap<String, String>) -> String {
    metadata.insert("r_h_Ohm".into(), rec.r_h_ohm.to_string());
    metadata.insert("rms_divergence_V".into(), rec.rms_divergence_v.to_string());
    metadata.insert("negative_r_h".into(), rec.negative_r_h.to_string());
    let mut out = header_block(&metadata, &HYSTERESIS_HEADER);
    out.push_str(&csv_rows(
        rec.h1_v
            .iter()
            .zip(&rec.h2_v)
            .enumerate()
            .map(|(k, (a, b))| [k.to_string(), a.to_string(), b.to_string()]),
    ));
    out
}

/// `(metadata, h1, h2)`
pub fn parse_hysteresis(
    text: &str,
    source: &str,
) -> Result<(BTreeMap<String, String>, Vec<f64>, Vec<f64>)> {
    let csv = parse_commented_csv(text, source, &HYSTERESIS_HEADER)?;
    let mut h1 = Vec::new();
    let mut h2 = Vec::new();
    for (line, f) in &csv.rows {
        h1.push(field(source, *line, "h1_V", &f[1])?);
        h2.push(field(source, *line, "h2_V", &f[2])?);
    }
    Ok((csv.metadata, h1, h2))
}
