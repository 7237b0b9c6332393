use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{ExperimentConfig, ExperimentOutcome, Summary, TrialReport};
use crate::error::{Error, Result};

pub const TRIALS_FILE: &str = "trials.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

/// JSON aggregate: config echo and summary statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SummaryFile {
    pub config: ExperimentConfig,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub trials: PathBuf,
    pub summary: PathBuf,
}

fn header(dim: usize) -> Vec<String> {
    let mut h = vec!["trial".to_string(), "method".into(), "M".into()];
    h.extend((0..dim).map(|k| format!("mean_{k}")));
    h.extend(["spectral_norm".into(), "l2_error".into(), "seconds".into()]);
    h
}

/// One row per trial: `trial, method, M, mean_0 … mean_{D-1}, spectral_norm,
/// l2_error, seconds`. Floats use the shortest representation that parses
/// back to the same value.
pub fn write_trials_csv<W: Write>(outcome: &ExperimentOutcome, out: W) -> Result<()> {
    let dim = outcome.summary.mean_of_means.len();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(dim))?;
    for r in &outcome.reports {
        let mut row = vec![
            r.trial.to_string(),
            outcome.config.method.tag().to_string(),
            outcome.config.ensemble_size.to_string(),
        ];
        row.extend(r.mean.iter().map(f64::to_string));
        row.push(r.spectral_norm.to_string());
        row.push(r.l2_error.map_or_else(String::new, |v| v.to_string()));
        row.push(r.seconds.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_json<W: Write>(outcome: &ExperimentOutcome, out: W) -> Result<()> {
    let file = SummaryFile {
        config: outcome.config.clone(),
        summary: outcome.summary.clone(),
    };
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Write `trials.csv` and `summary.json` into `dir`, creating it if needed.
pub fn emit_report(outcome: &ExperimentOutcome, dir: &Path) -> Result<ReportPaths> {
    if outcome.reports.is_empty() {
        return Err(Error::invalid("no trial reports to write"));
    }
    fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        trials: dir.join(TRIALS_FILE),
        summary: dir.join(SUMMARY_FILE),
    };
    let mut csv_out = BufWriter::new(File::create(&paths.trials)?);
    write_trials_csv(outcome, &mut csv_out)?;
    csv_out.flush()?;
    let mut json_out = BufWriter::new(File::create(&paths.summary)?);
    write_summary_json(outcome, &mut json_out)?;
    json_out.flush()?;
    Ok(paths)
}

fn parse<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid(format!("malformed {what} column")))
}

/// Parse a trial table written by [`write_trials_csv`].
pub fn read_trials_csv<R: Read>(input: R) -> Result<Vec<TrialReport>> {
    let mut rdr = csv::Reader::from_reader(input);
    let cols = rdr.headers()?.len();
    if cols < 7 {
        return Err(Error::invalid(format!(
            "trial table has only {cols} columns"
        )));
    }
    let dim = cols - 6;
    let mut reports = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mean = (0..dim)
            .map(|k| parse(rec.get(3 + k), "mean"))
            .collect::<Result<Vec<f64>>>()?;
        let l2 = match rec.get(4 + dim) {
            Some("") => None,
            f => Some(parse(f, "l2_error")?),
        };
        reports.push(TrialReport {
            trial: parse(rec.get(0), "trial")?,
            mean,
            spectral_norm: parse(rec.get(3 + dim), "spectral_norm")?,
            l2_error: l2,
            seconds: parse(rec.get(5 + dim), "seconds")?,
        });
    }
    Ok(reports)
}

pub fn read_summary<R: Read>(input: R) -> Result<SummaryFile> {
    Ok(serde_json::from_reader(input)?)
}
