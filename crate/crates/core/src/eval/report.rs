use std::io::Write;

use serde::{Deserialize, Serialize};

use super::audit::ChiSquareReport;
use super::coherence::CoherenceReport;
use crate::error::Result;
use crate::prompt::track_name;

/// One evaluation result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub track: Option<String>,
    pub value: f64,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
}

impl MetricRecord {
    pub fn value(metric: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            track: None,
            value,
            tolerance: None,
            pass: None,
        }
    }

    pub fn check(metric: impl Into<String>, value: f64, tolerance: f64, pass: bool) -> Self {
        Self {
            metric: metric.into(),
            track: None,
            value,
            tolerance: Some(tolerance),
            pass: Some(pass),
        }
    }
}

pub fn coherence_records(report: &CoherenceReport) -> Vec<MetricRecord> {
    report
        .checks
        .iter()
        .map(|c| MetricRecord {
            metric: c.name.clone(),
            track: Some(track_name(report.f0.len(), c.track)),
            value: c.value,
            tolerance: Some(c.tolerance),
            pass: Some(c.pass),
        })
        .collect()
}

pub fn audit_record(r: &ChiSquareReport) -> MetricRecord {
    MetricRecord::check(format!("chi_square_{}", r.name), r.statistic, r.critical, r.pass)
}

/// Newline-delimited JSON, one record per line.
pub fn write_ndjson<W: Write>(mut out: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| crate::error::Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// CSV with the fixed column order `metric,track,value,tolerance,pass`.
pub fn write_csv<W: Write>(mut out: W, records: &[MetricRecord]) -> Result<()> {
    writeln!(out, "metric,track,value,tolerance,pass")?;
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.metric, opt(&r.track), r.value, opt(&r.tolerance), opt(&r.pass))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_ndjson_layout() {
        let recs = vec![
            MetricRecord::value("frechet_proxy", 1.5),
            MetricRecord {
                track: Some("bass".into()),
                ..MetricRecord::check("bass_prompt", 125.0, 1.953125, true)
            },
        ];
        let mut csv = Vec::new();
        write_csv(&mut csv, &recs).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "metric,track,value,tolerance,pass\nfrechet_proxy,,1.5,,\nbass_prompt,bass,125,1.953125,true\n"
        );
        let mut nd = Vec::new();
        write_ndjson(&mut nd, &recs).unwrap();
        let text = String::from_utf8(nd).unwrap();
        let back: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, recs);
    }
}
