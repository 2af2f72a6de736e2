//! Downstream cost model, throughput timing and the ablation sweep, plus
//! their CSV reports.

mod ablation;
mod cost;
mod throughput;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{
    desk_overrides, desk_protocol, run_ablation, tradeoff_points, AblationOutcome, AblationPlan, CellResult,
    TradeoffPoint, TrainOverride,
};
pub use cost::{cost_estimate, CostModel, DownstreamStub};
pub use throughput::{bench_model, bench_throughput, median, BenchOptions, BenchReport, BenchRow};

pub const REPORT_HEADER: &str = "variant,M,seed,split,accuracy,loss,encode_ms,downstream_cost,samples_per_sec,status";

/// One line of the shared report schema. Wall-clock values live only in
/// `encode_ms` and `samples_per_sec`; empty fields are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub split: String,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub encode_ms: Option<f64>,
    pub downstream_cost: f64,
    pub samples_per_sec: Option<f64>,
    pub status: String,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn write_records<T: Serialize>(out: impl Write, records: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush: {e}")))
}

pub fn write_report_csv(out: impl Write, rows: &[ReportRow]) -> Result<()> {
    write_records(out, rows, &REPORT_HEADER.split(',').collect::<Vec<_>>())
}

pub fn read_report_csv(input: impl Read) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(Error::Data(format!("unexpected report header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Token count against mean accuracy, one line per (variant, M).
pub fn write_tradeoff_csv(out: impl Write, points: &[TradeoffPoint]) -> Result<()> {
    write_records(out, points, &["variant", "M", "mean_accuracy", "seeds"])
}

/// Per-trial timings of a throughput run, first trial included.
pub fn write_trials_csv(out: impl Write, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "M", "trial", "encode_ms", "downstream_ms"])
        .map_err(csv_err)?;
    for row in &report.rows {
        for (i, (e, d)) in row.trial_encode_ms.iter().zip(&row.trial_downstream_ms).enumerate() {
            w.write_record([
                row.variant.clone(),
                row.budget.to_string(),
                i.to_string(),
                e.to_string(),
                d.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, status: &str, acc: Option<f64>) -> ReportRow {
        ReportRow {
            variant: variant.into(),
            m: 8,
            seed: 1,
            split: "test".into(),
            accuracy: acc,
            loss: acc.map(|a| 1.0 - a),
            encode_ms: None,
            downstream_cost: 5184.0,
            samples_per_sec: Some(12.5),
            status: status.into(),
        }
    }

    #[test]
    fn report_roundtrip_and_quoting() {
        let rows = vec![
            row("grouped_ttm", "ok", Some(0.9)),
            row("mean_pool", "error: invalid configuration: x, \"y\"", None),
        ];
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("\"error: invalid configuration: x, \"\"y\"\"\""));
        assert_eq!(read_report_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), REPORT_HEADER);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(read_report_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn tradeoff_skips_failures() {
        let rows = vec![
            row("a", "ok", Some(0.5)),
            row("a", "ok", Some(1.0)),
            row("a", "error: boom", None),
            row("b", "ok", Some(0.25)),
        ];
        let pts = tradeoff_points(&rows);
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[0].mean_accuracy, pts[0].seeds), (0.75, 2));
        assert_eq!(pts[1].variant, "b");
    }
}
