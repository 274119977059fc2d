//! CSV rows, one per benchmark cell.

use std::io;

use serde::{Deserialize, Serialize};

use crate::bench::{BenchTarget, CellReport, LatencyReport};

pub const CSV_HEADER: [&str; 14] = [
    "algo",
    "threads",
    "locks",
    "na",
    "csl",
    "ncsl",
    "duration_s",
    "samples",
    "median_thruput",
    "min_thread_iters",
    "max_thread_iters",
    "fairness_ratio",
    "exclusion_ok",
    "latency_ns",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub algo: String,
    pub threads: usize,
    pub locks: usize,
    pub na: usize,
    pub csl: u32,
    pub ncsl: u32,
    pub duration_s: f64,
    pub samples: u32,
    pub median_thruput: f64,
    pub min_thread_iters: u64,
    pub max_thread_iters: u64,
    pub fairness_ratio: f64,
    pub exclusion_ok: bool,
    pub latency_ns: Option<f64>,
}

impl Row {
    /// Throughput and fairness are medians over all samples; the per-thread
    /// extremes come from the median-throughput sample.
    pub fn from_cell(cell: &CellReport) -> Self {
        let cfg = &cell.config;
        let median = cell.median_sample();
        Self {
            algo: cfg.target.to_string(),
            threads: cfg.threads,
            locks: cfg.locks,
            na: cfg.acquire,
            csl: cfg.csl,
            ncsl: cfg.ncsl,
            duration_s: cfg.duration.as_secs_f64(),
            samples: cell.samples.len() as u32,
            median_thruput: cell.median_throughput(),
            min_thread_iters: median.min_thread_iterations(),
            max_thread_iters: median.max_thread_iterations(),
            fairness_ratio: cell.median_fairness(),
            exclusion_ok: cell.exclusion_ok(),
            latency_ns: None,
        }
    }

    pub fn from_latency(target: BenchTarget, r: &LatencyReport) -> Self {
        let pairs = (r.batches * r.pairs_per_batch) as u64;
        Self {
            algo: target.to_string(),
            threads: 1,
            locks: 1,
            na: 1,
            csl: 0,
            ncsl: 0,
            duration_s: pairs as f64 * r.mean_ns * 1e-9,
            samples: r.batches as u32,
            median_thruput: 1e9 / r.p50_ns,
            min_thread_iters: pairs,
            max_thread_iters: pairs,
            fairness_ratio: 1.0,
            exclusion_ok: true,
            latency_ns: Some(r.p50_ns),
        }
    }
}

pub fn write_rows<W: io::Write>(out: W, rows: &[Row]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Row {
        Row {
            algo: "CJM-FIFO".into(),
            threads: 4,
            locks: 1,
            na: 1,
            csl: 1,
            ncsl: 200,
            duration_s: 2.0,
            samples: 3,
            median_thruput: 1.5e6,
            min_thread_iters: 10,
            max_thread_iters: 20,
            fairness_ratio: 2.0,
            exclusion_ok: true,
            latency_ns: None,
        }
    }

    #[test]
    fn header_matches_schema() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[sample()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, CSV_HEADER.join(","));
        assert!(text.lines().nth(1).unwrap().ends_with(",true,"));
    }

    #[test]
    fn empty_output_still_has_header() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim_end(),
            CSV_HEADER.join(",")
        );
    }

    #[test]
    fn rows_round_trip() {
        let mut buf = Vec::new();
        let mut row = sample();
        row.latency_ns = Some(42.5);
        write_rows(&mut buf, &[row.clone()]).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let back: Row = rd.deserialize().next().unwrap().unwrap();
        assert_eq!(back, row);
    }
}
