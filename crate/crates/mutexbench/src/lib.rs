//! MutexBench: contended monitor throughput with an exclusion oracle.
//!
//! Each worker repeatedly picks a lockset, enters it in address order,
//! advances a shared Mersenne Twister `csl` steps, exits in reverse order and
//! then spends a random number of steps on a private generator. After the
//! run the shared generator is compared against a single-threaded replay.

pub mod bench;
pub mod mt;
pub mod report;

pub use bench::{
    BenchConfig, BenchError, BenchResult, BenchTarget, CellReport, LatencyReport, latency_mode,
    median, run_bench, run_protocol,
};
pub use mt::{ExclusionReport, Mt19937, SharedMt, exclusion_oracle};
pub use report::{CSV_HEADER, Row, write_rows};
