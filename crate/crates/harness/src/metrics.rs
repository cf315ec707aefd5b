//! Per-iteration rows and the end-of-run summary.
//!
//! CSV columns for simulations: `iteration`, one `live_<Type>` column per
//! concrete type in registration order, `F`, `alloc_ns`, `dealloc_ns`,
//! `defrag_passes`, `moved`, `rewritten`. Row 0 is the state before the
//! first iteration. Timing columns are zero when timings are disabled.

use std::collections::BTreeMap;

use serde::Serialize;
use soaheap::{PassRecord, Timings};

use crate::error::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub iteration: usize,
    pub live: Vec<usize>,
    pub fragmentation: f64,
    pub alloc_ns: u64,
    pub dealloc_ns: u64,
    pub defrag_passes: usize,
    pub moved: usize,
    pub rewritten: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PassSummary {
    pub iteration: usize,
    pub type_name: String,
    pub candidates_before: usize,
    pub candidates_after: usize,
    pub moved: usize,
    pub rewritten: usize,
    pub copy_us: u64,
    pub rewrite_us: u64,
    pub total_us: u64,
}

impl PassSummary {
    pub fn new(iteration: usize, type_name: &str, p: &PassRecord, with_times: bool) -> PassSummary {
        let us = |d: std::time::Duration| if with_times { d.as_micros() as u64 } else { 0 };
        PassSummary {
            iteration,
            type_name: type_name.to_string(),
            candidates_before: p.candidates_before,
            candidates_after: p.candidates_after,
            moved: p.moved,
            rewritten: p.rewritten,
            copy_us: us(p.copy_time),
            rewrite_us: us(p.rewrite_time),
            total_us: us(p.duration),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct TimingSummary {
    pub allocs: u64,
    pub alloc_ns: u64,
    pub deallocs: u64,
    pub dealloc_ns: u64,
}

impl TimingSummary {
    pub fn add(&mut self, t: &Timings) {
        self.allocs += t.allocs;
        self.alloc_ns += t.alloc_ns;
        self.deallocs += t.deallocs;
        self.dealloc_ns += t.dealloc_ns;
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    pub app: String,
    pub iterations: usize,
    pub seed: u64,
    pub workers: usize,
    pub defrag_policy: String,
    pub final_fragmentation: f64,
    /// Live object bytes over the data bytes of allocated blocks.
    pub utilization: f64,
    pub live: BTreeMap<String, usize>,
    pub defrag_passes: usize,
    pub moved: usize,
    pub rewritten: usize,
    pub passes: Vec<PassSummary>,
    pub timings: TimingSummary,
    /// App-specific numbers (synthetic and scalability runs).
    pub extra: BTreeMap<String, f64>,
}

pub fn csv_header(type_names: &[String]) -> Vec<String> {
    let mut h = vec!["iteration".to_string()];
    h.extend(type_names.iter().map(|n| format!("live_{n}")));
    h.extend(["F", "alloc_ns", "dealloc_ns", "defrag_passes", "moved", "rewritten"].map(String::from));
    h
}

pub fn write_rows<W: std::io::Write>(out: W, type_names: &[String], rows: &[Row]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(type_names))?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(r.live.iter().map(usize::to_string));
        rec.push(format!("{:.6}", r.fragmentation));
        rec.extend([r.alloc_ns, r.dealloc_ns].map(|v| v.to_string()));
        rec.extend([r.defrag_passes, r.moved, r.rewritten].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a table given as a header and rows of already formatted cells.
pub fn write_table<W: std::io::Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
