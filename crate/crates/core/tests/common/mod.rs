#![allow(dead_code)]

use std::path::PathBuf;

use trendlab::data::{parse_table, DoseResponseTable};

pub fn load(name: &str) -> DoseResponseTable {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name);
    parse_table(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn table(doses: &[f64], events: &[u64], trials: &[u64]) -> DoseResponseTable {
    DoseResponseTable::from_counts(doses, events, trials).unwrap()
}

pub fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!((actual - expected).abs() <= tol, "{actual} differs from {expected} by more than {tol}");
}
