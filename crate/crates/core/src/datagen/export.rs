use std::fmt::Write as _;
use std::path::Path;

use super::SampleSet;
use crate::error::{CoclError, Result};

/// CSV with header `dim_0,…,dim_{d-1},label`. OOD rows leave `label` empty.
/// Values use the shortest representation that parses back to the same bits.
pub fn to_csv_string(set: &SampleSet) -> String {
    let d = set.inputs.cols();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "dim_{j},");
    }
    out.push_str("label\n");
    for (i, row) in set.inputs.iter_rows().enumerate() {
        for v in row {
            let _ = write!(out, "{v},");
        }
        if let Some(labels) = &set.labels {
            let _ = write!(out, "{}", labels[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(set: &SampleSet, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(set)).map_err(|e| CoclError::io(path, e))
}
