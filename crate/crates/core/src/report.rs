//! CSV and JSON output for convergence studies and solution summaries.

use std::io::Write;

use serde::Serialize;

use crate::analysis::{fit_rate, ErrorEntry, RateFit};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::scheme::SchemeSolution;

/// What the fitted slope is compared against.
pub const CONVERGE_CONTEXT: &str = "target: squared error <= C|pi| (order 1/2 in RMS)";

pub const CONVERGE_HEADER: [&str; 9] = [
    "level", "N", "mesh_norm", "err_Y", "err_Z", "err_total", "se_Y", "se_Z", "slope",
];

/// Floats in reports use a fixed 12-digit scientific format.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.12e}")
}

/// Error levels of one instance with the fitted slope of the total error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub instance: String,
    pub entries: Vec<ErrorEntry>,
    /// Present with at least 3 levels of positive error.
    pub fit: Option<RateFit>,
    pub context: String,
}

impl ConvergenceReport {
    pub fn new(instance: impl Into<String>, entries: Vec<ErrorEntry>) -> Self {
        let pts: Vec<(f64, f64)> = entries.iter().map(|e| (e.mesh_norm, e.total.value)).collect();
        Self {
            instance: instance.into(),
            fit: fit_rate(&pts).ok(),
            entries,
            context: CONVERGE_CONTEXT.to_string(),
        }
    }

    /// One row per level; the slope column is filled only on the last row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CONVERGE_HEADER)?;
        let last = self.entries.len().saturating_sub(1);
        for (i, e) in self.entries.iter().enumerate() {
            let slope = match (i == last, self.fit) {
                (true, Some(f)) => fmt_float(f.slope),
                _ => String::new(),
            };
            out.write_record([
                i.to_string(),
                e.n.to_string(),
                fmt_float(e.mesh_norm),
                fmt_float(e.y_part.value),
                fmt_float(e.z_part.value),
                fmt_float(e.total.value),
                fmt_float(e.y_part.std_error),
                fmt_float(e.z_part.std_error),
                slope,
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Writes a header and string rows as CSV.
pub fn write_table<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for r in rows {
        out.write_record(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-cell sample moments of a scheme solution: `k,l,mean_y,mean_y2,mean_z,mean_z2`.
pub fn write_summary_csv<T: Scalar, W: Write>(sol: &SchemeSolution<T>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "l", "mean_y", "mean_y2", "mean_z", "mean_z2"])?;
    for s in sol.summary() {
        out.write_record([
            s.k.to_string(),
            s.l.to_string(),
            fmt_float(s.mean_y),
            fmt_float(s.mean_y2),
            fmt_float(s.mean_z),
            fmt_float(s.mean_z2),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;

    fn entry(n: usize, total: f64) -> ErrorEntry {
        ErrorEntry {
            n,
            mesh_norm: 1.0 / n as f64,
            y_part: Estimate { value: total, std_error: 0.01 },
            z_part: Estimate::exact(0.0),
            total: Estimate { value: total, std_error: 0.01 },
        }
    }

    fn csv_of(r: &ConvergenceReport) -> String {
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn slope_on_last_row_only() {
        let r = ConvergenceReport::new("E", vec![entry(4, 0.25), entry(8, 0.125), entry(16, 0.0625)]);
        let text = csv_of(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "level,N,mesh_norm,err_Y,err_Z,err_total,se_Y,se_Z,slope");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(','));
        assert!(lines[3].ends_with("1.000000000000e0"), "{}", lines[3]);
        assert!(lines[1].starts_with("0,4,2.500000000000e-1,"));
    }

    #[test]
    fn table_rows() {
        let mut buf = Vec::new();
        write_table(&mut buf, &["a", "b"], &[vec!["1".into(), fmt_float(0.5)]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b\n1,5.000000000000e-1\n");
        let mut bad = Vec::new();
        assert!(write_table(&mut bad, &["a", "b"], &[vec!["1".into()]]).is_err());
    }

    #[test]
    fn two_levels_have_no_slope() {
        let r = ConvergenceReport::new("E", vec![entry(4, 0.25), entry(8, 0.125)]);
        assert!(r.fit.is_none());
        assert!(csv_of(&r).lines().all(|l| l.ends_with(',') || l.ends_with("slope")));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["context"], CONVERGE_CONTEXT);
        assert!(json["fit"].is_null());
    }
}
