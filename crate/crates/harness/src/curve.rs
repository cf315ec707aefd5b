//! Fragmentation curves from metrics CSV files.

use std::path::Path;

use crate::error::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// `deletion_ratio` for synthetic sweeps, `iteration` otherwise.
    pub x_name: String,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},F\n", self.x_name);
        for (x, y) in &self.points {
            s.push_str(&format!("{x},{y}\n"));
        }
        s
    }
}

/// Extracts (x, F) pairs. Empty input gives an empty curve.
pub fn fragmentation_curve(text: &str) -> Result<Curve, HarnessError> {
    if text.trim().is_empty() {
        return Ok(Curve { x_name: "iteration".into(), points: Vec::new() });
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (x_name, x) = match (col("deletion_ratio"), col("iteration")) {
        (Some(i), _) => ("deletion_ratio", i),
        (None, Some(i)) => ("iteration", i),
        _ => return Err(HarnessError::Metrics("no `deletion_ratio` or `iteration` column".into())),
    };
    let y = col("F").ok_or_else(|| HarnessError::Metrics("no `F` column".into()))?;
    let mut points = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, HarnessError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Metrics(format!("row {}: bad number in column {i}", line + 1)))
        };
        points.push((num(x)?, num(y)?));
    }
    Ok(Curve { x_name: x_name.into(), points })
}

pub fn fragmentation_curve_file(path: &Path) -> Result<Curve, HarnessError> {
    fragmentation_curve(&std::fs::read_to_string(path)?)
}
