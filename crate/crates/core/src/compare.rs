//! Speedup of one timing CSV over another.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub ours_ms: f64,
    pub baseline_ms: f64,
}

impl Comparison {
    pub fn speedup(&self) -> f64 {
        self.baseline_ms / self.ours_ms
    }

    /// Speedup rounded to two decimals.
    pub fn speedup_2dp(&self) -> f64 {
        (self.speedup() * 100.0).round() / 100.0
    }
}

/// Milliseconds in the `total` row of a timing CSV.
pub fn total_ms(csv_text: &str) -> Result<f64> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing `{name}` column")))
    };
    let (layer, ms) = (col("layer")?, col("ms")?);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.get(layer) == Some("total") {
            let v = rec.get(ms).unwrap_or_default();
            return v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad `ms` value `{v}` in totals row")));
        }
    }
    Err(Error::Parse("missing totals row".into()))
}

pub fn compare_reports(ours_csv: &str, baseline_csv: &str) -> Result<Comparison> {
    Ok(Comparison {
        ours_ms: total_ms(ours_csv)?,
        baseline_ms: total_ms(baseline_csv)?,
    })
}
