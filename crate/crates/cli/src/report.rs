//! Report CSV: one `bin` row per reliability bin, one `metric` row per
//! summary metric, then one `curve` row per risk–coverage point.
//!
//! Columns: `kind,name,lower,upper,count,accuracy,confidence,value`. Curve
//! rows put coverage in `lower` and risk in `value`. Undefined metrics are
//! written as `NaN`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use calclust_core::metrics::{CalibrationReport, ReliabilityBin};

const HEADER: [&str; 8] = [
    "kind",
    "name",
    "lower",
    "upper",
    "count",
    "accuracy",
    "confidence",
    "value",
];

/// The parts of a report needed to draw it again.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub bins: Vec<ReliabilityBin>,
    pub metrics: Vec<(String, f64)>,
    pub curve: Vec<(f64, f64)>,
}

impl ReportTable {
    pub fn from_report(r: &CalibrationReport) -> Self {
        let metrics = [
            ("acc", r.acc),
            ("ece", r.ece),
            ("nmi", r.nmi),
            ("ari", r.ari),
            ("auroc", r.auroc),
            ("aurc", r.aurc),
            ("fpr95", r.fpr95),
            ("samples", r.samples as f64),
        ];
        ReportTable {
            bins: r.bins.clone(),
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            curve: r.risk_coverage.clone(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn num(v: f64) -> String {
    // `{}` prints the shortest string that parses back to the same value.
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn write(path: &Path, t: &ReportTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(HEADER)?;
    for b in &t.bins {
        w.write_record([
            "bin".into(),
            String::new(),
            num(b.lower),
            num(b.upper),
            b.count.to_string(),
            num(b.accuracy),
            num(b.mean_confidence),
            String::new(),
        ])?;
    }
    for (name, v) in &t.metrics {
        w.write_record(["metric", name, "", "", "", "", "", &num(*v)])?;
    }
    for (coverage, risk) in &t.curve {
        w.write_record(["curve", "", &num(*coverage), "", "", "", "", &num(*risk)])?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ReportTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    if r.headers()?.iter().ne(HEADER) {
        bail!("{}: unexpected header, expected {}", path.display(), HEADER.join(","));
    }
    let mut t = ReportTable {
        bins: Vec::new(),
        metrics: Vec::new(),
        curve: Vec::new(),
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: malformed row", path.display()))?;
        let at = || format!("{}: row {}", path.display(), line + 2);
        let f = |i: usize| -> Result<f64> { rec[i].parse::<f64>().with_context(at) };
        match &rec[0] {
            "bin" => t.bins.push(ReliabilityBin {
                lower: f(2)?,
                upper: f(3)?,
                count: rec[4].parse().with_context(at)?,
                accuracy: f(5)?,
                mean_confidence: f(6)?,
            }),
            "metric" => t.metrics.push((rec[1].to_string(), f(7)?)),
            "curve" => t.curve.push((f(2)?, f(7)?)),
            other => bail!("{}: unknown row kind {other:?}", at()),
        }
    }
    if t.bins.is_empty() {
        bail!("{}: report has no bins", path.display());
    }
    Ok(t)
}
