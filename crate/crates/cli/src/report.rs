//! CSV emit/ingest for RD curves, evaluation reports, and the
//! relative-improvement table.

use std::fmt::Write as _;
use std::path::Path;

use evc_core::metrics::{RDCurve, RDPoint};

use crate::{CliError, CliResult};

/// One per-image, per-rate measurement of a full compress/decompress cycle.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image: String,
    pub rate_index: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub enc_net_ms: f64,
    pub entropy_ms: f64,
    pub dec_net_ms: f64,
}

/// `label,bpp,psnr` rows.
pub fn write_rd_curve(path: &Path, label: &str, points: &[RDPoint]) -> CliResult<()> {
    let mut out = String::from("label,bpp,psnr\n");
    for p in points {
        writeln!(out, "{label},{:.8},{:.5}", p.bpp, p.psnr).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_rd_curve(path: &Path) -> CliResult<RDCurve> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("label,")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(CliError::Data(format!(
                "{}:{}: expected `label,bpp,psnr`",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> CliResult<f64> {
            s.trim()
                .parse()
                .map_err(|_| CliError::Data(format!("{}: bad number `{s}`", path.display())))
        };
        points.push(RDPoint {
            bpp: parse(cols[1])?,
            psnr: parse(cols[2])?,
        });
    }
    RDCurve::new(points).map_err(|e| CliError::Data(e.to_string()))
}

/// Full evaluation report: per-image rows plus per-rate aggregates.
pub fn write_eval_report(path: &Path, rows: &[EvalRow], rates: usize) -> CliResult<()> {
    let mut out =
        String::from("image,rate_index,bpp,psnr,enc_net_ms,entropy_ms,dec_net_ms\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.8},{:.5},{:.3},{:.3},{:.3}",
            r.image, r.rate_index, r.bpp, r.psnr, r.enc_net_ms, r.entropy_ms, r.dec_net_ms
        )
        .unwrap();
    }
    for rate in 0..rates {
        let subset: Vec<&EvalRow> = rows.iter().filter(|r| r.rate_index == rate).collect();
        if subset.is_empty() {
            continue;
        }
        let n = subset.len() as f64;
        writeln!(
            out,
            "aggregate,{},{:.8},{:.5},{:.3},{:.3},{:.3}",
            rate,
            subset.iter().map(|r| r.bpp).sum::<f64>() / n,
            subset.iter().map(|r| r.psnr).sum::<f64>() / n,
            subset.iter().map(|r| r.enc_net_ms).sum::<f64>() / n,
            subset.iter().map(|r| r.entropy_ms).sum::<f64>() / n,
            subset.iter().map(|r| r.dec_net_ms).sum::<f64>() / n,
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-rate mean `(bpp, psnr)` over the corpus, in rate-index order.
pub fn aggregate_curve(rows: &[EvalRow], rates: usize) -> Vec<RDPoint> {
    let mut points = Vec::new();
    for rate in 0..rates {
        let subset: Vec<&EvalRow> = rows.iter().filter(|r| r.rate_index == rate).collect();
        if subset.is_empty() {
            continue;
        }
        let n = subset.len() as f64;
        points.push(RDPoint {
            bpp: subset.iter().map(|r| r.bpp).sum::<f64>() / n,
            psnr: subset.iter().map(|r| r.psnr).sum::<f64>() / n,
        });
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rd_curve_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let points = vec![
            RDPoint { bpp: 0.25, psnr: 30.0 },
            RDPoint { bpp: 0.5, psnr: 33.0 },
            RDPoint { bpp: 1.0, psnr: 36.0 },
            RDPoint { bpp: 2.0, psnr: 39.0 },
        ];
        write_rd_curve(&path, "toy", &points).unwrap();
        let curve = read_rd_curve(&path).unwrap();
        assert_eq!(curve.points.len(), 4);
        assert!((curve.points[2].bpp - 1.0).abs() < 1e-9);
    }
}
