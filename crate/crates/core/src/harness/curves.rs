use std::fmt::Write as _;
use std::path::Path;

use super::train::RunResult;
use crate::error::{Error, Result};

pub const CURVE_COLUMNS: [&str; 6] = [
    "epoch",
    "train_loss",
    "test_loss",
    "test_acc",
    "test_ece",
    "test_nll",
];

/// One row of a curve file.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub test_ece: f64,
    pub test_nll: f64,
    pub mcc: Option<f64>,
}

pub fn curve_rows(run: &RunResult) -> Vec<CurveRow> {
    run.epochs
        .iter()
        .map(|e| CurveRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            test_loss: e.test_loss,
            test_acc: e.test_acc,
            test_ece: e.test_ece,
            test_nll: e.test_nll,
            mcc: e.mcc,
        })
        .collect()
}

/// Tab-separated curve text; floats use shortest round-trip formatting.
pub fn format_curves(rows: &[CurveRow]) -> String {
    let with_mcc = rows.first().is_some_and(|r| r.mcc.is_some());
    let mut out = CURVE_COLUMNS.join("\t");
    if with_mcc {
        out.push_str("\tmcc");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.train_loss, r.test_loss, r.test_acc, r.test_ece, r.test_nll
        );
        if with_mcc {
            let _ = write!(out, "\t{}", r.mcc.unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

pub fn emit_curves(run: &RunResult, path: &Path) -> Result<()> {
    std::fs::write(path, format_curves(&curve_rows(run))).map_err(|e| Error::io(path, e))
}

pub fn parse_curves(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    let with_mcc = match header.len() {
        6 => false,
        7 if header[6] == "mcc" => true,
        _ => return Err(Error::Parse(format!("unexpected curve header {header:?}"))),
    };
    if header[..6] != CURVE_COLUMNS {
        return Err(Error::Parse(format!("unexpected curve header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != header.len() {
                return Err(Error::Parse(format!(
                    "curve row {}: expected {} columns",
                    i + 1,
                    header.len()
                )));
            }
            let f = |j: usize| {
                cols[j].parse::<f64>().map_err(|_| {
                    Error::Parse(format!("curve row {}: bad number {:?}", i + 1, cols[j]))
                })
            };
            Ok(CurveRow {
                epoch: cols[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("curve row {}: bad epoch", i + 1)))?,
                train_loss: f(1)?,
                test_loss: f(2)?,
                test_acc: f(3)?,
                test_ece: f(4)?,
                test_nll: f(5)?,
                mcc: if with_mcc { Some(f(6)?) } else { None },
            })
        })
        .collect()
}

pub fn load_curves(path: &Path) -> Result<Vec<CurveRow>> {
    parse_curves(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let rows: Vec<CurveRow> = (1..=4)
            .map(|e| CurveRow {
                epoch: e,
                train_loss: 1.0 / 3.0 + e as f64,
                test_loss: std::f64::consts::PI / e as f64,
                test_acc: 0.1 + 0.2,
                test_ece: 1e-17,
                test_nll: 0.6931471805599453,
                mcc: Some(-0.123456789012345678),
            })
            .collect();
        let text = format_curves(&rows);
        assert!(
            text.starts_with("epoch\ttrain_loss\ttest_loss\ttest_acc\ttest_ece\ttest_nll\tmcc\n")
        );
        assert_eq!(parse_curves(&text).unwrap(), rows);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(parse_curves("epoch\tloss\n1\t2\n").is_err());
    }
}
