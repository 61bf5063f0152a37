use std::fmt::Write as _;
use std::path::Path;

use crate::calibration::BinSummary;
use crate::data::MutilationKind;
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::uncertainty::UncertaintyRecord;

pub const SWEEP_HEADER: &str =
    "estimator,repetition,mutilation_kind,level_value,accuracy,entropy,mutual_information,aleatoric,epistemic,ece";

/// Test-subset means for one (repetition, level) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub estimator: EstimatorKind,
    pub repetition: usize,
    pub kind: MutilationKind,
    pub level: f64,
    pub accuracy: f64,
    pub uncertainty: UncertaintyRecord,
    pub ece: f64,
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let u = &r.uncertainty;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.estimator,
            r.repetition,
            r.kind,
            r.level,
            r.accuracy,
            u.entropy,
            u.mutual_information,
            u.aleatoric,
            u.epistemic,
            r.ece
        )
        .expect("write to string");
    }
    out
}

pub fn parse_sweep(text: &str, origin: &Path) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    let bad = |line: usize, detail: String| Error::Data(format!("{}:{line}: {detail}", origin.display()));
    if lines.next().map(str::trim) != Some(SWEEP_HEADER) {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 10 {
            return Err(bad(n, format!("expected 10 fields, found {}", f.len())));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].parse().map_err(|_| bad(n, format!("`{}` is not a number", f[j])))
        };
        rows.push(SweepRow {
            estimator: f[0].parse().map_err(|e| bad(n, format!("{e}")))?,
            repetition: f[1].parse().map_err(|_| bad(n, format!("bad repetition `{}`", f[1])))?,
            kind: f[2].parse().map_err(|e| bad(n, format!("{e}")))?,
            level: num(3)?,
            accuracy: num(4)?,
            uncertainty: UncertaintyRecord {
                entropy: num(5)?,
                mutual_information: num(6)?,
                aleatoric: num(7)?,
                epistemic: num(8)?,
            },
            ece: num(9)?,
        });
    }
    Ok(rows)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sweep(&text, path)
}

/// Reliability-diagram data: one line per confidence bin.
pub fn format_reliability(bins: &[BinSummary]) -> String {
    let m = bins.len();
    let mut out = String::from("bin,lower,upper,count,accuracy,confidence\n");
    for b in bins {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            b.index,
            b.lower(m),
            b.upper(m),
            b.count,
            b.accuracy,
            b.confidence
        )
        .expect("write to string");
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
