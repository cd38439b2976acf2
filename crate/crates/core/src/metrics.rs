//! Per-round metrics, the metrics CSV format, and rounds-to-target reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::config::Method;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "round,method,simple_acc,complex_acc,simple_loss,complex_loss,cum_params,skipped,stalled";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub method: Method,
    pub simple_acc: f64,
    pub complex_acc: f64,
    pub simple_loss: f64,
    pub complex_loss: f64,
    /// Parameters sent in either direction since the start of the run.
    pub cum_params: u64,
    /// Devices whose upload was discarded since the previous record.
    pub skipped: usize,
    /// Some round since the previous record had no surviving upload.
    pub stalled: bool,
}

impl MetricsRecord {
    fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.round,
            self.method,
            self.simple_acc,
            self.complex_acc,
            self.simple_loss,
            self.complex_loss,
            self.cum_params,
            self.skipped,
            u8::from(self.stalled)
        )
    }
}

pub fn format_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_metrics(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str, origin: &str) -> Result<Vec<MetricsRecord>> {
    let err = |line: u64, message: String| Error::Parse {
        path: origin.to_string(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(err(1, "missing metrics header".into()));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 9 {
            return Err(err(line, format!("expected 9 columns, found {}", row.len())));
        }
        let num = |col: usize, name: &str| -> Result<f64> {
            row[col].parse().map_err(|_| err(line, format!("{name}: cannot parse `{}`", &row[col])))
        };
        let count = |col: usize, name: &str| -> Result<u64> {
            row[col].parse().map_err(|_| err(line, format!("{name}: cannot parse `{}`", &row[col])))
        };
        out.push(MetricsRecord {
            round: count(0, "round")? as usize,
            method: row[1].parse().map_err(|e: Error| err(line, e.to_string()))?,
            simple_acc: num(2, "simple_acc")?,
            complex_acc: num(3, "complex_acc")?,
            simple_loss: num(4, "simple_loss")?,
            complex_loss: num(5, "complex_loss")?,
            cum_params: count(6, "cum_params")?,
            skipped: count(7, "skipped")? as usize,
            stalled: match &row[8] {
                "0" => false,
                "1" => true,
                other => return Err(err(line, format!("stalled: cannot parse `{other}`"))),
            },
        });
    }
    Ok(out)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, &path.display().to_string())
}

/// First round whose accuracy reaches `target`; `None` if it never does.
pub fn rounds_to_target(trace: &[(usize, f64)], target: f64) -> Result<Option<usize>> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(trace.iter().find(|(_, acc)| *acc >= target).map(|(r, _)| *r))
}

/// Best baseline's rounds divided by FedHeN's rounds.
///
/// Undefined (`None`) unless every method reached the target. A FedHeN
/// count of zero gives infinity, or 1 if the best baseline is also zero.
pub fn compute_gain(fedhen: Option<usize>, baselines: &[Option<usize>]) -> Option<f64> {
    let fed = fedhen?;
    let best = baselines.iter().copied().collect::<Option<Vec<_>>>()?.into_iter().min()?;
    Some(match (best, fed) {
        (0, 0) => 1.0,
        (_, 0) => f64::INFINITY,
        (b, f) => b as f64 / f as f64,
    })
}

/// One decimal with a multiplication sign, e.g. `2.8×`.
pub fn format_gain(gain: f64) -> String {
    format!("{gain:.1}×")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Simple,
    Complex,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Simple => "simple",
            ModelKind::Complex => "complex",
        })
    }
}

pub fn accuracy_trace(records: &[MetricsRecord], model: ModelKind) -> Vec<(usize, f64)> {
    records
        .iter()
        .map(|r| {
            let acc = match model {
                ModelKind::Simple => r.simple_acc,
                ModelKind::Complex => r.complex_acc,
            };
            (r.round, acc)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetRow {
    pub model: ModelKind,
    pub target: f64,
    pub rounds: BTreeMap<Method, Option<usize>>,
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetReport {
    pub methods: Vec<Method>,
    pub rows: Vec<TargetRow>,
}

impl TargetReport {
    /// One row per (model, target); gain compares FedHeN with the other methods.
    pub fn build(runs: &[(Method, Vec<MetricsRecord>)], targets: &[f64]) -> Result<Self> {
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("target accuracy {t} is outside [0, 1]")));
        }
        let mut by_method = BTreeMap::new();
        for (m, recs) in runs {
            if by_method.insert(*m, recs).is_some() {
                return Err(Error::InvalidArgument(format!("method {m} given more than once")));
            }
        }
        let methods: Vec<Method> = Method::ALL
            .into_iter()
            .filter(|m| by_method.contains_key(m))
            .collect();
        let mut rows = Vec::new();
        for model in [ModelKind::Simple, ModelKind::Complex] {
            for &target in targets {
                let mut rounds = BTreeMap::new();
                for (&m, recs) in &by_method {
                    rounds.insert(m, rounds_to_target(&accuracy_trace(recs, model), target)?);
                }
                let baselines: Vec<Option<usize>> = rounds
                    .iter()
                    .filter(|(m, _)| **m != Method::FedHen)
                    .map(|(_, r)| *r)
                    .collect();
                let gain = match rounds.get(&Method::FedHen) {
                    Some(&fed) if !baselines.is_empty() => compute_gain(fed, &baselines),
                    _ => None,
                };
                rows.push(TargetRow {
                    model,
                    target,
                    rounds,
                    gain,
                });
            }
        }
        Ok(TargetReport { methods, rows })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:>8}", "model", "target");
        for m in &self.methods {
            let _ = write!(out, " {:>9}", m.to_string());
        }
        let _ = writeln!(out, " {:>7}", "gain");
        for row in &self.rows {
            let _ = write!(out, "{:<8} {:>8.4}", row.model.to_string(), row.target);
            for m in &self.methods {
                let cell = match row.rounds.get(m).copied().flatten() {
                    Some(r) => r.to_string(),
                    None => "-".into(),
                };
                let _ = write!(out, " {cell:>9}");
            }
            let gain = row.gain.map_or_else(|| "n/a".into(), format_gain);
            let _ = writeln!(out, " {gain:>7}");
        }
        out
    }

    /// Machine-readable form; unreached targets and undefined gains are empty.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("model,target");
        for m in &self.methods {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",gain\n");
        for row in &self.rows {
            let _ = write!(out, "{},{:.6}", row.model, row.target);
            for m in &self.methods {
                let cell = row.rounds.get(m).copied().flatten().map(|r| r.to_string());
                let _ = write!(out, ",{}", cell.unwrap_or_default());
            }
            let _ = writeln!(out, ",{}", row.gain.map(|g| format!("{g:.6}")).unwrap_or_default());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, simple: f64, complex: f64, cum: u64) -> MetricsRecord {
        MetricsRecord {
            round,
            method: Method::FedHen,
            simple_acc: simple,
            complex_acc: complex,
            simple_loss: 1.25,
            complex_loss: 0.5,
            cum_params: cum,
            skipped: 0,
            stalled: false,
        }
    }

    #[test]
    fn first_crossing() {
        let t = [(1, 0.10), (2, 0.50), (3, 0.845), (4, 0.83)];
        assert_eq!(rounds_to_target(&t, 0.844).unwrap(), Some(3));
        assert_eq!(rounds_to_target(&t, 1.01).unwrap(), None);
        assert_eq!(rounds_to_target(&t, 0.5).unwrap(), Some(2));
        assert!(rounds_to_target(&[], 0.5).is_err());
    }

    #[test]
    fn gains_from_published_tables() {
        let g = compute_gain(Some(289), &[Some(943), Some(805)]).unwrap();
        assert_eq!(format_gain(g), "2.8×");
        let g = compute_gain(Some(450), &[Some(997), Some(498)]).unwrap();
        assert_eq!(format_gain(g), "1.1×");
        assert_eq!(compute_gain(Some(100), &[Some(100), Some(120)]), Some(1.0));
        assert_eq!(compute_gain(Some(100), &[None, Some(120)]), None);
        assert_eq!(compute_gain(None, &[Some(1)]), None);
    }

    #[test]
    fn empty_records_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/m.csv");
        let mut recs = vec![rec(0, 0.1, 0.2, 0), rec(5, 0.875, 0.5, 12345)];
        recs[1].method = Method::Decouple;
        recs[1].skipped = 2;
        recs[1].stalled = true;
        write_metrics(&recs, &p).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), recs);
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "5,decouple,0.875000,0.500000,1.250000,0.500000,12345,2,1");
    }

    #[test]
    fn malformed_metrics_are_rejected() {
        assert!(parse_metrics("nope\n", "x").is_err());
        let bad = format!("{METRICS_HEADER}\n1,fedhen,0.1\n");
        assert!(matches!(parse_metrics(&bad, "x"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn report_rows_and_rendering() {
        let fed = vec![rec(0, 0.1, 0.1, 0), rec(1, 0.6, 0.3, 10), rec(2, 0.9, 0.5, 20)];
        let mut dec = vec![rec(0, 0.1, 0.1, 0), rec(1, 0.3, 0.3, 10), rec(2, 0.7, 0.6, 20)];
        dec.iter_mut().for_each(|r| r.method = Method::Decouple);
        let report = TargetReport::build(
            &[(Method::FedHen, fed), (Method::Decouple, dec)],
            &[0.6, 0.95],
        )
        .unwrap();
        assert_eq!(report.methods, vec![Method::FedHen, Method::Decouple]);
        let r = &report.rows[0];
        assert_eq!((r.model, r.rounds[&Method::FedHen], r.rounds[&Method::Decouple]), (ModelKind::Simple, Some(1), Some(2)));
        assert_eq!(r.gain, Some(2.0));
        assert_eq!(report.rows[1].gain, None);
        let text = report.render_text();
        assert!(text.contains("2.0×"), "{text}");
        let csv = report.render_csv();
        assert!(csv.starts_with("model,target,fedhen,decouple,gain\n"));
        assert!(csv.contains("simple,0.950000,,,\n"), "{csv}");
    }

    #[test]
    fn out_of_range_targets_rejected() {
        for t in [-0.1, 1.5, f64::NAN] {
            assert!(TargetReport::build(&[], &[t]).is_err(), "{t}");
        }
        assert!(TargetReport::build(&[], &[0.0, 1.0]).is_ok());
    }
}
