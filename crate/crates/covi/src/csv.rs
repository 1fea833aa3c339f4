//! CSV artifacts: LF line endings, floats with six decimals.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use covi_core::diagnostics::SweepRow;
use covi_core::domains::DomainPairDataset;
use covi_core::trainer::MetricsRow;

use crate::error::CliError;

pub const METRICS_HEADER: &str = "step,r_emp,r_ct,r_cs,source_acc,target_acc,mean_lambda_star,ct_keep,cs_keep,agreement";
pub const SWEEP_HEADER: &str = "lambda,mean_entropy,source_dom,target_dom";

pub fn metrics_line(r: &MetricsRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        r.step,
        r.r_emp,
        r.r_ct,
        r.r_cs,
        r.source_acc,
        r.target_acc,
        r.mean_lambda_star,
        r.contrastive_keep_rate,
        r.consensus_keep_rate,
        r.agreement_rate
    )
}

/// Appends metrics rows to an open file, flushing after every row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, with_header: bool) -> io::Result<Self> {
        if with_header {
            writeln!(out, "{METRICS_HEADER}")?;
            out.flush()?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &MetricsRow) -> io::Result<()> {
        self.out.write_all(metrics_line(r).as_bytes())?;
        self.out.flush()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:.6},{:.6},{:.6},{:.6}",
            r.lambda, r.mean_entropy, r.source_dominance, r.target_dominance
        );
    }
    s
}

/// Both domains, one row per instance: `domain,label,x0,…`. Domain is 0 for
/// source and 1 for target; the target label is the eval label.
pub fn dataset_csv(ds: &DomainPairDataset) -> String {
    let d = ds.input_dim();
    let mut s = String::from("domain,label");
    for j in 0..d {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (domain, x, y) in [
        (0, ds.source_x(), ds.source_y()),
        (1, ds.target_x(), ds.target_labels_for_eval()),
    ] {
        for (i, label) in y.argmax_rows().into_iter().enumerate() {
            let _ = write!(s, "{domain},{label}");
            for v in x.row(i) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
    }
    s
}

/// A numeric CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn parse_table(text: &str) -> Result<Table, String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or("empty CSV")?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| format!("row {}: bad number '{v}'", n + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(format!("row {}: {} fields, header has {}", n + 1, row.len(), header.len()));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_table(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use covi_core::domains::make_two_moons_pair;

    #[test]
    fn metrics_format() {
        let r = MetricsRow {
            step: 3,
            r_emp: -0.1234567,
            r_ct: 1.0,
            r_cs: 0.0,
            source_acc: 1.0,
            target_acc: 0.5,
            mean_lambda_star: 0.25,
            contrastive_keep_rate: 0.9,
            consensus_keep_rate: 0.95,
            agreement_rate: 0.125,
        };
        assert_eq!(
            metrics_line(&r),
            "3,-0.123457,1.000000,0.000000,1.000000,0.500000,0.250000,0.900000,0.950000,0.125000\n"
        );
        let mut buf = Vec::new();
        MetricsWriter::new(&mut buf, true).unwrap().write(&r).unwrap();
        let t = parse_table(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(t.header.join(","), METRICS_HEADER);
        assert_eq!(t.column("agreement").unwrap(), [0.125]);
    }

    #[test]
    fn sweep_round_trips() {
        let rows = [
            SweepRow {
                lambda: 0.0,
                mean_entropy: 0.1,
                source_dominance: 1.0,
                target_dominance: 0.0,
            },
            SweepRow {
                lambda: 0.05,
                mean_entropy: 0.4375,
                source_dominance: 0.5,
                target_dominance: 0.5,
            },
        ];
        let t = parse_table(&sweep_csv(&rows)).unwrap();
        assert_eq!(t.header.join(","), SWEEP_HEADER);
        assert_eq!(t.column("lambda").unwrap(), [0.0, 0.05]);
        assert_eq!(t.column("mean_entropy").unwrap(), [0.1, 0.4375]);
    }

    #[test]
    fn dataset_dump_shape() {
        let ds = make_two_moons_pair(10, 40.0, 0.05, 1).unwrap();
        let t = parse_table(&dataset_csv(&ds)).unwrap();
        assert_eq!(t.header, ["domain", "label", "x0", "x1"]);
        assert_eq!(t.rows.len(), 20);
        assert_eq!(t.column("domain").unwrap().iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(parse_table("a,b\n1,2\n3\n").is_err());
        assert!(parse_table("a\nx\n").is_err());
        assert!(parse_table("").is_err());
    }
}
