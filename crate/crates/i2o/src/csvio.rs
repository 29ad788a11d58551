//! CSV schemas. Floats use 17 significant digits so that parsing a file
//! back gives the written values bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use i2o_core::theory::{AvgCaseReport, SeedCell};
use i2o_core::{DeltaN, I2ORow};

use crate::error::{CliError, Result};
use crate::fixture::format_f64;

pub const SWEEP_HEADER: &str = "seed,n,delta_n,loss_n,loss_n_dn,d_gap,lower_bound";
pub const AVGCASE_HEADER: &str = "seed,d_theta,n,lower_bound,rhs";
pub const SUMMARY_HEADER: &str =
    "d_theta,n,seeds,mean_magnitude,magnitude_std_err,mean_rhs,mean_excess,excess_std_err";
pub const IFT_HEADER: &str =
    "seed,n,loss_ift,loss_unrolled,residual_ift,residual_unrolled,steps_ift,steps_unrolled";

fn opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

pub fn sweep_csv(rows: &[I2ORow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.n,
            r.delta_n,
            format_f64(r.loss_n),
            format_f64(r.loss_n_dn),
            format_f64(r.d_gap),
            format_f64(r.lower_bound)
        )
        .expect("write to string");
    }
    out
}

/// One line per seed and cell, in seed order.
pub fn avgcase_csv(report: &AvgCaseReport) -> String {
    let mut out = String::from(AVGCASE_HEADER);
    out.push('\n');
    for s in report.per_seed() {
        for c in &s.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.seed,
                c.d_theta,
                c.n,
                format_f64(c.lower_bound),
                opt(c.rhs)
            )
            .expect("write to string");
        }
    }
    out
}

pub fn summary_csv(report: &AvgCaseReport) -> String {
    let seeds = report.per_seed().len();
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for c in report.cells() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.d_theta,
            c.n,
            seeds,
            format_f64(c.mean_magnitude),
            format_f64(c.magnitude_std_err),
            opt(c.mean_rhs),
            opt(c.mean_excess),
            opt(c.excess_std_err)
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IftRow {
    pub seed: u64,
    pub n: usize,
    pub loss_ift: f64,
    pub loss_unrolled: f64,
    pub residual_ift: f64,
    pub residual_unrolled: f64,
    pub steps_ift: usize,
    pub steps_unrolled: usize,
}

pub fn ift_csv(rows: &[IftRow]) -> String {
    let mut out = String::from(IFT_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.n,
            format_f64(r.loss_ift),
            format_f64(r.loss_unrolled),
            format_f64(r.residual_ift),
            format_f64(r.residual_unrolled),
            r.steps_ift,
            r.steps_unrolled
        )
        .expect("write to string");
    }
    out
}

/// Which schema a CSV file follows, from its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Sweep,
    AvgCase,
}

/// Rows of a CSV file with the header checked, each with its 1-based line.
struct Table {
    schema: Schema,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(text: &str, path: &Path) -> Result<Table> {
    let err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    let schema = match header.as_str() {
        SWEEP_HEADER => Schema::Sweep,
        AVGCASE_HEADER => Schema::AvgCase,
        "" => return Err(err(1, "empty file".into())),
        other => return Err(err(1, format!("unrecognized header `{other}`"))),
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    if rows.is_empty() {
        return Err(err(2, "no data rows".into()));
    }
    Ok(Table { schema, rows })
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} `{raw}`"),
    })
}

pub fn detect_schema(text: &str, path: &Path) -> Result<Schema> {
    Ok(read_table(text, path)?.schema)
}

fn expect_schema(table: &Table, want: Schema, path: &Path) -> Result<()> {
    if table.schema != want {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected the {want:?} schema, found {:?}", table.schema),
        });
    }
    Ok(())
}

pub fn parse_sweep(text: &str, path: &Path) -> Result<Vec<I2ORow>> {
    let table = read_table(text, path)?;
    expect_schema(&table, Schema::Sweep, path)?;
    table
        .rows
        .iter()
        .map(|(line, f)| {
            let line = *line;
            let delta: DeltaN = field(path, line, "delta_n", &f[2])?;
            Ok(I2ORow {
                seed: field(path, line, "seed", &f[0])?,
                n: field(path, line, "n", &f[1])?,
                delta_n: delta,
                loss_n: field(path, line, "loss_n", &f[3])?,
                loss_n_dn: field(path, line, "loss_n_dn", &f[4])?,
                d_gap: field(path, line, "d_gap", &f[5])?,
                lower_bound: field(path, line, "lower_bound", &f[6])?,
            })
        })
        .collect()
}

/// `(seed, cell)` pairs of an avgcase file.
pub fn parse_avgcase(text: &str, path: &Path) -> Result<Vec<(u64, SeedCell)>> {
    let table = read_table(text, path)?;
    expect_schema(&table, Schema::AvgCase, path)?;
    table
        .rows
        .iter()
        .map(|(line, f)| {
            let line = *line;
            let rhs = if f[4].is_empty() {
                None
            } else {
                Some(field(path, line, "rhs", &f[4])?)
            };
            Ok((
                field(path, line, "seed", &f[0])?,
                SeedCell {
                    d_theta: field(path, line, "d_theta", &f[1])?,
                    n: field(path, line, "n", &f[2])?,
                    lower_bound: field(path, line, "lower_bound", &f[3])?,
                    rhs,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_round_trip_is_exact() {
        let rows = vec![
            I2ORow {
                seed: 3,
                n: 20,
                delta_n: DeltaN::Steps(-19),
                loss_n: 0.1 + 0.2,
                loss_n_dn: 1.0 / 3.0,
                d_gap: 1.0 / 3.0 - 0.30000000000000004,
                lower_bound: -2.5e-300,
            },
            I2ORow {
                seed: 3,
                n: 20,
                delta_n: DeltaN::Infinite,
                loss_n: 0.0,
                loss_n_dn: f64::MIN_POSITIVE,
                d_gap: 5e-324,
                lower_bound: -0.0,
            },
        ];
        let text = sweep_csv(&rows);
        assert!(text.starts_with("seed,n,delta_n,loss_n,loss_n_dn,d_gap,lower_bound\n"));
        let back = parse_sweep(&text, Path::new("mem")).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.delta_n, b.delta_n);
            assert_eq!(a.loss_n.to_bits(), b.loss_n.to_bits());
            assert_eq!(a.loss_n_dn.to_bits(), b.loss_n_dn.to_bits());
            assert_eq!(a.d_gap.to_bits(), b.d_gap.to_bits());
            assert_eq!(a.lower_bound.to_bits(), b.lower_bound.to_bits());
        }
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let text = format!("{SWEEP_HEADER}\n1,2,0,1,1,0,0\n1,2,x,1,1,0,0\n");
        match parse_sweep(&text, Path::new("bad.csv")) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let ragged = format!("{SWEEP_HEADER}\n1,2,0,1,1,0,0\n1,2\n");
        assert!(matches!(
            parse_sweep(&ragged, Path::new("r.csv")),
            Err(CliError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_sweep(&format!("{SWEEP_HEADER}\n"), Path::new("e.csv")),
            Err(CliError::Parse { .. })
        ));
        assert!(matches!(
            parse_sweep("a,b\n1,2\n", Path::new("h.csv")),
            Err(CliError::Parse { line: 1, .. })
        ));
    }
}
