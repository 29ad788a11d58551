//! Plain-text matrix fixtures.
//!
//! ```text
//! # comments and blank lines are ignored
//! attr eta 0.5
//! matrix k_in 2 3
//! 1 0 0
//! 0 1 0
//! ```
//!
//! `attr <key> <value>` sets a string attribute. `matrix <name> <rows>
//! <cols>` is followed by exactly `rows` lines of `cols` whitespace-separated
//! numbers. Vectors are stored as single-column matrices. Numbers are written
//! with 17 significant digits, which round-trips every `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use i2o_core::metalin::{LinearTask, MetaConfig};
use i2o_core::{
    AffineInnerProblem, Bilevel, Matrix, QuadraticOuterLoss, TrainedOuter, TrainingMethod, Vector,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fixture {
    pub attrs: BTreeMap<String, String>,
    pub matrices: BTreeMap<String, Matrix>,
}

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl Fixture {
    pub fn set_attr(&mut self, key: &str, value: impl ToString) {
        self.attrs.insert(key.to_owned(), value.to_string());
    }

    pub fn set_matrix(&mut self, name: &str, m: Matrix) {
        self.matrices.insert(name.to_owned(), m);
    }

    pub fn set_vector(&mut self, name: &str, v: &Vector) {
        self.matrices.insert(
            name.to_owned(),
            Matrix::from_column_slice(v.len(), 1, v.as_slice()),
        );
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        self.matrices
            .get(name)
            .ok_or_else(|| CliError::Config(format!("fixture lacks matrix `{name}`")))
    }

    pub fn vector(&self, name: &str) -> Result<Vector> {
        let m = self.matrix(name)?;
        if m.ncols() != 1 {
            return Err(CliError::Config(format!(
                "`{name}` must be a single column, found {} columns",
                m.ncols()
            )));
        }
        Ok(m.column(0).into_owned())
    }

    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Config(format!("fixture lacks attribute `{key}`")))
    }

    pub fn attr_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.attr(key)?;
        raw.parse()
            .map_err(|_| CliError::Config(format!("attribute `{key}` has bad value `{raw}`")))
    }

    /// Attributes first, then matrices, both in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.attrs {
            writeln!(out, "attr {k} {v}").expect("write to string");
        }
        for (name, m) in &self.matrices {
            writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols()).expect("write to string");
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|&x| format_f64(x)).collect();
                writeln!(out, "{}", cells.join(" ")).expect("write to string");
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| CliError::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut fixture = Fixture::default();
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        while let Some((no, line)) = lines.next() {
            let mut words = line.split_whitespace();
            match words.next() {
                Some("attr") => {
                    let key = words
                        .next()
                        .ok_or_else(|| err(no, "attr needs a key".into()))?;
                    let value: Vec<&str> = words.collect();
                    if value.is_empty() {
                        return Err(err(no, format!("attr `{key}` needs a value")));
                    }
                    fixture.set_attr(key, value.join(" "));
                }
                Some("matrix") => {
                    let header: Vec<&str> = words.collect();
                    let [name, rows, cols] = header[..] else {
                        return Err(err(no, "expected `matrix <name> <rows> <cols>`".into()));
                    };
                    let dim = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| err(no, format!("bad dimension `{s}`")))
                    };
                    let (rows, cols) = (dim(rows)?, dim(cols)?);
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let (row_no, row) = lines.next().ok_or_else(|| {
                            err(no, format!("matrix `{name}` ends after {r} of {rows} rows"))
                        })?;
                        let before = data.len();
                        for cell in row.split_whitespace() {
                            let x: f64 = cell
                                .parse()
                                .map_err(|_| err(row_no, format!("bad number `{cell}`")))?;
                            data.push(x);
                        }
                        if data.len() - before != cols {
                            return Err(err(
                                row_no,
                                format!("expected {cols} entries, found {}", data.len() - before),
                            ));
                        }
                    }
                    if fixture.matrices.contains_key(name) {
                        return Err(err(no, format!("duplicate matrix `{name}`")));
                    }
                    fixture.set_matrix(name, Matrix::from_row_slice(rows, cols, &data));
                }
                Some(other) => return Err(err(no, format!("unknown directive `{other}`"))),
                None => unreachable!("blank lines are filtered"),
            }
        }
        Ok(fixture)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }
}

pub fn problem_to_fixture(b: &Bilevel) -> Fixture {
    let mut f = Fixture::default();
    f.set_attr("kind", "problem");
    f.set_attr("eta", format_f64(b.eta()));
    let inner = b.inner();
    f.set_matrix("k_in", inner.k_in().clone());
    f.set_matrix("b", inner.b().clone());
    f.set_matrix("u", inner.u().clone());
    f.set_vector("c", inner.c());
    f.set_matrix("k_out", b.outer().k_out().clone());
    f.set_vector("omega", b.outer().omega());
    f.set_vector("z0", b.z0());
    f
}

/// Without an `eta` attribute the default step is used.
pub fn problem_from_fixture(f: &Fixture) -> Result<Bilevel> {
    let inner = AffineInnerProblem::new(
        f.matrix("k_in")?.clone(),
        f.matrix("b")?.clone(),
        f.matrix("u")?.clone(),
        f.vector("c")?,
    )?;
    let outer = QuadraticOuterLoss::new(f.matrix("k_out")?.clone(), f.vector("omega")?)?;
    let z0 = f.vector("z0")?;
    Ok(if f.attrs.contains_key("eta") {
        Bilevel::new(inner, outer, f.attr_parsed("eta")?, z0)?
    } else {
        Bilevel::with_default_step(inner, outer, z0)?
    })
}

/// Inner problem alone, for validation of fixtures that may not be valid.
pub fn inner_from_fixture(f: &Fixture) -> Result<AffineInnerProblem> {
    Ok(AffineInnerProblem::new(
        f.matrix("k_in")?.clone(),
        f.matrix("b")?.clone(),
        f.matrix("u")?.clone(),
        f.vector("c")?,
    )?)
}

pub fn trained_to_fixture(t: &TrainedOuter) -> Fixture {
    let mut f = Fixture::default();
    f.set_attr("kind", "trained");
    f.set_attr("method", t.method.as_str());
    f.set_attr("n_train", t.n_train);
    f.set_attr("residual", format_f64(t.residual));
    f.set_attr("steps_taken", t.steps_taken);
    f.set_vector("theta", &t.theta);
    f
}

pub fn trained_from_fixture(f: &Fixture) -> Result<TrainedOuter> {
    let method: TrainingMethod = f.attr_parsed("method")?;
    Ok(TrainedOuter {
        theta: f.vector("theta")?,
        method,
        n_train: f.attr_parsed("n_train")?,
        residual: f.attr_parsed("residual")?,
        steps_taken: f.attr_parsed("steps_taken")?,
    })
}

/// Task manifest: `attr lambda`, `attr tasks <count>` and, per task `i`,
/// matrices `task<i>.x_train`, `task<i>.y_train`, `task<i>.x_val`,
/// `task<i>.y_val`.
pub fn meta_to_fixture(cfg: &MetaConfig) -> Fixture {
    let mut f = Fixture::default();
    f.set_attr("kind", "tasks");
    f.set_attr("lambda", format_f64(cfg.lambda()));
    f.set_attr("tasks", cfg.tasks().len());
    for (i, t) in cfg.tasks().iter().enumerate() {
        f.set_matrix(&format!("task{i}.x_train"), t.x_train().clone());
        f.set_vector(&format!("task{i}.y_train"), t.y_train());
        f.set_matrix(&format!("task{i}.x_val"), t.x_val().clone());
        f.set_vector(&format!("task{i}.y_val"), t.y_val());
    }
    f
}

pub fn meta_from_fixture(f: &Fixture) -> Result<MetaConfig> {
    let count: usize = f.attr_parsed("tasks")?;
    let tasks = (0..count)
        .map(|i| {
            Ok(LinearTask::new(
                f.matrix(&format!("task{i}.x_train"))?.clone(),
                f.vector(&format!("task{i}.y_train"))?,
                f.matrix(&format!("task{i}.x_val"))?.clone(),
                f.vector(&format!("task{i}.y_val"))?,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaConfig::new(f.attr_parsed("lambda")?, tasks)?)
}
