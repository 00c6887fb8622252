//! Line-oriented text format for models.
//!
//! ```text
//! # comments and blank lines are ignored
//! vars 3
//! unary 0 0.0 0.25
//! unary 1 0.0 -1.5 0.5
//! factor 0 0 1 1.0 0.5 2.0 0.5 1.0 0.25
//! ```
//!
//! * `vars N` must come first.
//! * `unary v a0 a1 ...` gives the log potentials of variable `v`; its
//!   length is the cardinality. Variables without a `unary` line are binary
//!   with zero unaries.
//! * `factor id u v t00 t01 ...` gives a strictly positive table in
//!   row-major order (rows are states of `u`). Ids must be unique and need
//!   not be contiguous.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so
//! `write_model` followed by `parse_model` reproduces every value bit for bit.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{FactorId, Model, Table, Variable};

pub fn write_model(model: &Model) -> String {
    let mut out = String::new();
    writeln!(out, "vars {}", model.num_variables()).unwrap();
    for (v, var) in model.variables().iter().enumerate() {
        write!(out, "unary {v}").unwrap();
        for a in var.unary() {
            write!(out, " {a:?}").unwrap();
        }
        out.push('\n');
    }
    for f in model.factors() {
        let (u, v) = f.scope();
        write!(out, "factor {} {u} {v}", f.id()).unwrap();
        for t in f.table().data() {
            write!(out, " {t:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_model(text: &str) -> Result<Model> {
    let mut n_vars: Option<usize> = None;
    let mut unaries: Vec<Option<Vec<f64>>> = Vec::new();
    let mut factor_lines = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap();
        let rest: Vec<&str> = tokens.collect();
        match keyword {
            "vars" => {
                if n_vars.is_some() {
                    return Err(parse_err(line_no, "duplicate `vars` header"));
                }
                if rest.len() != 1 {
                    return Err(parse_err(line_no, "`vars` takes exactly one count"));
                }
                let n = parse_usize(rest[0], line_no)?;
                n_vars = Some(n);
                unaries = vec![None; n];
            }
            "unary" => {
                let n = n_vars.ok_or_else(|| parse_err(line_no, "`vars` header must come first"))?;
                if rest.len() < 3 {
                    return Err(parse_err(line_no, "`unary` needs a variable and at least two values"));
                }
                let v = parse_usize(rest[0], line_no)?;
                if v >= n {
                    return Err(parse_err(line_no, format!("variable {v} out of range (vars {n})")));
                }
                if unaries[v].is_some() {
                    return Err(parse_err(line_no, format!("duplicate unary for variable {v}")));
                }
                let values = rest[1..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<Vec<_>>>()?;
                unaries[v] = Some(values);
            }
            "factor" => {
                if n_vars.is_none() {
                    return Err(parse_err(line_no, "`vars` header must come first"));
                }
                if rest.len() < 4 {
                    return Err(parse_err(line_no, "`factor` needs id, two variables and a table"));
                }
                let id = parse_usize(rest[0], line_no)?;
                let u = parse_usize(rest[1], line_no)?;
                let v = parse_usize(rest[2], line_no)?;
                let table = rest[3..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<Vec<_>>>()?;
                factor_lines.push((line_no, id, u, v, table));
            }
            other => return Err(parse_err(line_no, format!("unknown keyword `{other}`"))),
        }
    }

    if n_vars.is_none() {
        return Err(parse_err(0, "missing `vars` header"));
    }
    let mut model = Model::new();
    for unary in unaries {
        let var = Variable::new(unary.unwrap_or_else(|| vec![0.0, 0.0]))
            .map_err(|e| parse_err(0, e.to_string()))?;
        model.add_variable(var);
    }
    for (line_no, id, u, v, data) in factor_lines {
        let n = model.num_variables();
        if u >= n || v >= n {
            return Err(parse_err(line_no, format!("factor scope ({u}, {v}) out of range")));
        }
        let (rows, cols) = (model.cardinality(u), model.cardinality(v));
        let table = Table::new(rows, cols, data).map_err(|e| parse_err(line_no, e.to_string()))?;
        model
            .insert_factor(FactorId(id), u, v, table)
            .map_err(|e| parse_err(line_no, e.to_string()))?;
    }
    Ok(model)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_usize(token: &str, line: usize) -> Result<usize> {
    token
        .parse()
        .map_err(|_| parse_err(line, format!("expected a non-negative integer, got `{token}`")))
}

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    token
        .parse()
        .map_err(|_| parse_err(line, format!("expected a number, got `{token}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid_ising, build_random_graph};
    use proptest::prelude::*;

    #[test]
    fn parses_documented_example() {
        let text = "# example\nvars 3\nunary 0 0.0 0.25\nunary 1 0.0 -1.5 0.5\n\
                    factor 0 0 1 1.0 0.5 2.0 0.5 1.0 0.25\n";
        let m = parse_model(text).unwrap();
        assert_eq!(m.num_variables(), 3);
        assert_eq!(m.cardinality(1), 3);
        assert_eq!(m.cardinality(2), 2);
        let f = m.factor(FactorId(0)).unwrap();
        assert_eq!(f.table().get(1, 2), 0.25);
    }

    #[test]
    fn keeps_sparse_ids() {
        let mut m = build_grid_ising(2, 2, 0.5, None).unwrap();
        m.remove_factor(FactorId(1)).unwrap();
        let back = parse_model(&write_model(&m)).unwrap();
        assert_eq!(back, m);
        assert!(back.factor(FactorId(1)).is_none());
    }

    #[test]
    fn reports_line_numbers() {
        let text = "vars 2\nunary 0 0 0\nfactor 0 0 1 1 -1 1 1\n";
        match parse_model(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("factor 0"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_model("unary 0 0 0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_model("vars 2\nfactor 0 0 1 1 x 1 1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_model("vars 2\nfactor 0 0 1 1 1 1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), n in 3usize..12) {
            let m = build_random_graph(n, 1, seed).unwrap();
            let text = write_model(&m);
            let back = parse_model(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(write_model(&back), text);
        }
    }
}
