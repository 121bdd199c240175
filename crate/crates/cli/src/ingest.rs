//! CSV ingestion into the grouped long format the model consumes.
//!
//! The file needs a header row; each data row is one observation. Rows with a
//! missing value in any used column (empty, `NA`, `NaN`, or `null`, case
//! insensitive) are dropped and counted. Groups keep their order of first
//! appearance.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use spglmm::HierarchicalDataset;

/// Name that synthesizes a constant-one column in `--fixed`/`--random` when
/// the file has no real column of that name (a real column wins).
pub const INTERCEPT_NAME: &str = "1";

/// Which columns of the file feed the model.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    /// Group identifier column.
    pub group: String,
    /// Response column (nonnegative integers).
    pub response: String,
    /// Fixed-effect columns in design order; may be empty.
    pub fixed: Vec<String>,
    /// Random-effect columns in design order; must not be empty. May share
    /// columns with `fixed`.
    pub random: Vec<String>,
    /// Columns standardized to mean 0, sd 1 after row filtering.
    pub standardize: Vec<String>,
}

impl CsvSchema {
    /// Structural checks that need no file: the random design is nonempty,
    /// group/response do not double as covariates, no list repeats a column,
    /// and every standardized column is part of the design.
    pub fn validate(&self) -> Result<()> {
        if self.random.is_empty() {
            bail!("at least one random-effect column is required");
        }
        for (list, label) in [(&self.fixed, "fixed"), (&self.random, "random")] {
            let mut seen = BTreeSet::new();
            for name in list.iter() {
                if !seen.insert(name) {
                    bail!("{label} columns repeat {name:?}");
                }
                if *name == self.group || *name == self.response {
                    bail!(
                        "column {name:?} cannot be both {label} covariate and group/response"
                    );
                }
            }
        }
        if self.group == self.response {
            bail!("group and response must be different columns");
        }
        for name in &self.standardize {
            if !self.fixed.contains(name) && !self.random.contains(name) {
                bail!("standardize column {name:?} is not among the fixed or random columns");
            }
        }
        Ok(())
    }
}

/// Ingestion outcome: the dataset plus row-filtering counts.
#[derive(Debug)]
pub struct Ingested {
    pub data: HierarchicalDataset,
    /// Data rows read from the file (excluding the header).
    pub n_rows_read: usize,
    /// Rows dropped because a used cell was missing.
    pub n_dropped: usize,
}

/// Where one design column comes from.
#[derive(Clone, Copy)]
enum Source {
    Column(usize),
    ConstantOne,
}

fn is_missing(cell: &str) -> bool {
    let v = cell.trim();
    v.is_empty()
        || v.eq_ignore_ascii_case("na")
        || v.eq_ignore_ascii_case("nan")
        || v.eq_ignore_ascii_case("null")
}

fn resolve_column(
    header: &csv::StringRecord,
    name: &str,
    role: &str,
    allow_constant: bool,
) -> Result<Source> {
    if let Some(idx) = header.iter().position(|h| h == name) {
        return Ok(Source::Column(idx));
    }
    if allow_constant && name == INTERCEPT_NAME {
        return Ok(Source::ConstantOne);
    }
    let available: Vec<&str> = header.iter().collect();
    bail!("unknown {role} column {name:?}; file has columns {available:?}");
}

fn parse_number(cell: &str, line: u64, column: &str) -> Result<f64> {
    let value: f64 = cell.trim().parse().map_err(|_| {
        anyhow::anyhow!("line {line}: column {column:?} has non-numeric value {cell:?}")
    })?;
    if !value.is_finite() {
        bail!("line {line}: column {column:?} has non-finite value {cell:?}");
    }
    Ok(value)
}

fn parse_count(cell: &str, line: u64, column: &str) -> Result<u64> {
    let value = parse_number(cell, line, column)?;
    if value < 0.0 || value.fract() != 0.0 {
        bail!(
            "line {line}: response column {column:?} must hold nonnegative integers, got {cell:?}"
        );
    }
    Ok(value as u64)
}

/// Standardize one design column (stored flat, row-major) to mean 0 and
/// sd 1 with the n−1 denominator.
fn standardize_column(values: &mut [f64], stride: usize, offset: usize, name: &str) -> Result<()> {
    let n = values.len() / stride;
    if n < 2 {
        bail!("column {name:?} has fewer than two rows; cannot standardize");
    }
    let mean = (0..n).map(|r| values[r * stride + offset]).sum::<f64>() / n as f64;
    let var = (0..n)
        .map(|r| (values[r * stride + offset] - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64;
    let sd = var.sqrt();
    if !sd.is_finite() || sd <= 0.0 {
        bail!("column {name:?} has zero or undefined spread; cannot standardize");
    }
    for r in 0..n {
        let cell = &mut values[r * stride + offset];
        *cell = (*cell - mean) / sd;
    }
    Ok(())
}

/// Read `path` according to `schema`.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = reader
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))?
        .clone();

    let group_src = match resolve_column(&header, &schema.group, "group", false)? {
        Source::Column(idx) => idx,
        Source::ConstantOne => unreachable!("group never synthesizes a constant"),
    };
    let response_src = match resolve_column(&header, &schema.response, "response", false)? {
        Source::Column(idx) => idx,
        Source::ConstantOne => unreachable!("response never synthesizes a constant"),
    };
    let fixed_src: Vec<Source> = schema
        .fixed
        .iter()
        .map(|name| resolve_column(&header, name, "fixed", true))
        .collect::<Result<_>>()?;
    let random_src: Vec<Source> = schema
        .random
        .iter()
        .map(|name| resolve_column(&header, name, "random", true))
        .collect::<Result<_>>()?;

    let n_fixed = fixed_src.len();
    let n_random = random_src.len();
    let mut groups: Vec<String> = Vec::new();
    let mut y: Vec<u64> = Vec::new();
    let mut x: Vec<f64> = Vec::new();
    let mut z: Vec<f64> = Vec::new();
    let mut n_rows_read = 0usize;
    let mut n_dropped = 0usize;

    for record in reader.records() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        n_rows_read += 1;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |src: Source| -> &str {
            match src {
                Source::Column(idx) => record.get(idx).unwrap_or(""),
                Source::ConstantOne => "1",
            }
        };

        let used_missing = is_missing(cell(Source::Column(group_src)))
            || is_missing(cell(Source::Column(response_src)))
            || fixed_src.iter().any(|&s| is_missing(cell(s)))
            || random_src.iter().any(|&s| is_missing(cell(s)));
        if used_missing {
            n_dropped += 1;
            continue;
        }

        groups.push(cell(Source::Column(group_src)).to_string());
        y.push(parse_count(
            cell(Source::Column(response_src)),
            line,
            &schema.response,
        )?);
        for (src, name) in fixed_src.iter().zip(&schema.fixed) {
            x.push(parse_number(cell(*src), line, name)?);
        }
        for (src, name) in random_src.iter().zip(&schema.random) {
            z.push(parse_number(cell(*src), line, name)?);
        }
    }

    if groups.is_empty() {
        bail!(
            "no usable rows in {}: {n_rows_read} read, {n_dropped} dropped as missing",
            path.display()
        );
    }

    for name in &schema.standardize {
        for (slot, (slot_name, src)) in schema.fixed.iter().zip(&fixed_src).enumerate() {
            if slot_name == name {
                if matches!(src, Source::ConstantOne) {
                    bail!("cannot standardize the constant term {name:?}");
                }
                standardize_column(&mut x, n_fixed, slot, name)?;
            }
        }
        for (slot, (slot_name, src)) in schema.random.iter().zip(&random_src).enumerate() {
            if slot_name == name {
                if matches!(src, Source::ConstantOne) {
                    bail!("cannot standardize the constant term {name:?}");
                }
                standardize_column(&mut z, n_random, slot, name)?;
            }
        }
    }

    let data = HierarchicalDataset::from_long(&groups, &y, &x, &z, n_fixed, n_random)?;
    Ok(Ingested {
        data,
        n_rows_read,
        n_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().expect("temp file");
        file.write_all(body.as_bytes()).expect("write csv");
        file
    }

    fn schema(fixed: &[&str], random: &[&str], standardize: &[&str]) -> CsvSchema {
        CsvSchema {
            group: "g".into(),
            response: "y".into(),
            fixed: fixed.iter().map(|s| s.to_string()).collect(),
            random: random.iter().map(|s| s.to_string()).collect(),
            standardize: standardize.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn groups_keep_first_appearance_order() {
        let file = write_csv("g,y,x\nB,1,0.5\nA,2,1.5\nB,3,2.5\n");
        let got = ingest_csv(file.path(), &schema(&["x"], &["1"], &[])).expect("ingest");
        assert_eq!(got.data.n_groups(), 2, "two distinct groups");
        assert_eq!(
            got.data.group_labels().to_vec(),
            vec!["B".to_string(), "A".to_string()],
            "groups must keep file order of first appearance"
        );
        assert_eq!(got.data.group_rows(0).len(), 2, "B has two rows");
        assert_eq!(got.data.group_rows(1).len(), 1, "A has one row");
        assert_eq!(got.n_rows_read, 3);
        assert_eq!(got.n_dropped, 0);
    }

    #[test]
    fn missing_cells_drop_the_row_and_count_it() {
        let file = write_csv("g,y,x,unused\nA,1,0.5,na\nA,NA,1.5,7\nB,2,NaN,7\nB,3,null,7\nB,4,2.0,7\n");
        let got = ingest_csv(file.path(), &schema(&["x"], &["1"], &[])).expect("ingest");
        assert_eq!(
            got.n_dropped, 3,
            "NA response, NaN and null covariates are missing; markers in unused columns are not"
        );
        assert_eq!(got.data.n_obs(), 2, "two usable rows remain");
    }

    #[test]
    fn standardized_column_has_zero_mean_unit_sd() {
        let file = write_csv("g,y,x\nA,1,10\nA,2,20\nB,3,30\nB,4,44\n");
        let got =
            ingest_csv(file.path(), &schema(&["x"], &["1"], &["x"])).expect("ingest");
        let values: Vec<f64> = (0..got.data.n_obs()).map(|j| got.data.x_row(j)[0]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 1e-12, "standardized mean should be 0, got {mean}");
        assert!((sd - 1.0).abs() < 1e-12, "standardized sd should be 1, got {sd}");
    }

    #[test]
    fn unknown_column_is_named_in_the_error() {
        let file = write_csv("g,y,x\nA,1,0.5\n");
        let err = ingest_csv(file.path(), &schema(&["w"], &["1"], &[]))
            .expect_err("unknown column should fail");
        assert!(
            err.to_string().contains("\"w\""),
            "error should name the missing column, got: {err}"
        );
    }

    #[test]
    fn non_numeric_cell_reports_line_and_column() {
        let file = write_csv("g,y,x\nA,1,0.5\nA,two,1.5\n");
        let err = ingest_csv(file.path(), &schema(&["x"], &["1"], &[]))
            .expect_err("non-numeric response should fail");
        let msg = err.to_string();
        assert!(
            msg.contains("line 3") && msg.contains("\"y\""),
            "error should give row and column context, got: {msg}"
        );
    }

    #[test]
    fn fractional_response_is_rejected() {
        let file = write_csv("g,y,x\nA,2.5,0.5\n");
        let err = ingest_csv(file.path(), &schema(&["x"], &["1"], &[]))
            .expect_err("fractional response should fail");
        assert!(
            err.to_string().contains("nonnegative integers"),
            "error should explain the integer requirement, got: {err}"
        );
    }

    #[test]
    fn intercept_token_synthesizes_ones_unless_a_real_column_exists() {
        let file = write_csv("g,y,x\nA,1,0.5\nB,2,1.5\n");
        let got = ingest_csv(file.path(), &schema(&["x"], &["1"], &[])).expect("ingest");
        assert_eq!(got.data.z_row(0), &[1.0], "token 1 becomes a constant column");
        assert_eq!(got.data.z_row(1), &[1.0]);

        let file = write_csv("g,y,1\nA,1,3.0\nB,2,4.0\n");
        let got = ingest_csv(file.path(), &schema(&[], &["1"], &[])).expect("ingest");
        assert_eq!(
            got.data.z_row(0),
            &[3.0],
            "a real column named 1 must win over the synthesized constant"
        );
    }

    #[test]
    fn fixed_and_random_may_share_a_column() {
        let file = write_csv("g,y,x\nA,1,0.5\nB,2,1.5\n");
        let got = ingest_csv(file.path(), &schema(&["x"], &["x"], &[])).expect("ingest");
        assert_eq!(got.data.x_row(1), got.data.z_row(1), "shared column feeds both designs");
    }

    #[test]
    fn all_rows_missing_is_an_error() {
        let file = write_csv("g,y,x\nA,NA,0.5\nB,2,\n");
        let err = ingest_csv(file.path(), &schema(&["x"], &["1"], &[]))
            .expect_err("empty after filtering should fail");
        assert!(
            err.to_string().contains("2 dropped"),
            "error should report the drop count, got: {err}"
        );
    }

    #[test]
    fn standardizing_the_synthesized_constant_is_rejected() {
        let file = write_csv("g,y,x\nA,1,0.5\nB,2,1.5\n");
        let err = ingest_csv(file.path(), &schema(&["x"], &["1"], &["1"]))
            .expect_err("constant term cannot be standardized");
        assert!(
            err.to_string().contains("constant term"),
            "error should explain why, got: {err}"
        );
    }
}
