//! Missingness-pattern encoding, dataset representation, CSV ingestion,
//! and pattern-support diagnostics.
//!
//! Variable indices are 1-based in every external interface (column
//! headers, CLI selectors) and 0-based internally.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A missingness pattern over `k` partially-observed variables.
///
/// Bit `i` (0-based) is 1 when variable `i` is observed. The integer
/// index is `sum_i bits_i * 2^i`, so the complete-case pattern is
/// `2^k - 1` and the all-missing pattern is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternId {
    index: u32,
    k: u8,
}

impl PatternId {
    pub fn from_index(index: u32, k: usize) -> Result<Self> {
        if k < 2 || k > 31 {
            return Err(Error::InvalidSpec(format!("K must be in [2, 31], got {k}")));
        }
        if index >= (1u32 << k) {
            return Err(Error::InvalidSpec(format!(
                "pattern index {index} out of range for K={k}"
            )));
        }
        Ok(PatternId { index, k: k as u8 })
    }

    /// Encode a bit sequence (1 = observed) into a pattern.
    pub fn encode(bits: &[u8]) -> Result<Self> {
        if bits.len() < 2 || bits.len() > 31 {
            return Err(Error::InvalidSpec(format!(
                "pattern length must be in [2, 31], got {}",
                bits.len()
            )));
        }
        let mut index = 0u32;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => index |= 1 << i,
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "pattern bits must be 0 or 1, got {b} at position {i}"
                    )))
                }
            }
        }
        Ok(PatternId {
            index,
            k: bits.len() as u8,
        })
    }

    pub fn complete(k: usize) -> Self {
        PatternId {
            index: (1u32 << k) - 1,
            k: k as u8,
        }
    }

    pub fn all_missing(k: usize) -> Self {
        PatternId { index: 0, k: k as u8 }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    /// True when variable `i` (0-based) is observed under this pattern.
    pub fn is_observed(&self, i: usize) -> bool {
        self.index & (1 << i) != 0
    }

    pub fn is_complete(&self) -> bool {
        self.index == (1u32 << self.k) - 1
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.k()).map(|i| self.is_observed(i) as u8).collect()
    }

    /// Indices of observed variables, ascending.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.is_observed(i)).collect()
    }

    /// Indices of missing variables, ascending.
    pub fn missing(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| !self.is_observed(i)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.index.count_ones() as usize
    }

    /// The pattern with only variable `i` missing.
    pub fn leave_one_out(i: usize, k: usize) -> Self {
        PatternId {
            index: ((1u32 << k) - 1) & !(1 << i),
            k: k as u8,
        }
    }

    /// All `2^k` patterns in index order.
    pub fn all(k: usize) -> impl Iterator<Item = PatternId> {
        (0..(1u32 << k)).map(move |index| PatternId { index, k: k as u8 })
    }

    pub fn with_bit(&self, i: usize, observed: bool) -> Self {
        let mut index = self.index & !(1 << i);
        if observed {
            index |= 1 << i;
        }
        PatternId { index, k: self.k }
    }
}

impl std::fmt::Display for PatternId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.k() {
            write!(f, "{}", self.is_observed(i) as u8)?;
        }
        Ok(())
    }
}

/// One observation: a pattern, the observed coordinates of L (missing
/// coordinates are NaN), and the always-observed covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub pattern: PatternId,
    /// Length K; `l[i]` is NaN exactly when `pattern` has bit `i` unset.
    pub l: Vec<f64>,
    pub x: Vec<f64>,
}

impl Record {
    pub fn new(pattern: PatternId, l: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        if l.len() != pattern.k() {
            return Err(Error::DimensionMismatch(format!(
                "record has {} L values for K={}",
                l.len(),
                pattern.k()
            )));
        }
        for (i, v) in l.iter().enumerate() {
            if pattern.is_observed(i) != v.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "L{} inconsistent with pattern {}",
                    i + 1,
                    pattern
                )));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("X contains non-finite values".into()));
        }
        Ok(Record { pattern, l, x })
    }
}

/// An immutable collection of records with common dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    k: usize,
    p: usize,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(k: usize, p: usize, records: Vec<Record>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidSpec(format!("K must be at least 2, got {k}")));
        }
        for r in &records {
            if r.pattern.k() != k || r.l.len() != k {
                return Err(Error::DimensionMismatch(
                    "record K inconsistent with dataset".into(),
                ));
            }
            if r.x.len() != p {
                return Err(Error::DimensionMismatch(
                    "record X dimension inconsistent with dataset".into(),
                ));
            }
        }
        Ok(Dataset { k, p, records })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn pattern_support(&self) -> SupportTable {
        let mut counts: HashMap<PatternId, usize> = HashMap::new();
        for r in &self.records {
            *counts.entry(r.pattern).or_insert(0) += 1;
        }
        let complete = counts
            .get(&PatternId::complete(self.k))
            .copied()
            .unwrap_or(0);
        let leave_one_out_ok = (0..self.k)
            .map(|i| {
                complete > 0
                    && counts
                        .get(&PatternId::leave_one_out(i, self.k))
                        .copied()
                        .unwrap_or(0)
                        > 0
            })
            .collect();
        SupportTable {
            counts,
            leave_one_out_ok,
            n: self.records.len(),
        }
    }

    /// Resample with replacement; indices are drawn by the caller.
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        Dataset {
            k: self.k,
            p: self.p,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Read a dataset from CSV with header `L1,...,LK,X1,...,Xp`.
    pub fn from_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Ingest {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        if headers.len() != schema.k + schema.p {
            return Err(Error::Ingest {
                row: 0,
                message: format!(
                    "expected {} columns (K={} + p={}), found {}",
                    schema.k + schema.p,
                    schema.k,
                    schema.p,
                    headers.len()
                ),
            });
        }
        let mut records = Vec::new();
        for (row_idx, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Ingest {
                row: row_idx + 1,
                message: e.to_string(),
            })?;
            let mut bits = vec![0u8; schema.k];
            let mut l = vec![f64::NAN; schema.k];
            let mut x = vec![0.0; schema.p];
            for (col, cell) in row.iter().enumerate() {
                let cell = cell.trim();
                let is_missing = schema.is_missing(cell);
                let name = headers.get(col).unwrap_or("").to_string();
                if col < schema.k {
                    if !is_missing {
                        bits[col] = 1;
                        l[col] = parse_cell(cell, row_idx + 1, &name)?;
                    }
                } else {
                    if is_missing {
                        return Err(Error::MissingCovariate {
                            row: row_idx + 1,
                            column: name,
                        });
                    }
                    x[col - schema.k] = parse_cell(cell, row_idx + 1, &name)?;
                }
            }
            let pattern = PatternId::encode(&bits)?;
            records.push(Record::new(pattern, l, x)?);
        }
        if records.is_empty() {
            return Err(Error::EmptyInput("CSV contains no data rows".into()));
        }
        Dataset::new(schema.k, schema.p, records)
    }

    /// Write the dataset back out in the same CSV layout.
    pub fn to_csv<W: Write>(&self, writer: W, schema: &CsvSchema) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        for i in 0..self.k {
            header.push(format!("L{}", i + 1));
        }
        for j in 0..self.p {
            header.push(format!("X{}", j + 1));
        }
        wtr.write_record(&header).map_err(io_err)?;
        for r in &self.records {
            let mut row = Vec::new();
            for i in 0..self.k {
                if r.pattern.is_observed(i) {
                    row.push(format_value(r.l[i]));
                } else {
                    row.push(schema.missing_token.clone());
                }
            }
            for v in &r.x {
                row.push(format_value(*v));
            }
            wtr.write_record(&row).map_err(io_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Ingest {
        row: 0,
        message: e.to_string(),
    }
}

fn format_value(v: f64) -> String {
    // Ryu shortest round-trip representation via the standard formatter.
    format!("{v}")
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonNumericCell {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        });
    }
    Ok(v)
}

/// Column layout and missing-token configuration for CSV files.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub k: usize,
    pub p: usize,
    /// Cells equal to this token (or empty, if `empty_is_missing`) are
    /// treated as missing in L columns.
    pub missing_token: String,
    pub empty_is_missing: bool,
}

impl CsvSchema {
    pub fn new(k: usize, p: usize) -> Self {
        CsvSchema {
            k,
            p,
            missing_token: "NA".to_string(),
            empty_is_missing: true,
        }
    }

    pub fn with_missing_token(mut self, token: &str) -> Self {
        self.missing_token = token.to_string();
        self
    }

    fn is_missing(&self, cell: &str) -> bool {
        cell == self.missing_token || (self.empty_is_missing && cell.is_empty())
    }
}

/// Empirical pattern counts and per-variable leave-one-out support.
#[derive(Debug, Clone)]
pub struct SupportTable {
    pub counts: HashMap<PatternId, usize>,
    pub leave_one_out_ok: Vec<bool>,
    pub n: usize,
}

impl SupportTable {
    pub fn count(&self, pattern: PatternId) -> usize {
        self.counts.get(&pattern).copied().unwrap_or(0)
    }

    pub fn n_complete(&self, k: usize) -> usize {
        self.count(PatternId::complete(k))
    }

    /// Variables that are missing in at least one record.
    pub fn ever_missing(&self, k: usize) -> Vec<usize> {
        (0..k)
            .filter(|&i| {
                self.counts
                    .iter()
                    .any(|(pat, &c)| c > 0 && !pat.is_observed(i))
            })
            .collect()
    }
}
