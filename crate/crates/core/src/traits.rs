//! The N×q trait table with its observed/missing mask.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::Phylogeny;

/// Trait measurements. Masked cells hold NaN so that any accidental read
/// poisons downstream arithmetic instead of silently contributing.
#[derive(Debug, Clone)]
pub struct TraitMatrix {
    values: DMatrix<f64>,
    mask: Vec<bool>,
    taxon_names: Vec<String>,
    trait_names: Vec<String>,
}

/// Equal when names, masks and observed values agree; masked cells are ignored.
impl PartialEq for TraitMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.taxon_names == other.taxon_names
            && self.trait_names == other.trait_names
            && self.mask == other.mask
            && self.values.shape() == other.values.shape()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Log,
    Logit,
}

impl TraitMatrix {
    pub fn new(
        taxon_names: Vec<String>,
        trait_names: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let n = taxon_names.len();
        let q = trait_names.len();
        if rows.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} taxa but {} rows", rows.len())));
        }
        let mut values = DMatrix::from_element(n, q, f64::NAN);
        let mut mask = vec![false; n * q];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != q {
                return Err(Error::RaggedRow { row: i + 1, expected: q, found: row.len() });
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    values[(i, j)] = *v;
                    mask[i * q + j] = true;
                }
            }
        }
        Self::check_names(&taxon_names)?;
        Ok(TraitMatrix { values, mask, taxon_names, trait_names })
    }

    /// Builds a table from a dense matrix and a row-major mask.
    pub fn from_dense(
        taxon_names: Vec<String>,
        trait_names: Vec<String>,
        dense: &DMatrix<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let (n, q) = dense.shape();
        if taxon_names.len() != n || trait_names.len() != q || mask.len() != n * q {
            return Err(Error::DimensionMismatch("names, values and mask disagree".into()));
        }
        Self::check_names(&taxon_names)?;
        let values = DMatrix::from_fn(n, q, |i, j| if mask[i * q + j] { dense[(i, j)] } else { f64::NAN });
        Ok(TraitMatrix { values, mask, taxon_names, trait_names })
    }

    fn check_names(names: &[String]) -> Result<()> {
        let mut seen = HashMap::with_capacity(names.len());
        for name in names {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::DuplicateTaxon(name.clone()));
            }
        }
        Ok(())
    }

    pub fn n_taxa(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_traits(&self) -> usize {
        self.values.ncols()
    }

    pub fn taxon_names(&self) -> &[String] {
        &self.taxon_names
    }

    pub fn trait_names(&self) -> &[String] {
        &self.trait_names
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_traits() + j]
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.is_observed(i, j).then(|| self.values[(i, j)])
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        let q = self.n_traits();
        &self.mask[i * q..(i + 1) * q]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Raw values; masked cells are NaN.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn observed_indices(&self, i: usize) -> Vec<usize> {
        (0..self.n_traits()).filter(|&j| self.is_observed(i, j)).collect()
    }

    pub fn missing_indices(&self, i: usize) -> Vec<usize> {
        (0..self.n_traits()).filter(|&j| !self.is_observed(i, j)).collect()
    }

    pub fn observed_counts(&self) -> Vec<usize> {
        (0..self.n_traits())
            .map(|j| (0..self.n_taxa()).filter(|&i| self.is_observed(i, j)).count())
            .collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        let total = self.mask.len();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.n_observed() as f64 / total as f64
    }

    /// Same values with a different mask; newly masked cells become NaN.
    /// Cells unmasked by `mask` must already be observed.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::DimensionMismatch("mask size".into()));
        }
        if mask.iter().zip(&self.mask).any(|(&new, &old)| new && !old) {
            return Err(Error::InvalidParameter("cannot reveal a missing cell".into()));
        }
        Self::from_dense(self.taxon_names.clone(), self.trait_names.clone(), &self.values, mask)
    }

    /// Reorders rows so row `i` belongs to tip `i` of `tree`.
    pub fn align_to(&self, tree: &Phylogeny) -> Result<Self> {
        let index: HashMap<&str, usize> =
            self.taxon_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let tree_only: Vec<String> = tree
            .tip_labels()
            .iter()
            .filter(|l| !index.contains_key(l.as_str()))
            .cloned()
            .collect();
        let tips: HashMap<&str, ()> = tree.tip_labels().iter().map(|l| (l.as_str(), ())).collect();
        let table_only: Vec<String> =
            self.taxon_names.iter().filter(|l| !tips.contains_key(l.as_str())).cloned().collect();
        if !tree_only.is_empty() || !table_only.is_empty() {
            return Err(Error::Alignment { tree_only, table_only });
        }
        let q = self.n_traits();
        let order: Vec<usize> = tree.tip_labels().iter().map(|l| index[l.as_str()]).collect();
        let values = DMatrix::from_fn(order.len(), q, |i, j| self.values[(order[i], j)]);
        let mask = order.iter().flat_map(|&r| self.row_mask(r).to_vec()).collect();
        Ok(TraitMatrix {
            values,
            mask,
            taxon_names: tree.tip_labels().to_vec(),
            trait_names: self.trait_names.clone(),
        })
    }

    /// Applies per-trait transforms to observed cells, then optionally
    /// centers and scales each column to mean 0 and sample sd 1 over its
    /// observed cells.
    pub fn transform(&self, specs: &[Transform], standardize: bool) -> Result<Self> {
        let q = self.n_traits();
        if specs.len() != q && !specs.is_empty() {
            return Err(Error::DimensionMismatch(format!("{q} traits but {} transforms", specs.len())));
        }
        let mut out = self.clone();
        for j in 0..q {
            let column = self.trait_names[j].clone();
            let rows: Vec<usize> = (0..self.n_taxa()).filter(|&i| self.is_observed(i, j)).collect();
            let spec = specs.get(j).copied().unwrap_or_default();
            for &i in &rows {
                let v = self.values[(i, j)];
                out.values[(i, j)] = match spec {
                    Transform::None => v,
                    Transform::Log if v > 0.0 => v.ln(),
                    Transform::Log => {
                        return Err(Error::Domain { column, msg: format!("log of non-positive value {v}") })
                    }
                    Transform::Logit if v > 0.0 && v < 1.0 => (v / (1.0 - v)).ln(),
                    Transform::Logit => {
                        return Err(Error::Domain { column, msg: format!("logit of {v} outside (0,1)") })
                    }
                };
            }
            if standardize {
                let n = rows.len();
                if n < 2 {
                    return Err(Error::Domain { column, msg: "fewer than two observed values".into() });
                }
                let mean = rows.iter().map(|&i| out.values[(i, j)]).sum::<f64>() / n as f64;
                let var = rows.iter().map(|&i| (out.values[(i, j)] - mean).powi(2)).sum::<f64>()
                    / (n - 1) as f64;
                if var <= 0.0 {
                    return Err(Error::Domain { column, msg: "constant column cannot be standardized".into() });
                }
                let sd = var.sqrt();
                for &i in &rows {
                    out.values[(i, j)] = (out.values[(i, j)] - mean) / sd;
                }
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, writer: W, missing_token: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["taxon".to_string()];
        header.extend(self.trait_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_taxa() {
            let mut rec = vec![self.taxon_names[i].clone()];
            for j in 0..self.n_traits() {
                rec.push(match self.value(i, j) {
                    Some(v) => format!("{v}"),
                    None => missing_token.to_string(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, missing_token: &str) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f), missing_token)
    }
}

/// Reads `taxon,<trait1>,...` CSV; cells equal to `missing_token` (after
/// trimming) or empty are missing.
pub fn read_trait_csv<R: Read>(reader: R, missing_token: &str) -> Result<TraitMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Config("trait table needs a taxon column and at least one trait".into()));
    }
    let trait_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let token = missing_token.trim();
    let mut taxa = Vec::new();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        if rec.len() != header.len() {
            return Err(Error::RaggedRow { row: line, expected: header.len(), found: rec.len() });
        }
        taxa.push(rec[0].trim().to_string());
        let mut row = Vec::with_capacity(trait_names.len());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell == token {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    row: line,
                    column: trait_names[j].clone(),
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonNumeric {
                        row: line,
                        column: trait_names[j].clone(),
                        value: cell.to_string(),
                    });
                }
                row.push(Some(v));
            }
        }
        rows.push(row);
    }
    TraitMatrix::new(taxa, trait_names, rows)
}

pub fn read_trait_csv_file(path: &Path, missing_token: &str) -> Result<TraitMatrix> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trait_csv(std::io::BufReader::new(f), missing_token)
}
