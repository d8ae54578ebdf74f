//! Partition agreement scores and cross-method rank aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Counts of points per (truth, predicted) cluster pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    /// Rows are distinct `truth` labels in ascending order, columns likewise for `pred`.
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "label vectors differ in length: {} vs {}",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Shape("empty label vectors".into()));
        }
        let index = |labels: &[usize]| -> BTreeMap<usize, usize> {
            let mut m: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
            for (i, v) in m.values_mut().enumerate() {
                *v = i;
            }
            m
        };
        let (ri, ci) = (index(truth), index(pred));
        let mut counts = vec![vec![0u64; ci.len()]; ri.len()];
        for (t, p) in truth.iter().zip(pred) {
            counts[ri[t]][ci[p]] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..ci.len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: truth.len() as u64,
        })
    }

    fn entropy(marginals: &[u64], n: f64) -> f64 {
        marginals
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    pub fn row_entropy(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n as f64)
    }

    pub fn col_entropy(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n as f64)
    }

    /// Mutual information in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let c = c as f64;
                mi += c / n * (n * c / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
            }
        }
        mi.max(0.0)
    }
}

/// How mutual information is normalized by the two entropies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNorm {
    /// `sqrt(H(U)·H(V))`
    #[default]
    Geometric,
    Arithmetic,
    Min,
    Max,
}

impl std::str::FromStr for NmiNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" | "sqrt" => Ok(Self::Geometric),
            "arithmetic" => Ok(Self::Arithmetic),
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown NMI normalization {other:?}"))),
        }
    }
}

/// Normalized mutual information with the default geometric normalization.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    nmi_with(truth, pred, NmiNorm::Geometric)
}

/// Two single-cluster partitions score 1; a single-cluster partition against
/// a split one scores 0.
pub fn nmi_with(truth: &[usize], pred: &[usize], norm: NmiNorm) -> Result<f64> {
    let t = ContingencyTable::new(truth, pred)?;
    let (hu, hv) = (t.row_entropy(), t.col_entropy());
    if hu == 0.0 && hv == 0.0 {
        return Ok(1.0);
    }
    if hu == 0.0 || hv == 0.0 {
        return Ok(0.0);
    }
    let denom = match norm {
        NmiNorm::Geometric => (hu * hv).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (hu + hv),
        NmiNorm::Min => hu.min(hv),
        NmiNorm::Max => hu.max(hv),
    };
    Ok((t.mutual_information() / denom).clamp(0.0, 1.0))
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Fraction of point pairs on which the partitions agree.
pub fn rand_index(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() < 2 && truth.len() == pred.len() {
        return Err(Error::Shape("rand index needs at least two points".into()));
    }
    let t = ContingencyTable::new(truth, pred)?;
    let total = pairs(t.n);
    let same_both: u128 = t.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let same_truth: u128 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let same_pred: u128 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    // Agreeing pairs: together in both, or apart in both.
    let agree = total + 2 * same_both - same_truth - same_pred;
    Ok(agree as f64 / total as f64)
}

/// Scores with datasets as rows and methods as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    /// `values[dataset][method]`
    pub values: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(datasets: Vec<String>, methods: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self {
            datasets,
            methods,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.datasets.len() || self.values.iter().any(|r| r.len() != self.methods.len()) {
            return Err(Error::Shape("score table is not rectangular".into()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score table cell".into()));
        }
        Ok(())
    }

    /// Sets (or adds) the column for `method`. Datasets must already be rows,
    /// unless the table is empty, in which case the rows are created.
    pub fn set_column(&mut self, method: &str, scores: &[(String, f64)]) -> Result<()> {
        if self.methods.is_empty() && self.datasets.is_empty() {
            self.datasets = scores.iter().map(|(d, _)| d.clone()).collect();
            self.values = vec![Vec::new(); self.datasets.len()];
        }
        if scores.len() != self.datasets.len() {
            return Err(Error::Shape(format!(
                "column {method} has {} scores for {} datasets",
                scores.len(),
                self.datasets.len()
            )));
        }
        let rows = scores
            .iter()
            .map(|(name, _)| {
                self.datasets
                    .iter()
                    .position(|d| d == name)
                    .ok_or_else(|| Error::Shape(format!("dataset {name} not in score table")))
            })
            .collect::<Result<Vec<_>>>()?;
        let col = match self.methods.iter().position(|m| m == method) {
            Some(c) => c,
            None => {
                self.methods.push(method.to_string());
                for row in &mut self.values {
                    row.push(0.0);
                }
                self.methods.len() - 1
            }
        };
        for (row, (_, v)) in rows.into_iter().zip(scores) {
            self.values[row][col] = *v;
        }
        Ok(())
    }

    /// Header `dataset,<methods…>`, one row per dataset.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset");
        for m in &self.methods {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (d, row) in self.datasets.iter().zip(&self.values) {
            s.push_str(d);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("score table CSV is empty".into()))?;
        let methods: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut datasets = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut f = line.split(',');
            datasets.push(f.next().unwrap_or_default().trim().to_string());
            let row = f
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("score table row {}: bad value {v:?}", i + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(datasets, methods, values)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Ranks one row: 1 for the best (highest) score; tied scores share the
/// smallest rank of their group.
pub fn rank_row(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .map(|&s| 1 + scores.iter().filter(|&&o| o > s).count())
        .collect()
}

/// Mean per-dataset rank of each method.
pub fn cumulative_ranks(table: &ScoreTable) -> Result<Vec<(String, f64)>> {
    table.validate()?;
    if table.datasets.is_empty() {
        return Err(Error::Shape("score table has no datasets".into()));
    }
    let mut totals = vec![0usize; table.methods.len()];
    for row in &table.values {
        for (t, r) in totals.iter_mut().zip(rank_row(row)) {
            *t += r;
        }
    }
    let n = table.datasets.len() as f64;
    Ok(table
        .methods
        .iter()
        .cloned()
        .zip(totals.into_iter().map(|t| t as f64 / n))
        .collect())
}
