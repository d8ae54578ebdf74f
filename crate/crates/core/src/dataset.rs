//! UCR-format ingestion, circular shifts and the triplet-selection pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// A univariate series with optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f32>,
    pub label: Option<u32>,
    pub dataset_id: String,
    pub sample_id: usize,
}

impl TimeSeries {
    /// Builds an unlabeled series, validating length and finiteness.
    pub fn new(values: Vec<f32>, dataset_id: impl Into<String>, sample_id: usize) -> Result<Self> {
        let ts = Self {
            values,
            label: None,
            dataset_id: dataset_id.into(),
            sample_id,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::InvalidSeries(format!(
                "{}#{} has length {}, need at least 2",
                self.dataset_id,
                self.sample_id,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{}#{} value {i}",
                self.dataset_id, self.sample_id
            )));
        }
        Ok(())
    }

    /// Returns a z-normalized copy (zero mean, unit population variance).
    /// Constant series map to all zeros.
    pub fn z_normalized(&self) -> Self {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        let values = self
            .values
            .iter()
            .map(|&v| if sd > 0.0 { ((v as f64 - mean) / sd) as f32 } else { 0.0 })
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

/// A named UCR dataset with its train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
    pub num_classes: usize,
    pub length: usize,
}

impl Dataset {
    /// Assembles a dataset from already-labelled series, checking the
    /// equal-length and class-count invariants.
    pub fn from_parts(
        name: impl Into<String>,
        train: Vec<TimeSeries>,
        test: Vec<TimeSeries>,
    ) -> Result<Self> {
        let name = name.into();
        let length = train
            .first()
            .or(test.first())
            .map(TimeSeries::len)
            .ok_or_else(|| Error::InvalidSeries(format!("dataset {name} has no series")))?;
        let mut labels = BTreeSet::new();
        for s in train.iter().chain(&test) {
            s.validate()?;
            if s.len() != length {
                return Err(Error::InvalidSeries(format!(
                    "dataset {name}: sample {} has length {}, expected {length}",
                    s.sample_id,
                    s.len()
                )));
            }
            if let Some(l) = s.label {
                labels.insert(l);
            }
        }
        Ok(Self {
            name,
            train,
            test,
            num_classes: labels.len().max(1),
            length,
        })
    }

    pub fn all_series(&self) -> impl Iterator<Item = &TimeSeries> {
        self.train.iter().chain(&self.test)
    }

    /// Writes the dataset back out in tab-separated UCR layout.
    pub fn write_ucr(&self, train_path: &Path, test_path: &Path) -> Result<()> {
        write_ucr_file(train_path, &self.train)?;
        write_ucr_file(test_path, &self.test)
    }
}

fn write_ucr_file(path: &Path, series: &[TimeSeries]) -> Result<()> {
    let mut out = Vec::new();
    for s in series {
        write!(out, "{}", s.label.unwrap_or(0)).expect("write to vec");
        for v in &s.values {
            write!(out, "\t{v}").expect("write to vec");
        }
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct RawRecord {
    line: usize,
    label: f64,
    values: Vec<f32>,
}

fn parse_ucr_file(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut delimiter = None;
    let mut records: Vec<RawRecord> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert(if line.contains('\t') { '\t' } else { ',' });
        let mut fields = line.split(delim).map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label: f64 = label_field
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric label {label_field:?}")))?;
        if !label.is_finite() || label.fract() != 0.0 {
            return Err(parse_err(line_no, format!("label {label_field:?} is not integer-like")));
        }
        let values = fields
            .enumerate()
            .map(|(j, f)| {
                let v: f32 = f
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("non-numeric field {} ({f:?})", j + 2)))?;
                if !v.is_finite() {
                    return Err(parse_err(line_no, format!("non-finite field {} ({f:?})", j + 2)));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() < 2 {
            return Err(parse_err(
                line_no,
                format!("record has {} values, need at least 2", values.len()),
            ));
        }
        if let Some(first) = records.first() {
            if first.values.len() != values.len() {
                return Err(Error::RaggedLength {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected: first.values.len(),
                    found: values.len(),
                });
            }
        }
        records.push(RawRecord {
            line: line_no,
            label,
            values,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(records)
}

/// Loads a UCR train/test pair. Labels are remapped to `0..num_classes` in
/// ascending order of their original value across both files.
pub fn load_ucr_dataset(train_path: &Path, test_path: &Path, name: &str) -> Result<Dataset> {
    let train = parse_ucr_file(train_path)?;
    let test = parse_ucr_file(test_path)?;

    let expected = train[0].values.len();
    if let Some(r) = test.iter().find(|r| r.values.len() != expected) {
        return Err(Error::RaggedLength {
            path: test_path.to_path_buf(),
            line: r.line,
            expected,
            found: r.values.len(),
        });
    }

    // Labels are integer-like, so the i64 conversion is exact.
    let mut remap = BTreeMap::new();
    for r in train.iter().chain(&test) {
        remap.entry(r.label as i64).or_insert(0u32);
    }
    for (i, v) in remap.values_mut().enumerate() {
        *v = i as u32;
    }

    let n_train = train.len();
    let to_series = |(i, r): (usize, RawRecord)| TimeSeries {
        values: r.values,
        label: Some(remap[&(r.label as i64)]),
        dataset_id: name.to_string(),
        sample_id: i,
    };
    let train: Vec<_> = train.into_iter().enumerate().map(to_series).collect();
    let test: Vec<_> = test
        .into_iter()
        .enumerate()
        .map(|(i, r)| to_series((n_train + i, r)))
        .collect();

    Ok(Dataset {
        name: name.to_string(),
        train,
        test,
        num_classes: remap.len(),
        length: expected,
    })
}

/// Right rotation: `out[t] = input[(t - steps) mod L]`.
pub fn circular_shift(series: &TimeSeries, steps: usize) -> TimeSeries {
    let mut values = series.values.clone();
    if !values.is_empty() {
        let s = steps % values.len();
        values.rotate_right(s);
    }
    TimeSeries {
        values,
        ..series.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Original,
    Shifted,
}

/// Identifies a source series by dataset and sample id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub dataset_id: String,
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub series: TimeSeries,
    pub origin: Origin,
    pub shift_steps: usize,
    pub parent_sample: Option<SampleRef>,
}

impl PoolEntry {
    pub fn sample_ref(&self) -> SampleRef {
        SampleRef {
            dataset_id: self.series.dataset_id.clone(),
            sample_id: self.series.sample_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolParams {
    pub samples_per_dataset: usize,
    pub shifts_per_sample: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub seed: u64,
}

impl Default for PoolParams {
    fn default() -> Self {
        Self {
            samples_per_dataset: 100,
            shifts_per_sample: 10,
            eps_low: 0.6,
            eps_high: 1.0,
            seed: 0,
        }
    }
}

/// Entry counts of a pool, split by origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCounts {
    pub originals: usize,
    pub shifted: usize,
}

impl PoolCounts {
    pub fn of(pool: &[PoolEntry]) -> Self {
        let originals = pool.iter().filter(|e| e.origin == Origin::Original).count();
        Self {
            originals,
            shifted: pool.len() - originals,
        }
    }

    pub fn total(&self) -> usize {
        self.originals + self.shifted
    }
}

/// Redraws of ε allowed before a shift range is declared degenerate.
const MAX_SHIFT_REDRAWS: usize = 1000;

/// Number of training samples drawn from a dataset with `available` series.
pub fn samples_taken(available: usize, requested: usize) -> usize {
    if available >= requested {
        requested
    } else {
        (available * 3).div_ceil(5)
    }
}

/// Builds the triplet-selection pool: per dataset, a uniform sample of train
/// series, each followed by its circularly shifted variants.
///
/// Shift sizes are `round(ε·L)` with ε drawn per shift; draws that land on a
/// multiple of `L` (a null rotation) are rejected and redrawn.
pub fn build_pool(datasets: &[Dataset], params: &PoolParams) -> Result<Vec<PoolEntry>> {
    let PoolParams {
        samples_per_dataset,
        shifts_per_sample,
        eps_low,
        eps_high,
        seed,
    } = *params;
    if datasets.is_empty() {
        return Err(Error::Pool("no datasets given".into()));
    }
    if !(eps_low > 0.0 && eps_low <= eps_high && eps_high <= 1.0) {
        return Err(Error::Pool(format!(
            "eps range [{eps_low}, {eps_high}] must satisfy 0 < low <= high <= 1"
        )));
    }
    if samples_per_dataset == 0 || shifts_per_sample == 0 {
        return Err(Error::Pool("samples and shifts per sample must be positive".into()));
    }

    let mut rng = seed::rng(seed);
    let mut pool = Vec::new();
    for ds in datasets {
        if ds.train.is_empty() {
            return Err(Error::Pool(format!("dataset {} has no training series", ds.name)));
        }
        let take = samples_taken(ds.train.len(), samples_per_dataset);
        let mut chosen = index::sample(&mut rng, ds.train.len(), take).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let series = &ds.train[i];
            let len = series.len();
            pool.push(PoolEntry {
                series: series.clone(),
                origin: Origin::Original,
                shift_steps: 0,
                parent_sample: None,
            });
            let parent = SampleRef {
                dataset_id: series.dataset_id.clone(),
                sample_id: series.sample_id,
            };
            for _ in 0..shifts_per_sample {
                let steps = draw_shift(&mut rng, len, eps_low, eps_high).ok_or_else(|| {
                    Error::Pool(format!(
                        "eps range [{eps_low}, {eps_high}] only yields null shifts for length {len}"
                    ))
                })?;
                pool.push(PoolEntry {
                    series: circular_shift(series, steps),
                    origin: Origin::Shifted,
                    shift_steps: steps,
                    parent_sample: Some(parent.clone()),
                });
            }
        }
    }
    Ok(pool)
}

fn draw_shift(rng: &mut impl Rng, len: usize, low: f64, high: f64) -> Option<usize> {
    for _ in 0..MAX_SHIFT_REDRAWS {
        let eps = if low == high { low } else { rng.random_range(low..=high) };
        let steps = (eps * len as f64).round() as usize;
        if steps % len != 0 {
            return Some(steps);
        }
    }
    None
}
