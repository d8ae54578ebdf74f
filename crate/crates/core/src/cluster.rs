//! k-means (k-means++ seeding, Lloyd iterations, best of several restarts).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl Assignment {
    /// `point_index,cluster` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("point_index,cluster\n");
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One Lloyd run from fixed initial centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydRun {
    pub assignment: Assignment,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn to_rows<P: AsRef<[f32]>>(points: &[P]) -> Result<(Vec<Vec<f64>>, usize)> {
    let d = points.first().map_or(0, |p| p.as_ref().len());
    let mut rows = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != d {
            return Err(Error::Shape(format!("point {i} has dim {}, expected {d}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        rows.push(p.iter().map(|&v| v as f64).collect());
    }
    Ok((rows, d))
}

/// `Σᵢ ‖xᵢ − c_{labelᵢ}‖²`.
pub fn inertia<P: AsRef<[f32]>>(points: &[P], labels: &[usize], centroids: &[Vec<f64>]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, &l)) in points.iter().zip(labels).enumerate() {
        let c = centroids
            .get(l)
            .ok_or_else(|| Error::Shape(format!("label {l} of point {i} has no centroid")))?;
        let p = p.as_ref();
        if c.len() != p.len() {
            return Err(Error::Shape(format!("centroid {l} dim differs from point {i}")));
        }
        total += p.iter().zip(c).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>();
    }
    Ok(total)
}

fn kmeans_plus_plus(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            rng.random_range(0..n)
        };
        centroids.push(rows[next].clone());
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

fn assign(rows: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (r, l) in rows.iter().zip(labels.iter_mut()) {
        let (best, dist) = centroids
            .iter()
            .enumerate()
            .map(|(j, c)| (j, sq_dist(r, c)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *l = best;
        total += dist;
    }
    total
}

/// Recomputes means; each empty cluster takes the point farthest from its
/// current centroid (which is then reassigned). Returns the largest centroid
/// displacement.
fn update(rows: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) -> f64 {
    let k = centroids.len();
    let d = rows[0].len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let far = rows
            .iter()
            .enumerate()
            .filter(|&(i, _)| counts[labels[i]] > 1)
            .map(|(i, r)| (i, sq_dist(r, &centroids[labels[i]])))
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((i, _)) = far {
            counts[labels[i]] -= 1;
            labels[i] = j;
            counts[j] = 1;
        }
    }
    let mut sums = vec![vec![0.0; d]; k];
    for (r, &l) in rows.iter().zip(labels.iter()) {
        for (s, v) in sums[l].iter_mut().zip(r) {
            *s += v;
        }
    }
    let mut shift: f64 = 0.0;
    for (j, s) in sums.into_iter().enumerate() {
        if counts[j] == 0 {
            continue;
        }
        let mean: Vec<f64> = s.into_iter().map(|v| v / counts[j] as f64).collect();
        shift = shift.max(sq_dist(&mean, &centroids[j]).sqrt());
        centroids[j] = mean;
    }
    shift
}

/// Lloyd iterations from `init` until the largest centroid move is below
/// `tol` or `max_iters` is reached.
pub fn lloyd<P: AsRef<[f32]>>(points: &[P], init: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> Result<LloydRun> {
    let (rows, d) = to_rows(points)?;
    if init.is_empty() || init.iter().any(|c| c.len() != d) {
        return Err(Error::Shape("initial centroids do not match point dims".into()));
    }
    if rows.len() < init.len() {
        return Err(Error::Config(format!("k = {} exceeds {} points", init.len(), rows.len())));
    }
    Ok(lloyd_rows(&rows, init, max_iters, tol))
}

fn lloyd_rows(rows: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> LloydRun {
    let mut labels = vec![0usize; rows.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        trace.push(assign(rows, &centroids, &mut labels));
        iterations += 1;
        let shift = update(rows, &mut labels, &mut centroids);
        if shift < tol {
            break;
        }
    }
    let inertia = assign(rows, &centroids, &mut labels);
    trace.push(inertia);
    LloydRun {
        assignment: Assignment {
            labels,
            centroids,
            inertia,
        },
        inertia_trace: trace,
        iterations,
    }
}

/// Best-inertia result over `config.restarts` k-means++ initializations.
/// Ties keep the earliest restart.
pub fn kmeans<P: AsRef<[f32]>>(points: &[P], config: &ClusterConfig) -> Result<Assignment> {
    let (rows, _) = to_rows(points)?;
    let n = rows.len();
    if config.k == 0 || config.restarts == 0 || config.max_iters == 0 {
        return Err(Error::Config("k, restarts and max_iters must be positive".into()));
    }
    if n < config.k {
        return Err(Error::Config(format!("k = {} exceeds {n} points", config.k)));
    }
    let mut rng = seed::rng(config.seed);
    let mut best: Option<Assignment> = None;
    for _ in 0..config.restarts {
        let init = kmeans_plus_plus(&rows, config.k, &mut rng);
        let run = lloyd_rows(&rows, init, config.max_iters, config.tol);
        if best.as_ref().is_none_or(|b| run.assignment.inertia < b.inertia) {
            best = Some(run.assignment);
        }
    }
    Ok(best.expect("at least one restart"))
}
