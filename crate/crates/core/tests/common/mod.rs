//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use tsvr_core::backbone::{BatchNorm, Filters};
use tsvr_core::Tensor3;

pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor3<f32> {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor3::from_vec(c, h, w, data).unwrap()
}

pub fn random_filters(rng: &mut impl Rng, o: usize, c: usize, k: usize) -> Filters<f32> {
    let data = (0..o * c * k * k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Filters::new(o, c, k, k, data).unwrap()
}

/// Direct six-loop cross-correlation in f64.
pub fn conv_oracle(
    x: &Tensor3<f32>,
    f: &Filters<f32>,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> (usize, usize, Vec<f64>) {
    let (c, h, w) = x.shape();
    let oh = (h + 2 * pad - f.kh) / stride + 1;
    let ow = (w + 2 * pad - f.kw) / stride + 1;
    let mut out = vec![0f64; f.out_channels * oh * ow];
    for o in 0..f.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[o] as f64);
                for ci in 0..c {
                    for ky in 0..f.kh {
                        for kx in 0..f.kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = f.data[((o * c + ci) * f.kh + ky) * f.kw + kx] as f64;
                            s += wv * x.get(ci, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    (oh, ow, out)
}

pub fn bn_oracle(x: &Tensor3<f32>, bn: &BatchNorm) -> Vec<f64> {
    let plane = x.height * x.width;
    x.data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            bn.gamma[c] as f64 * (v as f64 - bn.mean[c] as f64) / (bn.var[c] as f64 + bn.eps as f64).sqrt()
                + bn.beta[c] as f64
        })
        .collect()
}

/// Window maximum over in-bounds cells only.
pub fn maxpool_oracle(x: &Tensor3<f32>, k: usize, stride: usize, pad: usize) -> (usize, usize, Vec<f64>) {
    let (c, h, w) = x.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cells = Vec::new();
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            cells.push(x.get(ci, iy as usize, ix as usize) as f64);
                        }
                    }
                }
                out.push(cells.into_iter().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    (oh, ow, out)
}

/// `max|a − b| / max|b|`, with the denominator floored at 1.
pub fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(1f64, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Entropy-based NMI computed from explicit label counting.
pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let count = |pred: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| pred(i)).count() as f64;
    let uniq = |v: &[usize]| {
        let mut u = v.to_vec();
        u.sort_unstable();
        u.dedup();
        u
    };
    let (ua, ub) = (uniq(a), uniq(b));
    let h = |u: &[usize], v: &[usize]| -> f64 {
        u.iter()
            .map(|&x| {
                let p = count(&|i| v[i] == x) / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (h(&ua, a), h(&ub, b));
    let mut mi = 0.0;
    for &x in &ua {
        for &y in &ub {
            let pxy = count(&|i| a[i] == x && b[i] == y) / n;
            if pxy > 0.0 {
                let px = count(&|i| a[i] == x) / n;
                let py = count(&|i| b[i] == y) / n;
                mi += pxy * (pxy / (px * py)).ln();
            }
        }
    }
    match (ha == 0.0, hb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => mi / (ha * hb).sqrt(),
    }
}

/// Fraction of agreeing pairs, by enumerating every pair.
pub fn rand_index_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

/// Competition ranks by sorting (descending, ties share the best rank),
/// averaged over rows.
pub fn ranks_oracle(values: &[Vec<f64>], methods: usize) -> Vec<f64> {
    let mut sum = vec![0f64; methods];
    for row in values {
        let mut sorted = row.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (m, v) in row.iter().enumerate() {
            let first = sorted.iter().position(|s| s == v).unwrap();
            sum[m] += (first + 1) as f64;
        }
    }
    sum.iter().map(|s| s / values.len() as f64).collect()
}

/// Smallest within-cluster sum of squares over every 2-partition.
pub fn best_two_partition(points: &[[f64; 2]]) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut best = (f64::INFINITY, vec![]);
    // Fixing point 0 in cluster 0 halves the search without losing a partition.
    for mask in 0u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        if labels.iter().all(|&l| l == 0) {
            continue;
        }
        let mut cost = 0.0;
        for k in 0..2 {
            let members: Vec<&[f64; 2]> = points.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            let m = members.len() as f64;
            let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
            let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
            cost += members.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>();
        }
        if cost < best.0 {
            best = (cost, labels);
        }
    }
    best
}

/// Two partitions are the same up to label renaming.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}
