//! Trainable tail: 3×3 conv, global max pooling, l2 normalization.
//!
//! Gradients are exact. Global max pooling routes each filter's gradient to
//! the first row-major argmax, so the weight gradient for one embedding is the
//! input patch at that location scaled by the pooled-value gradient.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::backbone::{conv2d, Backbone, Filters};
use crate::dataset::TimeSeries;
use crate::error::{Error, Result};
use crate::raster::{render_input, RasterStyle};
use crate::sampler::{Triplet, TripletPool};
use crate::seed;
use crate::tensor::{FeatureMaps, Real, Tensor3};
use crate::tensorio::TensorMap;

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 1;
pub const PAD: usize = 1;
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

pub const WEIGHT_NAME: &str = "head.conv.weight";
pub const BIAS_NAME: &str = "head.conv.bias";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub filters: usize,
    pub margin: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub norm_eps: f64,
}

impl HeadConfig {
    /// Defaults for a backbone with `in_channels` outputs: 4096 filters,
    /// margin 1.0, lr 0.05, batch 32, 200 epochs.
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            filters: 4096,
            margin: 1.0,
            lr: 0.05,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.filters == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "head channels, filters, batch size and epochs must be positive".into(),
            ));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be non-negative", self.margin)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive and finite", self.lr)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T = f32> {
    /// `filters × in_channels × 3 × 3`
    pub w: Filters<T>,
    pub b: Vec<T>,
}

impl<T: Real> HeadWeights<T> {
    pub fn new(w: Filters<T>, b: Vec<T>) -> Result<Self> {
        if w.kh != KERNEL || w.kw != KERNEL {
            return Err(Error::Shape(format!("head kernel must be 3x3, got {}x{}", w.kh, w.kw)));
        }
        if b.len() != w.out_channels {
            return Err(Error::Shape(format!(
                "head bias has {} values for {} filters",
                b.len(),
                w.out_channels
            )));
        }
        Ok(Self { w, b })
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(in_channels: usize, filters: usize, seed: u64) -> Self {
        let fan_in = in_channels * KERNEL * KERNEL;
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let mut rng = seed::rng(seed);
        let data = (0..filters * fan_in)
            .map(|_| T::from_f64(normal.sample(&mut rng)))
            .collect();
        Self {
            w: Filters {
                out_channels: filters,
                in_channels,
                kh: KERNEL,
                kw: KERNEL,
                data,
            },
            b: vec![T::zero(); filters],
        }
    }

    pub fn filters(&self) -> usize {
        self.w.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.w.in_channels
    }

    pub fn is_finite(&self) -> bool {
        self.w.data.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

impl HeadWeights<f32> {
    pub fn to_f64(&self) -> HeadWeights<f64> {
        HeadWeights {
            w: Filters {
                data: self.w.data.iter().map(|&v| v as f64).collect(),
                out_channels: self.w.out_channels,
                in_channels: self.w.in_channels,
                kh: self.w.kh,
                kw: self.w.kw,
            },
            b: self.b.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(WEIGHT_NAME, self.w.dims().to_vec(), self.w.data.clone())
            .expect("filter dims are consistent");
        m.insert(BIAS_NAME, vec![self.b.len()], self.b.clone())
            .expect("bias dims are consistent");
        m
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let w = map
            .get(WEIGHT_NAME)
            .ok_or_else(|| Error::MissingTensor(WEIGHT_NAME.into()))?;
        if w.dims.len() != 4 {
            return Err(Error::Shape(format!("{WEIGHT_NAME} must be rank 4, got {:?}", w.dims)));
        }
        let b = map.require(BIAS_NAME, &[w.dims[0]])?;
        Self::new(
            Filters::new(w.dims[0], w.dims[1], w.dims[2], w.dims[3], w.data.clone())?,
            b.data.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Ldvr,
    Pdvr,
}

/// Fixed-length, l2-normalized representation of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub kind: EmbeddingKind,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// What the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache<T = f32> {
    /// Flat spatial index (`row * width + col`) of each filter's maximum.
    pub argmax: Vec<usize>,
    /// Pooled vector before normalization.
    pub pooled: Vec<T>,
    /// `max(‖pooled‖, eps)`.
    pub norm: T,
    pub embedding: Vec<T>,
    pub width: usize,
}

/// Per-filter maximum and first row-major argmax.
pub fn global_max_pool<T: Real>(maps: &Tensor3<T>) -> (Vec<T>, Vec<usize>) {
    (0..maps.channels)
        .map(|c| {
            let mut best = (T::neg_infinity(), 0);
            for (i, &v) in maps.plane(c).iter().enumerate() {
                if v > best.0 {
                    best = (v, i);
                }
            }
            best
        })
        .unzip()
}

/// Returns `(x / max(‖x‖, eps), max(‖x‖, eps))`.
pub fn l2_normalize<T: Real>(x: &[T], eps: f64) -> (Vec<T>, T) {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::from_f64(eps));
    (x.iter().map(|&v| v / norm).collect(), norm)
}

/// Conv → GMP → l2. Returns the embedding with the cache for backprop.
pub fn head_forward<T: Real>(
    weights: &HeadWeights<T>,
    features: &Tensor3<T>,
    norm_eps: f64,
) -> Result<(Vec<T>, HeadCache<T>)> {
    if features.channels != weights.in_channels() {
        return Err(Error::Shape(format!(
            "head expects {} input channels, features have {}",
            weights.in_channels(),
            features.channels
        )));
    }
    let z = conv2d(features, &weights.w, Some(&weights.b), STRIDE, PAD)?;
    let (pooled, argmax) = global_max_pool(&z);
    let (embedding, norm) = l2_normalize(&pooled, norm_eps);
    Ok((
        embedding.clone(),
        HeadCache {
            argmax,
            pooled,
            norm,
            embedding,
            width: z.width,
        },
    ))
}

/// Pre-pooling activations of the head conv (the c6 maps), for inspection.
pub fn head_activations(weights: &HeadWeights<f32>, features: &FeatureMaps) -> Result<FeatureMaps> {
    if features.channels != weights.in_channels() {
        return Err(Error::Shape(format!(
            "head expects {} input channels, features have {}",
            weights.in_channels(),
            features.channels
        )));
    }
    conv2d(features, &weights.w, Some(&weights.b), STRIDE, PAD)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)`.
pub fn triplet_loss<T: Real>(a: &[T], p: &[T], n: &[T], margin: T) -> Result<T> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Shape(format!(
            "triplet dims differ: {}, {}, {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    let v = sq_dist(a, p) - sq_dist(a, n) + margin;
    // `max` would turn a NaN from overflowed embeddings into an inactive hinge.
    Ok(if v.is_nan() { v } else { v.max(T::zero()) })
}

/// Loss of three embeddings.
pub fn embedding_triplet_loss(a: &Embedding, p: &Embedding, n: &Embedding, margin: f32) -> Result<f32> {
    triplet_loss(a.as_slice(), p.as_slice(), n.as_slice(), margin)
}

/// Pulls a gradient w.r.t. the normalized vector back to the pooled vector.
fn l2_backward<T: Real>(cache: &HeadCache<T>, de: &[T], eps: T) -> Vec<T> {
    if cache.norm > eps {
        let dot: T = cache.embedding.iter().zip(de).map(|(&e, &d)| e * d).sum();
        cache
            .embedding
            .iter()
            .zip(de)
            .map(|(&e, &d)| (d - e * dot) / cache.norm)
            .collect()
    } else {
        de.iter().map(|&d| d / cache.norm).collect()
    }
}

/// Loss of a triplet and, when the hinge is active, the gradients with respect
/// to the pooled vectors of anchor, positive and negative.
pub fn pooled_gradients<T: Real>(
    caches: [&HeadCache<T>; 3],
    margin: T,
    norm_eps: f64,
) -> Result<(T, Option<[Vec<T>; 3]>)> {
    let [a, p, n] = caches.map(|c| c.embedding.as_slice());
    let loss = triplet_loss(a, p, n, margin)?;
    if loss <= T::zero() {
        return Ok((loss, None));
    }
    let two = T::from_f64(2.0);
    let de_a: Vec<T> = n.iter().zip(p).map(|(&nv, &pv)| two * (nv - pv)).collect();
    let de_p: Vec<T> = p.iter().zip(a).map(|(&pv, &av)| two * (pv - av)).collect();
    let de_n: Vec<T> = a.iter().zip(n).map(|(&av, &nv)| two * (av - nv)).collect();
    let eps = T::from_f64(norm_eps);
    Ok((
        loss,
        Some([
            l2_backward(caches[0], &de_a, eps),
            l2_backward(caches[1], &de_p, eps),
            l2_backward(caches[2], &de_n, eps),
        ]),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients<T = f32> {
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

impl<T: Real> HeadGradients<T> {
    pub fn zeros_like(weights: &HeadWeights<T>) -> Self {
        Self {
            dw: vec![T::zero(); weights.w.data.len()],
            db: vec![T::zero(); weights.b.len()],
        }
    }
}

/// Adds `dpooled[f] · patch(argmax_f)` into the weight gradient of each filter.
fn accumulate_patches<T: Real>(
    grads: &mut HeadGradients<T>,
    features: &Tensor3<T>,
    cache: &HeadCache<T>,
    dpooled: &[T],
) {
    let (c, h, w) = features.shape();
    let fan_in = c * KERNEL * KERNEL;
    let mut patch = vec![T::zero(); fan_in];
    for (f, &g) in dpooled.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        grads.db[f] = grads.db[f] + g;
        let (oy, ox) = (cache.argmax[f] / cache.width, cache.argmax[f] % cache.width);
        for ci in 0..c {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let iy = (oy + ky) as isize - PAD as isize;
                    let ix = (ox + kx) as isize - PAD as isize;
                    patch[(ci * KERNEL + ky) * KERNEL + kx] =
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            features.get(ci, iy as usize, ix as usize)
                        } else {
                            T::zero()
                        };
                }
            }
        }
        let row = &mut grads.dw[f * fan_in..(f + 1) * fan_in];
        for (d, &x) in row.iter_mut().zip(&patch) {
            *d = *d + g * x;
        }
    }
}

/// Exact gradient of the triplet loss with respect to the head parameters.
pub fn head_backward<T: Real>(
    weights: &HeadWeights<T>,
    caches: [&HeadCache<T>; 3],
    features: [&Tensor3<T>; 3],
    margin: T,
    norm_eps: f64,
) -> Result<HeadGradients<T>> {
    let d = weights.filters();
    for (cache, feat) in caches.iter().zip(&features) {
        if cache.argmax.len() != d || cache.pooled.len() != d {
            return Err(Error::Shape(format!(
                "cache has {} filters, weights have {d}",
                cache.argmax.len()
            )));
        }
        if feat.channels != weights.in_channels() || cache.width != feat.width {
            return Err(Error::Shape("cache does not match features".into()));
        }
    }
    let mut grads = HeadGradients::zeros_like(weights);
    if let (_, Some(dpooled)) = pooled_gradients(caches, margin, norm_eps)? {
        for i in 0..3 {
            accumulate_patches(&mut grads, features[i], caches[i], &dpooled[i]);
        }
    }
    Ok(grads)
}

/// Supplies cached backbone features by pool index.
pub trait FeatureProvider: Sync {
    fn features(&self, entry: usize) -> Option<&FeatureMaps>;
}

impl FeatureProvider for [FeatureMaps] {
    fn features(&self, entry: usize) -> Option<&FeatureMaps> {
        self.get(entry)
    }
}

impl FeatureProvider for Vec<FeatureMaps> {
    fn features(&self, entry: usize) -> Option<&FeatureMaps> {
        self.get(entry)
    }
}

struct TripletEval {
    loss: f32,
    dpooled: Option<[Vec<f32>; 3]>,
    caches: [HeadCache<f32>; 3],
}

fn eval_triplet(
    weights: &HeadWeights<f32>,
    t: &Triplet,
    provider: &(impl FeatureProvider + ?Sized),
    margin: f32,
    norm_eps: f64,
) -> Result<TripletEval> {
    let fwd = |i: usize| -> Result<HeadCache<f32>> {
        let f = provider.features(i).ok_or(Error::UnresolvedReference(i))?;
        Ok(head_forward(weights, f, norm_eps)?.1)
    };
    let caches = [fwd(t.anchor)?, fwd(t.positive)?, fwd(t.negative)?];
    let (loss, dpooled) = pooled_gradients([&caches[0], &caches[1], &caches[2]], margin, norm_eps)?;
    Ok(TripletEval { loss, dpooled, caches })
}

/// One SGD update on `batch`: mean gradient over the active triplets, then
/// `w ← w − lr·dw`. Returns the batch's mean loss (before the update).
///
/// Triplets are evaluated in parallel and reduced in batch order, so the
/// result does not depend on the thread count.
pub fn sgd_step(
    weights: &mut HeadWeights<f32>,
    batch: &[Triplet],
    provider: &(impl FeatureProvider + ?Sized),
    margin: f32,
    lr: f32,
    norm_eps: f64,
) -> Result<f32> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let evals: Vec<TripletEval> = batch
        .par_iter()
        .map(|t| eval_triplet(weights, t, provider, margin, norm_eps))
        .collect::<Result<_>>()?;

    let mut grads = HeadGradients::zeros_like(weights);
    let mut active = 0usize;
    let mut loss_sum = 0f64;
    for (t, ev) in batch.iter().zip(&evals) {
        loss_sum += ev.loss as f64;
        if let Some(dp) = &ev.dpooled {
            active += 1;
            for (k, &entry) in [t.anchor, t.positive, t.negative].iter().enumerate() {
                let f = provider.features(entry).ok_or(Error::UnresolvedReference(entry))?;
                accumulate_patches(&mut grads, f, &ev.caches[k], &dp[k]);
            }
        }
    }
    if active > 0 {
        let scale = lr / active as f32;
        for (w, g) in weights.w.data.iter_mut().zip(&grads.dw) {
            *w -= scale * g;
        }
        for (b, g) in weights.b.iter_mut().zip(&grads.db) {
            *b -= scale * g;
        }
    }
    Ok((loss_sum / batch.len() as f64) as f32)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: HeadWeights<f32>,
    /// Mean triplet loss per epoch.
    pub loss_history: Vec<f32>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(self.loss_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Initial weights used by [`train_head`] for `config`.
pub fn initial_weights(config: &HeadConfig) -> HeadWeights<f32> {
    HeadWeights::init(
        config.in_channels,
        config.filters,
        seed::derive_seed(config.seed, "head.init"),
    )
}

/// Mini-batch SGD over the triplet pool with a seeded shuffle per epoch.
pub fn train_head(
    config: &HeadConfig,
    triplets: &TripletPool,
    provider: &(impl FeatureProvider + ?Sized),
) -> Result<TrainOutcome> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::Pool("no triplets to train on".into()));
    }
    for t in &triplets.triplets {
        for i in [t.anchor, t.positive, t.negative] {
            if provider.features(i).is_none() {
                return Err(Error::UnresolvedReference(i));
            }
        }
    }
    let mut weights = initial_weights(config);
    let mut rng = seed::rng(seed::derive_seed(config.seed, "head.shuffle"));
    let mut order = triplets.triplets.clone();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let mean = sgd_step(&mut weights, batch, provider, config.margin, config.lr, config.norm_eps)?;
            loss_sum += mean as f64 * batch.len() as f64;
            if !weights.is_finite() || !mean.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi,
                });
            }
        }
        loss_history.push((loss_sum / order.len() as f64) as f32);
    }
    Ok(TrainOutcome {
        weights,
        loss_history,
    })
}

/// Head embedding of precomputed backbone features.
pub fn ldvr_from_features(weights: &HeadWeights<f32>, features: &FeatureMaps, norm_eps: f64) -> Result<Embedding> {
    let (vector, _) = head_forward(weights, features, norm_eps)?;
    Ok(Embedding {
        vector,
        kind: EmbeddingKind::Ldvr,
    })
}

/// Global max pooling and l2 normalization of backbone features.
pub fn pdvr_from_features(features: &FeatureMaps, norm_eps: f64) -> Embedding {
    let (pooled, _) = global_max_pool(features);
    Embedding {
        vector: l2_normalize(&pooled, norm_eps).0,
        kind: EmbeddingKind::Pdvr,
    }
}

/// Backbone features of a series under `style`.
pub fn extract_features(backbone: &Backbone, series: &TimeSeries, style: &RasterStyle) -> Result<FeatureMaps> {
    backbone.forward_c5(&render_input(series, style)?)
}

pub fn embed_ldvr(
    backbone: &Backbone,
    weights: &HeadWeights<f32>,
    series: &TimeSeries,
    style: &RasterStyle,
) -> Result<Embedding> {
    ldvr_from_features(weights, &extract_features(backbone, series, style)?, DEFAULT_NORM_EPS)
}

pub fn embed_pdvr(backbone: &Backbone, series: &TimeSeries, style: &RasterStyle) -> Result<Embedding> {
    Ok(pdvr_from_features(
        &extract_features(backbone, series, style)?,
        DEFAULT_NORM_EPS,
    ))
}
