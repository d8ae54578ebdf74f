//! Two-class Gaussian-bump corpus with random circular placement.
//!
//! Class 0 holds one bump; class 1 holds two bumps a fixed gap apart. Every
//! series is placed at a uniformly random circular offset and gets additive
//! Gaussian noise, so the classes differ in shape but not in position.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use rayon::prelude::*;

use crate::backbone::tiny_backbone;
use crate::cluster::{kmeans, ClusterConfig};
use crate::dataset::{build_pool, Dataset, PoolParams, TimeSeries};
use crate::error::Result;
use crate::head::{self, HeadConfig};
use crate::metrics::nmi;
use crate::raster::RasterStyle;
use crate::sampler::{make_triplets, NegativeScope};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpCorpus {
    pub length: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Peak height of each bump.
    pub amplitude: f64,
    pub noise_sd: f64,
    /// Bump standard deviation as a fraction of the length.
    pub width: f64,
    /// Distance between the two class-1 bumps as a fraction of the length.
    pub gap: f64,
    pub seed: u64,
}

impl Default for BumpCorpus {
    fn default() -> Self {
        Self {
            length: 128,
            train_per_class: 40,
            test_per_class: 20,
            amplitude: 10.0,
            noise_sd: 0.05,
            width: 1.0 / 32.0,
            gap: 0.1,
            seed: 0,
        }
    }
}

fn circular_gauss(t: usize, centre: f64, sd: f64, len: usize) -> f64 {
    let l = len as f64;
    let mut d = (t as f64 - centre).rem_euclid(l);
    if d > l / 2.0 {
        d = l - d;
    }
    (-(d * d) / (2.0 * sd * sd)).exp()
}

impl BumpCorpus {
    pub fn series(&self, class: u32, rng: &mut impl Rng) -> Vec<f32> {
        let len = self.length;
        let sd = self.width * len as f64;
        let offset = rng.random_range(0.0..len as f64);
        let noise = Normal::new(0.0, self.noise_sd).expect("noise sd is non-negative");
        (0..len)
            .map(|t| {
                let mut v = circular_gauss(t, offset, sd, len);
                if class == 1 {
                    v += circular_gauss(t, offset + self.gap * len as f64, sd, len);
                }
                (self.amplitude * v + noise.sample(rng)) as f32
            })
            .collect()
    }

    /// Builds the dataset with classes interleaved in both splits.
    pub fn dataset(&self, name: &str) -> Result<Dataset> {
        let mut rng = seed::rng(self.seed);
        let mut make = |count: usize, start: usize| -> Result<Vec<TimeSeries>> {
            (0..2 * count)
                .map(|i| {
                    let class = (i % 2) as u32;
                    Ok(TimeSeries::new(self.series(class, &mut rng), name, start + i)?.with_label(class))
                })
                .collect()
        };
        let train = make(self.train_per_class, 0)?;
        let test = make(self.test_per_class, 2 * self.train_per_class)?;
        Dataset::from_parts(name, train, test)
    }
}

/// Scaled-down shift-learning run on a [`BumpCorpus`]: train the head on
/// the train split's circular-shift triplets, then cluster the test split
/// with LDVR, PDVR and raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftExperiment {
    pub corpus: BumpCorpus,
    pub style: RasterStyle,
    pub filters: usize,
    pub margin: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub triplets_per_anchor: usize,
    pub pool: PoolParams,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ShiftExperiment {
    fn default() -> Self {
        Self {
            corpus: BumpCorpus::default(),
            style: RasterStyle {
                line_thickness: 3,
                ..RasterStyle::with_size(160, 120)
            },
            filters: 64,
            margin: 1.0,
            lr: 0.05,
            epochs: 50,
            batch_size: 32,
            triplets_per_anchor: 30,
            pool: PoolParams::default(),
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub loss_history: Vec<f32>,
    pub nmi_ldvr: f64,
    pub nmi_pdvr: f64,
    pub nmi_ed: f64,
    pub pool_size: usize,
    pub triplets: usize,
    /// Test-split labels and embeddings, in series order.
    pub test_labels: Vec<usize>,
    pub ldvr: Vec<Vec<f32>>,
    pub pdvr: Vec<Vec<f32>>,
}

impl ShiftExperiment {
    pub fn run(&self) -> Result<ShiftReport> {
        let s = |m: &str| seed::derive_seed(self.seed, m);
        let corpus = BumpCorpus {
            seed: s("corpus"),
            ..self.corpus
        };
        let ds = corpus.dataset("bumps")?;
        let backbone = tiny_backbone(s("backbone"));

        let pool = build_pool(
            std::slice::from_ref(&ds),
            &PoolParams {
                seed: s("pool"),
                ..self.pool
            },
        )?;
        let triplets = make_triplets(&pool, self.triplets_per_anchor, s("sampler"), NegativeScope::SameDataset)?;
        let features = pool
            .par_iter()
            .map(|e| head::extract_features(&backbone, &e.series, &self.style))
            .collect::<Result<Vec<_>>>()?;
        let config = HeadConfig {
            filters: self.filters,
            margin: self.margin,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: s("head"),
            ..HeadConfig::new(backbone.output_channels())
        };
        let outcome = head::train_head(&config, &triplets, &features)?;

        let test_features = ds
            .test
            .par_iter()
            .map(|t| head::extract_features(&backbone, t, &self.style))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<usize> = ds.test.iter().map(|t| t.label.unwrap_or(0) as usize).collect();
        let score = |points: &[Vec<f32>]| -> Result<f64> {
            let cfg = ClusterConfig {
                restarts: self.restarts,
                seed: s("cluster"),
                ..ClusterConfig::new(ds.num_classes)
            };
            nmi(&truth, &kmeans(points, &cfg)?.labels)
        };
        let ldvr = test_features
            .iter()
            .map(|f| Ok(head::ldvr_from_features(&outcome.weights, f, config.norm_eps)?.vector))
            .collect::<Result<Vec<_>>>()?;
        let pdvr: Vec<Vec<f32>> = test_features
            .iter()
            .map(|f| head::pdvr_from_features(f, config.norm_eps).vector)
            .collect();
        let raw: Vec<Vec<f32>> = ds.test.iter().map(|t| t.values.clone()).collect();
        Ok(ShiftReport {
            loss_history: outcome.loss_history,
            nmi_ldvr: score(&ldvr)?,
            nmi_pdvr: score(&pdvr)?,
            nmi_ed: score(&raw)?,
            pool_size: pool.len(),
            triplets: triplets.len(),
            test_labels: truth,
            ldvr,
            pdvr,
        })
    }
}
