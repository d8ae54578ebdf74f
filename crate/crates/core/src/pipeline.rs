//! End-to-end orchestration with on-disk caches.
//!
//! Every command takes a [`RunConfig`]. Configuration files are flat
//! `key = value` text with `#` comments; keys are the kebab-case names
//! accepted by [`RunConfig::set`], which are also the CLI flag names.
//!
//! Per-module seeds are derived from the global seed with
//! [`seed::derive_seed`] under the names `pool`, `sampler`, `head`,
//! `cluster` and `backbone`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::backbone::{load_backbone, random_weights, Backbone, BackboneConfig};
use crate::cluster::{kmeans, ClusterConfig};
use crate::dataset::{build_pool, circular_shift, load_ucr_dataset, Dataset, Origin, PoolCounts, PoolEntry, PoolParams, TimeSeries};
use crate::error::{Error, Result};
use crate::head::{self, HeadConfig, HeadWeights, TrainOutcome};
use crate::metrics::{cumulative_ranks, nmi_with, rand_index, NmiNorm, ScoreTable};
use crate::raster::{self, RasterStyle};
use crate::sampler::{make_triplets, validate_pool, NegativeScope, TripletPool, Violation};
use crate::seed::{self, ContentHasher};
use crate::tensor::{FeatureMaps, ImageTensor, Tensor3};
use crate::tensorio::{self, TensorMap};

/// Which representation `evaluate` clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    Ldvr,
    Pdvr,
    /// Raw series values under Euclidean distance.
    Ed,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ldvr => "ldvr",
            Mode::Pdvr => "pdvr",
            Mode::Ed => "ed",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ldvr" => Ok(Mode::Ldvr),
            "pdvr" => Ok(Mode::Pdvr),
            "ed" | "ed-baseline" => Ok(Mode::Ed),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Which series of each dataset are clustered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    /// Datasets to evaluate.
    pub datasets: Vec<String>,
    /// Datasets feeding the triplet pool; empty means `datasets`.
    pub pool_datasets: Vec<String>,
    /// Built-in backbone name (`tiny`, `resnet50`) or a config file path.
    pub backbone: String,
    /// TSV1 weights; when absent, seeded random weights are generated.
    pub backbone_weights: Option<PathBuf>,
    /// Head container; defaults to `<output_dir>/head.tsv1`.
    pub head_path: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub style: RasterStyle,
    pub filters: usize,
    pub margin: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub samples_per_dataset: usize,
    pub shifts_per_sample: usize,
    pub eps_range: (f64, f64),
    pub triplets_per_anchor: usize,
    pub negatives: NegativeScope,
    pub modes: Vec<Mode>,
    pub split: Split,
    pub znorm: bool,
    pub nmi_norm: NmiNorm,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("."),
            datasets: Vec::new(),
            pool_datasets: Vec::new(),
            backbone: "tiny".into(),
            backbone_weights: None,
            head_path: None,
            cache_dir: PathBuf::from(".tsvr-cache"),
            output_dir: PathBuf::from("out"),
            style: RasterStyle::default(),
            filters: 4096,
            margin: 1.0,
            lr: 0.05,
            batch_size: 32,
            epochs: 200,
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
            samples_per_dataset: 100,
            shifts_per_sample: 10,
            eps_range: (0.6, 1.0),
            triplets_per_anchor: 1,
            negatives: NegativeScope::SameDataset,
            modes: vec![Mode::Ldvr],
            split: Split::Test,
            znorm: false,
            nmi_norm: NmiNorm::Geometric,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data-root",
        "datasets",
        "pool-datasets",
        "backbone",
        "backbone-weights",
        "head",
        "cache-dir",
        "output-dir",
        "width",
        "height",
        "line-thickness",
        "pad-fraction",
        "antialias",
        "filters",
        "margin",
        "lr",
        "batch-size",
        "epochs",
        "restarts",
        "max-iters",
        "tol",
        "samples-per-dataset",
        "shifts-per-sample",
        "eps-range",
        "triplets-per-anchor",
        "negatives",
        "mode",
        "split",
        "znorm",
        "nmi-norm",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data-root" => self.data_root = v.into(),
            "datasets" => self.datasets = list(v),
            "pool-datasets" => self.pool_datasets = list(v),
            "backbone" => self.backbone = v.to_string(),
            "backbone-weights" => self.backbone_weights = Some(v.into()),
            "head" => self.head_path = Some(v.into()),
            "cache-dir" => self.cache_dir = v.into(),
            "output-dir" => self.output_dir = v.into(),
            "width" => self.style.width = parse(key, v)?,
            "height" => self.style.height = parse(key, v)?,
            "line-thickness" => self.style.line_thickness = parse(key, v)?,
            "pad-fraction" => self.style.pad_fraction = parse(key, v)?,
            "antialias" => self.style.antialias = parse_bool(key, v)?,
            "filters" => self.filters = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch-size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "restarts" => self.restarts = parse(key, v)?,
            "max-iters" => self.max_iters = parse(key, v)?,
            "tol" => self.tol = parse(key, v)?,
            "samples-per-dataset" => self.samples_per_dataset = parse(key, v)?,
            "shifts-per-sample" => self.shifts_per_sample = parse(key, v)?,
            "eps-range" => {
                let parts = list(v);
                if parts.len() != 2 {
                    return Err(Error::Config(format!("eps-range: expected low,high, got {v:?}")));
                }
                self.eps_range = (parse(key, &parts[0])?, parse(key, &parts[1])?);
            }
            "triplets-per-anchor" => self.triplets_per_anchor = parse(key, v)?,
            "negatives" => {
                self.negatives = match v {
                    "same" | "same-dataset" => NegativeScope::SameDataset,
                    "any" | "any-dataset" => NegativeScope::AnyDataset,
                    _ => return Err(Error::Config(format!("negatives: expected same|any, got {v:?}"))),
                }
            }
            "mode" => {
                let modes = list(v).iter().map(|m| m.parse()).collect::<Result<Vec<Mode>>>()?;
                if modes.is_empty() {
                    return Err(Error::Config("mode: at least one mode required".into()));
                }
                self.modes = modes;
            }
            "split" => {
                self.split = match v {
                    "test" => Split::Test,
                    "all" => Split::All,
                    _ => return Err(Error::Config(format!("split: expected test|all, got {v:?}"))),
                }
            }
            "znorm" => self.znorm = parse_bool(key, v)?,
            "nmi-norm" => self.nmi_norm = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn head_path(&self) -> PathBuf {
        self.head_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("head.tsv1"))
    }

    pub fn module_seed(&self, module: &str) -> u64 {
        seed::derive_seed(self.seed, module)
    }

    pub fn pool_params(&self) -> PoolParams {
        PoolParams {
            samples_per_dataset: self.samples_per_dataset,
            shifts_per_sample: self.shifts_per_sample,
            eps_low: self.eps_range.0,
            eps_high: self.eps_range.1,
            seed: self.module_seed("pool"),
        }
    }

    pub fn head_config(&self, in_channels: usize) -> HeadConfig {
        HeadConfig {
            in_channels,
            filters: self.filters,
            margin: self.margin,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.module_seed("head"),
            norm_eps: head::DEFAULT_NORM_EPS,
        }
    }

    pub fn cluster_config(&self, k: usize) -> ClusterConfig {
        ClusterConfig {
            k,
            restarts: self.restarts,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.module_seed("cluster"),
        }
    }

    fn pool_dataset_names(&self) -> &[String] {
        if self.pool_datasets.is_empty() {
            &self.datasets
        } else {
            &self.pool_datasets
        }
    }

    /// Checks that the inputs named by the config exist.
    pub fn check_paths(&self) -> Result<()> {
        self.style.validate()?;
        if !self.data_root.is_dir() {
            return Err(Error::MissingArtifact(format!(
                "data root {} is not a directory",
                self.data_root.display()
            )));
        }
        if let Some(w) = &self.backbone_weights {
            if !w.is_file() {
                return Err(Error::MissingArtifact(format!("backbone weights {}", w.display())));
            }
        }
        Ok(())
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Finds a dataset's train/test files under the data root.
pub fn dataset_files(root: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    let dirs = [root.join(name), root.to_path_buf()];
    let exts = [".tsv", ".txt", ".csv", ""];
    for dir in &dirs {
        for ext in exts {
            let tr = dir.join(format!("{name}_TRAIN{ext}"));
            let te = dir.join(format!("{name}_TEST{ext}"));
            if tr.is_file() && te.is_file() {
                return Ok((tr, te));
            }
        }
    }
    Err(Error::MissingArtifact(format!(
        "dataset {name}: no {name}_TRAIN/{name}_TEST files under {}",
        root.display()
    )))
}

fn load_named(cfg: &RunConfig, names: &[String]) -> Result<Vec<Dataset>> {
    if names.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    names
        .iter()
        .map(|name| {
            let (tr, te) = dataset_files(&cfg.data_root, name)?;
            let mut ds = load_ucr_dataset(&tr, &te, name)?;
            if cfg.znorm {
                for s in ds.train.iter_mut().chain(ds.test.iter_mut()) {
                    *s = s.z_normalized();
                }
            }
            Ok(ds)
        })
        .collect()
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    load_named(cfg, &cfg.datasets)
}

pub fn load_pool_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    load_named(cfg, cfg.pool_dataset_names())
}

pub fn resolve_backbone_config(spec: &str) -> Result<BackboneConfig> {
    if let Some(c) = BackboneConfig::builtin(spec) {
        return Ok(c);
    }
    let p = Path::new(spec);
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    BackboneConfig::parse(&text)
}

pub fn load_configured_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let bc = resolve_backbone_config(&cfg.backbone)?;
    let map = match &cfg.backbone_weights {
        Some(p) => tensorio::read_container(p)?,
        None => random_weights(&bc, cfg.module_seed("backbone")),
    };
    load_backbone(&map, &bc)
}

/// Content key of a series (ids and values).
pub fn series_key(s: &TimeSeries) -> String {
    ContentHasher::new()
        .str("series")
        .str(&s.dataset_id)
        .u64(s.sample_id as u64)
        .f32s(&s.values)
        .hex()
}

fn read_tensor3(path: &Path, name: &str) -> Result<Tensor3<f32>> {
    let map = tensorio::read_container(path)?;
    let e = map
        .get(name)
        .ok_or_else(|| Error::MissingTensor(format!("{name} in {}", path.display())))?;
    match e.dims.as_slice() {
        &[c, h, w] => Ok(Tensor3::from_vec(c, h, w, e.data.clone()).expect("validated dims")),
        d => Err(Error::Shape(format!("{}: expected rank 3, got {d:?}", path.display()))),
    }
}

fn write_tensor3(path: &Path, name: &str, t: &Tensor3<f32>) -> Result<()> {
    let mut map = TensorMap::new();
    map.insert(name, vec![t.channels, t.height, t.width], t.data.clone())?;
    // Write to a temporary name first so a crashed run never leaves a torn record.
    let tmp = path.with_extension("partial");
    tensorio::write_container(&tmp, &map)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Backbone feature cache keyed by (series, backbone, style).
pub struct FeatureCache {
    dir: PathBuf,
    computed: AtomicUsize,
    reused: AtomicUsize,
}

impl FeatureCache {
    pub fn new(cache_dir: &Path) -> Result<Self> {
        let dir = cache_dir.join("features");
        ensure_dir(&dir)?;
        Ok(Self {
            dir,
            computed: AtomicUsize::new(0),
            reused: AtomicUsize::new(0),
        })
    }

    pub fn key(series: &TimeSeries, backbone: &Backbone, style: &RasterStyle) -> String {
        ContentHasher::new()
            .str(&series_key(series))
            .str(backbone.fingerprint())
            .str(&style.cache_key())
            .hex()
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.tsv1"))
    }

    pub fn get_or_compute(&self, series: &TimeSeries, backbone: &Backbone, style: &RasterStyle) -> Result<FeatureMaps> {
        let path = self.path_for(&Self::key(series, backbone, style));
        if path.is_file() {
            if let Ok(t) = read_tensor3(&path, "features") {
                self.reused.fetch_add(1, Ordering::Relaxed);
                return Ok(t);
            }
        }
        let f = head::extract_features(backbone, series, style)?;
        write_tensor3(&path, "features", &f)?;
        self.computed.fetch_add(1, Ordering::Relaxed);
        Ok(f)
    }

    /// Features for many series; computed in parallel, returned in input order.
    pub fn batch(&self, series: &[&TimeSeries], backbone: &Backbone, style: &RasterStyle) -> Result<Vec<FeatureMaps>> {
        series
            .par_iter()
            .map(|s| self.get_or_compute(s, backbone, style))
            .collect()
    }

    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn reused(&self) -> usize {
        self.reused.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub computed: usize,
    pub reused: usize,
}

/// Writes preprocessed input tensors for every series of the configured
/// datasets. Existing records are left alone.
pub fn render(cfg: &RunConfig) -> Result<CacheStats> {
    cfg.check_paths()?;
    let datasets = load_datasets(cfg)?;
    let dir = cfg.cache_dir.join("raster").join(&cfg.style.cache_key()[..16]);
    ensure_dir(&dir)?;
    let series: Vec<&TimeSeries> = datasets.iter().flat_map(Dataset::all_series).collect();
    let written = AtomicUsize::new(0);
    series.par_iter().try_for_each(|s| -> Result<()> {
        let path = dir.join(format!("{}.tsv1", series_key(s)));
        if path.is_file() {
            return Ok(());
        }
        let img: ImageTensor = raster::render_input(s, &cfg.style)?;
        write_tensor3(&path, "image", &img)?;
        written.fetch_add(1, Ordering::Relaxed);
        Ok(())
    })?;
    let computed = written.into_inner();
    Ok(CacheStats {
        computed,
        reused: series.len() - computed,
    })
}

/// Path of the cached preprocessed image of `series` under `style`.
pub fn raster_cache_path(cfg: &RunConfig, series: &TimeSeries) -> PathBuf {
    cfg.cache_dir
        .join("raster")
        .join(&cfg.style.cache_key()[..16])
        .join(format!("{}.tsv1", series_key(series)))
}

#[derive(Debug, Clone)]
pub struct PoolReport {
    pub pool: Vec<PoolEntry>,
    pub triplets: TripletPool,
    pub counts: PoolCounts,
    pub violations: Vec<Violation>,
}

/// Builds the pool and its triplets from the configured pool datasets.
pub fn build_pool_and_triplets(cfg: &RunConfig) -> Result<PoolReport> {
    let datasets = load_pool_datasets(cfg)?;
    let pool = build_pool(&datasets, &cfg.pool_params())?;
    let triplets = make_triplets(&pool, cfg.triplets_per_anchor, cfg.module_seed("sampler"), cfg.negatives)?;
    let violations = validate_pool(&triplets, &pool, cfg.negatives);
    Ok(PoolReport {
        counts: PoolCounts::of(&pool),
        pool,
        triplets,
        violations,
    })
}

fn pool_csv(pool: &[PoolEntry]) -> String {
    let mut s = String::from("index,dataset,sample_id,origin,shift_steps,parent_sample_id\n");
    for (i, e) in pool.iter().enumerate() {
        let origin = match e.origin {
            Origin::Original => "original",
            Origin::Shifted => "shifted",
        };
        let parent = e
            .parent_sample
            .as_ref()
            .map_or(String::new(), |p| p.sample_id.to_string());
        s.push_str(&format!(
            "{i},{},{},{origin},{},{parent}\n",
            e.series.dataset_id, e.series.sample_id, e.shift_steps
        ));
    }
    s
}

/// `pool` command: writes `pool.csv` and `triplets.csv` to the output dir.
pub fn pool_command(cfg: &RunConfig) -> Result<PoolReport> {
    cfg.check_paths()?;
    let report = build_pool_and_triplets(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let p = cfg.output_dir.join("pool.csv");
    fs::write(&p, pool_csv(&report.pool)).map_err(|e| Error::io(&p, e))?;
    report.triplets.write_csv(&cfg.output_dir.join("triplets.csv"))?;
    Ok(report)
}

/// `extract` command: backbone features for every pool entry.
pub fn extract(cfg: &RunConfig) -> Result<(Vec<FeatureMaps>, CacheStats)> {
    cfg.check_paths()?;
    let backbone = load_configured_backbone(cfg)?;
    let report = build_pool_and_triplets(cfg)?;
    extract_pool(cfg, &backbone, &report.pool)
}

fn extract_pool(cfg: &RunConfig, backbone: &Backbone, pool: &[PoolEntry]) -> Result<(Vec<FeatureMaps>, CacheStats)> {
    let cache = FeatureCache::new(&cfg.cache_dir)?;
    let series: Vec<&TimeSeries> = pool.iter().map(|e| &e.series).collect();
    let feats = cache.batch(&series, backbone, &cfg.style)?;
    Ok((
        feats,
        CacheStats {
            computed: cache.computed(),
            reused: cache.reused(),
        },
    ))
}

/// `train` command: writes the head container and `loss.csv`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.check_paths()?;
    let backbone = load_configured_backbone(cfg)?;
    let report = build_pool_and_triplets(cfg)?;
    if let Some(v) = report.violations.first() {
        return Err(Error::Pool(v.to_string()));
    }
    let (features, _) = extract_pool(cfg, &backbone, &report.pool)?;
    let outcome = head::train_head(
        &cfg.head_config(backbone.output_channels()),
        &report.triplets,
        &features,
    )?;
    ensure_dir(&cfg.output_dir)?;
    let head_path = cfg.head_path();
    if let Some(parent) = head_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    tensorio::write_container(&head_path, &outcome.weights.to_tensor_map())?;
    outcome.write_loss_csv(&cfg.output_dir.join("loss.csv"))?;
    Ok(outcome)
}

pub fn load_head(cfg: &RunConfig) -> Result<HeadWeights<f32>> {
    let p = cfg.head_path();
    if !p.is_file() {
        return Err(Error::MissingArtifact(format!("head container {}", p.display())));
    }
    HeadWeights::from_tensor_map(&tensorio::read_container(&p)?)
}

fn eval_series(ds: &Dataset, split: Split) -> Vec<&TimeSeries> {
    match split {
        Split::Test => ds.test.iter().collect(),
        Split::All => ds.all_series().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nmi: ScoreTable,
    pub ri: ScoreTable,
    /// Average ranks per method, present when at least two methods are scored.
    pub nmi_ranks: Option<Vec<(String, f64)>>,
    pub ri_ranks: Option<Vec<(String, f64)>>,
}

/// Embeddings of `series` for `mode`.
pub fn embed_all(
    mode: Mode,
    series: &[&TimeSeries],
    backbone: Option<&Backbone>,
    head_weights: Option<&HeadWeights<f32>>,
    cache: &FeatureCache,
    style: &RasterStyle,
) -> Result<Vec<Vec<f32>>> {
    match mode {
        Mode::Ed => Ok(series.iter().map(|s| s.values.clone()).collect()),
        Mode::Pdvr | Mode::Ldvr => {
            let bb = backbone.ok_or_else(|| Error::MissingArtifact("backbone".into()))?;
            let feats = cache.batch(series, bb, style)?;
            feats
                .par_iter()
                .map(|f| match mode {
                    Mode::Pdvr => Ok(head::pdvr_from_features(f, head::DEFAULT_NORM_EPS).vector),
                    _ => {
                        let w = head_weights.ok_or_else(|| Error::MissingArtifact("head weights".into()))?;
                        Ok(head::ldvr_from_features(w, f, head::DEFAULT_NORM_EPS)?.vector)
                    }
                })
                .collect()
        }
    }
}

/// Clusters `points` with k = number of distinct truth labels and scores the
/// result. Returns (NMI, RI, predicted labels).
pub fn cluster_and_score(
    points: &[Vec<f32>],
    truth: &[usize],
    cfg: &RunConfig,
) -> Result<(f64, f64, Vec<usize>)> {
    let k = truth.iter().collect::<std::collections::BTreeSet<_>>().len().max(1);
    let a = kmeans(points, &cfg.cluster_config(k))?;
    let n = nmi_with(truth, &a.labels, cfg.nmi_norm)?;
    let r = if truth.len() >= 2 { rand_index(truth, &a.labels)? } else { 1.0 };
    Ok((n, r, a.labels))
}

/// `evaluate` command. Score tables (`scores_nmi.csv`, `scores_ri.csv`) in
/// the output dir gain or replace one column per evaluated mode; rank
/// summaries are written once a table holds two or more methods.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.check_paths()?;
    let datasets = load_datasets(cfg)?;
    let needs_backbone = cfg.modes.iter().any(|m| *m != Mode::Ed);
    let backbone = needs_backbone.then(|| load_configured_backbone(cfg)).transpose()?;
    let head_weights = cfg.modes.contains(&Mode::Ldvr).then(|| load_head(cfg)).transpose()?;
    let cache = FeatureCache::new(&cfg.cache_dir)?;
    ensure_dir(&cfg.output_dir)?;

    let nmi_path = cfg.output_dir.join("scores_nmi.csv");
    let ri_path = cfg.output_dir.join("scores_ri.csv");
    let existing = |p: &Path| -> Result<ScoreTable> {
        if p.is_file() {
            let t = ScoreTable::read_csv(p)?;
            if t.datasets == cfg.datasets {
                return Ok(t);
            }
        }
        ScoreTable::new(vec![], vec![], vec![])
    };
    let mut nmi_table = existing(&nmi_path)?;
    let mut ri_table = existing(&ri_path)?;

    for &mode in &cfg.modes {
        let mut nmi_col = Vec::new();
        let mut ri_col = Vec::new();
        for ds in &datasets {
            let series = eval_series(ds, cfg.split);
            if series.is_empty() {
                return Err(Error::MissingArtifact(format!("dataset {} has no series in the evaluation split", ds.name)));
            }
            let truth: Vec<usize> = series.iter().map(|s| s.label.unwrap_or(0) as usize).collect();
            let points = embed_all(mode, &series, backbone.as_ref(), head_weights.as_ref(), &cache, &cfg.style)?;
            let (n, r, labels) = cluster_and_score(&points, &truth, cfg)?;
            let mut assign = String::from("point_index,cluster\n");
            for (i, l) in labels.iter().enumerate() {
                assign.push_str(&format!("{i},{l}\n"));
            }
            let ap = cfg.output_dir.join(format!("assign_{}_{}.csv", ds.name, mode.name()));
            fs::write(&ap, assign).map_err(|e| Error::io(&ap, e))?;
            nmi_col.push((ds.name.clone(), n));
            ri_col.push((ds.name.clone(), r));
        }
        nmi_table.set_column(mode.name(), &nmi_col)?;
        ri_table.set_column(mode.name(), &ri_col)?;
    }
    nmi_table.write_csv(&nmi_path)?;
    ri_table.write_csv(&ri_path)?;

    let ranks = |t: &ScoreTable, file: &str| -> Result<Option<Vec<(String, f64)>>> {
        if t.methods.len() < 2 {
            return Ok(None);
        }
        let r = cumulative_ranks(t)?;
        let mut s = String::from("method,average_rank\n");
        for (m, v) in &r {
            s.push_str(&format!("{m},{v}\n"));
        }
        let p = cfg.output_dir.join(file);
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        Ok(Some(r))
    };
    Ok(EvalReport {
        nmi_ranks: ranks(&nmi_table, "ranks_nmi.csv")?,
        ri_ranks: ranks(&ri_table, "ranks_ri.csv")?,
        nmi: nmi_table,
        ri: ri_table,
    })
}

/// `dump-activations` command: one PGM per head filter for each requested
/// sample (optionally circularly shifted), min–max scaled per map.
pub fn dump_activations(cfg: &RunConfig, dataset: &str, sample_ids: &[usize], shift: Option<usize>) -> Result<Vec<PathBuf>> {
    cfg.check_paths()?;
    let (tr, te) = dataset_files(&cfg.data_root, dataset)?;
    let mut ds = load_ucr_dataset(&tr, &te, dataset)?;
    if cfg.znorm {
        for s in ds.train.iter_mut().chain(ds.test.iter_mut()) {
            *s = s.z_normalized();
        }
    }
    let backbone = load_configured_backbone(cfg)?;
    let weights = load_head(cfg)?;
    let cache = FeatureCache::new(&cfg.cache_dir)?;
    let dir = cfg.output_dir.join("activations");
    ensure_dir(&dir)?;
    let mut written = Vec::new();
    for &sid in sample_ids {
        let series = ds
            .all_series()
            .find(|s| s.sample_id == sid)
            .ok_or_else(|| Error::Config(format!("dataset {dataset} has no sample {sid}")))?;
        let (series, tag) = match shift {
            Some(s) => (circular_shift(series, s), format!("{dataset}_{sid}_s{s}")),
            None => (series.clone(), format!("{dataset}_{sid}")),
        };
        let feats = cache.get_or_compute(&series, &backbone, &cfg.style)?;
        let maps = head::head_activations(&weights, &feats)?;
        for f in 0..maps.channels {
            let plane = maps.plane(f);
            let (lo, hi) = plane
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let p = dir.join(format!("{tag}_f{f:04}.pgm"));
            raster::write_pgm(&p, maps.width, maps.height, plane, lo, hi)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_round_trip_through_set() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nwidth = 160\nheight=120\neps-range = 0.7, 0.9\nmode = ldvr,pdvr,ed\nsplit = all\nnegatives = any\nantialias = yes\nseed = 42 # trailing\n",
        )
        .unwrap();
        assert_eq!((c.style.width, c.style.height), (160, 120));
        assert_eq!(c.eps_range, (0.7, 0.9));
        assert_eq!(c.modes, vec![Mode::Ldvr, Mode::Pdvr, Mode::Ed]);
        assert_eq!(c.split, Split::All);
        assert_eq!(c.negatives, NegativeScope::AnyDataset);
        assert!(c.style.antialias);
        assert_eq!(c.seed, 42);
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("epochs", "many").is_err());
        assert!(c.apply_text("width 3").is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let sample = |k: &str| match k {
            "eps-range" => "0.6,1.0",
            "antialias" | "znorm" => "false",
            "negatives" => "same",
            "mode" => "pdvr",
            "split" => "test",
            "nmi-norm" => "max",
            "pad-fraction" | "tol" | "margin" | "lr" => "0.1",
            _ => "3",
        };
        for k in RunConfig::KEYS {
            let mut c = RunConfig::default();
            c.set(k, sample(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn default_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.style.width, c.style.height), (640, 480));
        assert_eq!((c.filters, c.margin, c.lr, c.batch_size, c.epochs), (4096, 1.0, 0.05, 32, 200));
        assert_eq!((c.samples_per_dataset, c.shifts_per_sample, c.eps_range), (100, 10, (0.6, 1.0)));
        assert_eq!(c.split, Split::Test);
        assert_eq!(c.negatives, NegativeScope::SameDataset);
    }

    #[test]
    fn module_seeds_are_distinct() {
        let c = RunConfig::default();
        assert_ne!(c.pool_params().seed, c.head_config(4).seed);
        assert_ne!(c.cluster_config(2).seed, c.module_seed("sampler"));
    }

    #[test]
    fn dataset_file_layouts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(dataset_files(dir.path(), "X").is_err());
        fs::create_dir(dir.path().join("X")).unwrap();
        fs::write(dir.path().join("X/X_TRAIN.tsv"), "1\t1\t2\n").unwrap();
        fs::write(dir.path().join("X/X_TEST.tsv"), "1\t1\t2\n").unwrap();
        let (tr, _) = dataset_files(dir.path(), "X").unwrap();
        assert!(tr.ends_with("X/X_TRAIN.tsv"));
        fs::write(dir.path().join("Y_TRAIN"), "1,1,2\n").unwrap();
        fs::write(dir.path().join("Y_TEST"), "1,1,2\n").unwrap();
        assert!(dataset_files(dir.path(), "Y").is_ok());
    }
}
