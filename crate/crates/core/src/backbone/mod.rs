//! Frozen residual CNN evaluated up to its last convolutional stage.

mod config;
pub mod ops;

use rand_distr::{Distribution, Normal};

pub use config::{BackboneConfig, BlockKind, BnDecl, ConvDecl, StageSpec, StemSpec, BN_FIELDS, STEM_POOL};
pub use ops::{batchnorm_infer, conv2d, conv_output_size, maxpool2d, BatchNorm, Filters, BN_EPS};

use crate::error::{Error, Result};
use crate::seed::{self, ContentHasher};
use crate::tensor::{FeatureMaps, ImageTensor};
use crate::tensorio::TensorMap;

#[derive(Debug, Clone)]
struct ConvBn {
    filters: Filters<f32>,
    stride: usize,
    pad: usize,
    bn: BatchNorm,
}

impl ConvBn {
    fn load(map: &TensorMap, conv: &ConvDecl, bn: &BnDecl) -> Result<Self> {
        let w = map.require(&conv.weight_name(), &conv.dims())?;
        let stat = |f: &str| -> Result<Vec<f32>> {
            Ok(map
                .require(&format!("{}.{f}", bn.prefix), &[bn.channels])?
                .data
                .clone())
        };
        Ok(Self {
            filters: Filters::new(
                conv.out_channels,
                conv.in_channels,
                conv.kernel,
                conv.kernel,
                w.data.clone(),
            )?,
            stride: conv.stride,
            pad: conv.pad,
            bn: BatchNorm {
                gamma: stat("gamma")?,
                beta: stat("beta")?,
                mean: stat("mean")?,
                var: stat("var")?,
                eps: BN_EPS,
            },
        })
    }

    fn forward(&self, x: &FeatureMaps, relu: bool) -> Result<FeatureMaps> {
        let mut y = conv2d(x, &self.filters, None, self.stride, self.pad)?;
        ops::batchnorm_in_place(&mut y, &self.bn)?;
        if relu {
            ops::relu_in_place(&mut y);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    main: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn forward(&self, x: &FeatureMaps) -> Result<FeatureMaps> {
        let last = self.main.len() - 1;
        let mut y = self.main[0].forward(x, last > 0)?;
        for (i, layer) in self.main.iter().enumerate().skip(1) {
            y = layer.forward(&y, i < last)?;
        }
        let skip;
        let identity = match &self.shortcut {
            Some(proj) => {
                skip = proj.forward(x, false)?;
                &skip
            }
            None => x,
        };
        if identity.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "residual shapes differ: {:?} vs {:?}",
                identity.shape(),
                y.shape()
            )));
        }
        for (a, b) in y.data.iter_mut().zip(&identity.data) {
            *a = (*a + b).max(0.0);
        }
        Ok(y)
    }
}

/// Inference-ready backbone. Immutable after loading.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
    fingerprint: String,
}

/// Builds a backbone from `map`, which must hold every tensor the config names.
pub fn load_backbone(map: &TensorMap, config: &BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let stem = ConvBn::load(
        map,
        &config.stem_conv(),
        &BnDecl {
            prefix: "stem.bn".into(),
            channels: config.stem.out_channels,
        },
    )?;
    let mut blocks = Vec::new();
    for (si, st) in config.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let (main, shortcut) = config.block_layers(si, b);
            blocks.push(ResidualBlock {
                main: main
                    .iter()
                    .map(|(c, n)| ConvBn::load(map, c, n))
                    .collect::<Result<_>>()?,
                shortcut: shortcut
                    .as_ref()
                    .map(|(c, n)| ConvBn::load(map, c, n))
                    .transpose()?,
            });
        }
    }

    let mut h = ContentHasher::new();
    h.str(&config.to_text());
    for (name, dims) in config.tensor_specs() {
        let e = map.get(&name).expect("validated above");
        h.str(&name).u64(dims.len() as u64).f32s(&e.data);
    }
    Ok(Backbone {
        config: config.clone(),
        stem,
        blocks,
        fingerprint: h.hex(),
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn output_channels(&self) -> usize {
        self.config.output_channels()
    }

    /// Content hash of topology and weights, used as a cache key.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Stem conv → BN → ReLU → max-pool → residual stages. No pooling head.
    pub fn forward_c5(&self, image: &ImageTensor) -> Result<FeatureMaps> {
        if image.channels != 3 {
            return Err(Error::Shape(format!(
                "backbone expects a 3-channel preprocessed image, got {} channels",
                image.channels
            )));
        }
        let x = self.stem.forward(image, true)?;
        let (k, s, p) = STEM_POOL;
        let mut x = maxpool2d(&x, k, s, p)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }
}

/// Deterministic stand-in weights for a config.
///
/// Conv weights are drawn from N(0, 2/fan_in) (He initialization) using a
/// ChaCha8 stream seeded with `seed`, visiting tensors in
/// [`BackboneConfig::tensor_specs`] order. Batch-norm layers are identity:
/// gamma 1, beta 0, mean 0, var 1.
pub fn random_weights(config: &BackboneConfig, seed: u64) -> TensorMap {
    let mut rng = seed::rng(seed);
    let mut map = TensorMap::new();
    for (name, dims) in config.tensor_specs() {
        let n: usize = dims.iter().product();
        let data = if name.ends_with(".weight") {
            let fan_in: usize = dims[1..].iter().product();
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        } else if name.ends_with(".gamma") || name.ends_with(".var") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        map.insert(name, dims, data).expect("spec dims are consistent");
    }
    map
}

/// The tiny config with its seeded weights, ready to run.
pub fn tiny_backbone(seed: u64) -> Backbone {
    let cfg = BackboneConfig::tiny();
    load_backbone(&random_weights(&cfg, seed), &cfg).expect("tiny weights match tiny config")
}
