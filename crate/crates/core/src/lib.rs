//! Unsupervised visual representations for univariate time series.
//!
//! A series is plotted as an image ([`raster`]), passed through a frozen
//! residual CNN ([`backbone`]), and summarized by a small trainable head
//! ([`head`]): a 3×3 convolution, global max pooling and l2 normalization.
//! The head is trained without labels using triplets whose positives are
//! circular shifts of the anchor ([`dataset`], [`sampler`]). The resulting
//! fixed-length embeddings are clustered with k-means ([`cluster`]) and scored
//! against ground truth with NMI and the Rand index ([`metrics`]).
//!
//! [`pipeline`] wires the stages together with on-disk caching and is what
//! the `tsvr` command-line tool drives.

pub mod backbone;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod tensorio;

pub use backbone::{load_backbone, Backbone, BackboneConfig};
pub use cluster::{kmeans, Assignment, ClusterConfig};
pub use dataset::{build_pool, circular_shift, load_ucr_dataset, Dataset, Origin, PoolEntry, PoolParams, TimeSeries};
pub use error::{Error, ErrorKind, Result};
pub use head::{embed_ldvr, embed_pdvr, train_head, Embedding, EmbeddingKind, HeadConfig, HeadWeights};
pub use metrics::{cumulative_ranks, nmi, rand_index, ScoreTable};
pub use pipeline::RunConfig;
pub use raster::{preprocess, rasterize, RasterStyle};
pub use sampler::{make_triplets, validate_pool, NegativeScope, Triplet, TripletPool};
pub use tensor::{FeatureMaps, ImageTensor, Tensor3};
pub use tensorio::{read_container, write_container, TensorMap};
