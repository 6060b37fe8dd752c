//! Per-image machine-perception JND noise: a committee of four frozen CNN
//! classifiers, CAM attention, an encoder-decoder noise generator and the
//! measurements around it.

pub mod cam;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod trainer;
pub mod visual;

pub use cam::CamMap;
pub use classifier::{ArchId, ClassifierModel, Committee, LabelSet, ProbVector};
pub use config::RunConfig;
pub use data::{DatasetSplit, ImageTensor, PixelImage, Split};
pub use error::{Error, Result};
pub use eval::{HomogeneityReport, RcaReport};
pub use generator::{GeneratorConfig, GeneratorModel, JndImage};
pub use losses::{LossBundle, SpatialWeightVector};
pub use pipeline::{Run, RunManifest};
pub use trainer::{MetricsRecord, TrainConfig};
