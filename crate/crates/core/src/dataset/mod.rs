//! Image-level splitting, class-ratio and density statistics, augmentation,
//! and the binary batch sampler.

mod augment;
mod sampler;
mod split;
mod stats;

pub use augment::{augment, AugmentConfig, Augmentation};
pub use sampler::{binary_batch_sampler, Batch, BatchPlan, SamplerConfig};
pub use split::{split_images, ImageInfo, Split, SplitAssignment, SplitOptions, SplitRatios};
pub use stats::{
    density_histogram, stratify_ratio_report, DensityBin, DensityStats, Quartiles, SplitRatio, StratificationReport,
    STRATIFICATION_GAP_PP,
};
