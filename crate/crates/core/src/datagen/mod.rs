//! Synthetic sample generation: Gaussian noise matched to input moments, and
//! input optimization against BN statistics, a class logit and an image prior.

mod augment;
mod generate;
mod ppm;
mod stats;

pub use augment::{in_batch_augment, AugmentSet, CROP_SCALE, CUTOUT_AREA, FLIP_PROB, MAX_CUTOUTS};
pub use generate::{
    batch_seed, generate, generate_dataset, generate_gaussian, monitor_generation, prior_loss,
    GenConfig, GenRecord, GenerationTrace, Scheme, SyntheticBatch,
};
pub use ppm::{dump_ppm, write_ppm};
pub use stats::{
    bns, bns_layer, j_kl, stats_forward, BnSnapshot, StatMetric, StatsForward, STAT_EPS,
};
