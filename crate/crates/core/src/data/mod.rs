//! From raw grayscale radiographs to model-ready patch pairs.

pub mod augment;
pub mod dataset;
pub mod geometry;
pub mod image;
pub mod intensity;
pub mod manifest;
pub mod phantom;
pub mod sampler;

pub use augment::{augment, AugmentConfig};
pub use dataset::{assemble_batch, make_pair, prepare_records, thread_pool, PreparedSample};
pub use geometry::{crop_mm, extract_patch_pair, preprocess_image, preprocess_mask, PatchGeometry, PreprocessConfig};
pub use image::{read_pgm, Gray16, Gray8, GrayImage, Pgm};
pub use intensity::to_8bit;
pub use manifest::{load_manifest, validate_splits, write_manifest, DatasetRecord, Side, Split, SplitReport};
pub use phantom::{dataset_layout, dataset_phantom, generate_dataset, generate_phantom, Phantom, PhantomSpec};
pub use sampler::{oversample_epoch, SamplerConfig};
