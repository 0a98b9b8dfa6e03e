//! Dataset ingestion, preprocessing and deterministic splitting.

mod catalog;
mod loader;
mod preprocess;
mod split;

pub use catalog::ClassCatalog;
pub use loader::{
    decode_image, load_dataset, DatasetLoader, LoadedDataset, Sample, IMAGE_EXTENSIONS,
};
pub use preprocess::{resize_bilinear, resize_bilinear_to, standardize, STD_FLOOR};
pub use split::{split_dataset, SplitItem, SplitManifest, SplitMode, SplitName};
