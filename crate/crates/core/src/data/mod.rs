//! Image I/O, preprocessing, augmentation, phantom generation and the
//! merge, balance and split arithmetic.

pub mod augment;
pub mod dataset;
pub mod io;
pub mod pgm;
pub mod phantom;

pub use augment::{augment, AugmentPolicy, Transform};
pub use dataset::{
    merge_and_balance, preprocess, preprocess_image, split, to_gray, ImageDataset, Provenance,
    NEGATIVE, POSITIVE,
};
pub use pgm::GrayImage;
pub use phantom::{make_phantom_dataset, PhantomSpec};
