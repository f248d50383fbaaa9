//! Synthetic multi-view text datasets: a bitmap-font scene generator, a
//! tiny PPM image library with the training-time augmentation pipeline, and
//! a manifest-driven loader with hash-based train/val/test splits.

pub mod font;
pub mod generate;
pub mod image;
pub mod loader;

pub use generate::{generate, GenSpec, GlyphBox};
pub use image::{augment_view, Image, ResizeMode};
pub use loader::{split_of, Batch, Dataset, Loader, Split};
