//! Synthetic multitask dataset over colored-shape grid scenes, plus the
//! loader for datasets in the same interchange layout. Each sample carries
//! the four task annotations: referring expressions with masks, one
//! relational reasoning QA with inline object markers, a canonical caption,
//! and a generation target id.

pub mod error;
pub mod generate;
pub mod lang;
pub mod load;
pub mod records;
pub mod scene;
pub mod text;

pub use error::MmudError;
pub use generate::{generate_dataset, GenConfig};
pub use load::{load_dataset, Dataset};
pub use records::{rle_decode, rle_encode, Manifest, Reasoning, RefExp, Sample};
pub use scene::{Object, Scene, Shape, CHANNELS, GRID};
