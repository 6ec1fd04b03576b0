pub mod dataset;
pub mod pgm;
pub mod phantom;

pub use dataset::{generate_dataset, split_dataset, DatasetConfig, Manifest, Sample, Split, SplitFractions, ViewSet};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use phantom::{generate_phantom, Phantom, View};
