//! Spot datasets: validation, gene selection, spatial neighbors, synthetic
//! generation, fold splitting and the directory file format.

mod dataset;
mod io;
mod spatial;
mod split;
mod synth;

pub use dataset::{select_top_genes, SpotRecord, StDataset};
pub use io::{load_dataset, save_dataset, SCHEMA_VERSION};
pub use spatial::{knn_spatial, neighbor_table};
pub use split::{kfold_split, FoldSplit};
pub use synth::{synth_generate, SynthConfig};
