//! Puzzle construction, masking, synthetic corpora and dataset files.

mod corpus;
mod image;
mod instance;
mod synth;

pub use corpus::{
    load_corpus, load_puzzle, save_puzzle, Corpus, CorpusManifest, Sample, SampleKind, SampleRecord, Source,
    Split, MANIFEST_VERSION, PUZZLE_FILE,
};
pub(crate) use corpus::write_json;
pub use image::{read_frame_dir, Image};
pub use instance::{
    apply_mask, make_spatial, make_temporal, mask_limit, Crop, Piece, PieceShape, Provenance, PuzzleInstance,
    SolverView, SpatialParams,
};
pub use synth::{moving_squares, sample_rng, synth_spatial, synth_temporal, texture, MotionParams, TextureParams};
