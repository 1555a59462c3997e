//! Procedural text–voxel corpus: furniture shapes, template captions with exact
//! attribute lists, tokenization and file formats.

mod dataset;
mod shapes;
mod text;
mod voxel;

pub use dataset::{assign_splits, sample_spec, shape_id, CaptionRecord, Corpus, ShapeRecord, Split};
pub use shapes::{
    generate_shape, parts, tier_height, BackStyle, Color, HeightTier, Part, PartKind, ShapeClass, ShapeSpec, RESOLUTION,
};
pub use text::{
    attribute_lexicon, generate_caption, normalize_words, token_len, Caption, PhraseMatcher, Tokenizer, MAX_TOKENS,
    NUM_TEMPLATES, PAD, UNK,
};
pub use voxel::{grid_points, VoxelGrid, VOX_MAGIC};
