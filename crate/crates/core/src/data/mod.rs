//! Annotations, clip features, word vectors, sample preparation and the
//! synthetic corpus.

pub mod annotation;
pub mod embeddings;
pub mod features;
pub mod prepare;
pub mod synth;

pub use annotation::{load_annotations, write_annotations, Annotation};
pub use embeddings::{hash_embedding, WordEmbeddings};
pub use features::{decode_features, encode_features, load_features, write_features};
pub use prepare::{prepare, resample, Sample};
pub use synth::{generate_synthetic, SynthCorpus, SynthItem, SynthSpec, CONCEPT_WORDS};
