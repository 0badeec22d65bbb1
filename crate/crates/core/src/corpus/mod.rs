//! Synthetic parallel data, plain-text corpus files and token-budgeted
//! batching.

mod batch;
mod io;
mod synthetic;

pub use batch::{epoch_seed, make_batches, BatchStream, EncodedPair, ParallelBatch};
pub use io::{load_parallel, read_lines, write_lines, CorpusManifest, MANIFEST_FILE};
pub use synthetic::{
    generate_synthetic, latent_word, split_range, split_ranges, Renderer, Split, SyntheticCorpus,
    SyntheticLanguageSpec, Transform, MAX_LATENT_VOCAB, MAX_SENTENCE_LEN,
};
