//! Vocabularies, corpus files, batching and the synthetic trilingual task.

mod batch;
mod corpus;
mod synthetic;
mod vocab;

pub use batch::{batch_iter, bucket_batches};
pub use corpus::{read_corpus, read_trilingual, write_corpus, write_trilingual, ParallelCorpus, TrilingualCorpus};
pub use synthetic::{generate_synthetic, SyntheticTask, SyntheticTaskSpec, TargetTransform};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
