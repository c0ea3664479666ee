//! Tokenization, corpus ingestion and synthetic task generation.

pub mod corpus;
pub mod records;
pub mod synth;
pub mod vocab;

pub use corpus::{load_corpus, tokenize, TokenBatch, SEQ_LEN};
pub use records::{encode_record, read_records, records_vocab, write_records, EncodedRecord};
pub use synth::{generate_bundled, gen_choice, gen_list_completion, gen_parallelogram, Record, SyntheticSpec, TargetMode, Task};
pub use vocab::Vocab;
