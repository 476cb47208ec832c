//! Corpus files, checkpoints, run configuration, the synthetic corpus and
//! the end-to-end pipelines behind the command line.

mod checkpoint;
mod config;
mod data;
mod gradcheck;
mod pipeline;
mod synth;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, gaze_echo, load_checkpoint, load_gaze, load_ranker, save_checkpoint,
    save_gaze, save_ranker, AnyRanker, Checkpoint,
};
pub use config::{RankerKind, RunConfig};
pub use data::{
    format_candidates, format_fixations, format_qrels, format_records, format_run, format_triples, load_candidates,
    load_collection, load_fixations, load_qrels_file, load_queries, load_run_file, load_triples, parse_candidates,
    parse_collection, parse_fixations, parse_qrels, parse_queries, parse_run, parse_triples, write_run_file,
    Candidates, TextRecord, FIXATION_HEADER,
};
pub use gradcheck::{gradient_suite, GradCheckCase, GRADCHECK_TOLERANCE};
pub use pipeline::{
    build_ranker, evaluate_run, gaze_examples, random_permutation_ndcg, rerank, run_evaluate, run_rerank,
    run_train_gaze, run_train_ranker,
};
pub use synth::{SynthConfig, SyntheticCorpus};

use crate::error::Result;
use crate::ranker::IdfTable;
use crate::tokenizer::Tokenizer;

/// Document frequencies over the wordpiece pieces of every document.
pub fn build_idf_table(collection: &[TextRecord], tokenizer: &Tokenizer) -> Result<IdfTable> {
    let vocab = tokenizer.vocab();
    IdfTable::from_documents(collection.iter().map(|r| {
        tokenizer
            .encode(&r.text)
            .ids
            .into_iter()
            .map(|id| vocab.token(id).unwrap_or_default().to_string())
            .collect::<Vec<_>>()
    }))
}
