//! The train / rerank / evaluate pipelines driven by a [`RunConfig`].

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_gaze, load_ranker, save_gaze, save_ranker, AnyRanker};
use super::config::{RankerKind, RunConfig};
use super::data::{
    load_candidates, load_collection, load_fixations, load_queries, load_run_file, load_triples, write_run_file,
    Candidates, TextRecord,
};
use super::{build_idf_table, load_qrels_file};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ndcg_at_k, Evaluation, Gain, Qrels, RankedRun};
use crate::gaze::{
    build_examples, cross_validate_gaze, load_word_vectors, standardize_fixations, train_gaze, GazeExample,
    GazePredictor, GazeTrainReport,
};
use crate::parallel::Execution;
use crate::ranker::{train_ranker, BiEncoder, CrossEncoder, Ranker, RankerTrainReport};
use crate::tokenizer::{Tokenizer, Vocabulary};

fn tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    Ok(Tokenizer::new(Vocabulary::load(&cfg.required(&cfg.vocab, "vocab")?)?))
}

/// Standardized, framed and aligned training examples from the fixation file.
pub fn gaze_examples(cfg: &RunConfig, tokenizer: &Tokenizer) -> Result<Vec<GazeExample>> {
    let records = load_fixations(&cfg.required(&cfg.fixations, "fixations")?)?;
    build_examples(&standardize_fixations(&records)?, tokenizer, cfg.gaze.pad_len)
}

fn new_gaze_predictor(cfg: &RunConfig, tokenizer: &Tokenizer, seed: u64) -> Result<GazePredictor> {
    let mut p = GazePredictor::new(cfg.gaze.clone(), tokenizer.vocab().len(), seed)?;
    if let Some(path) = &cfg.word_vectors {
        let vectors = load_word_vectors(path, cfg.gaze.embed_dim)?;
        let n = p.model.apply_word_vectors(&mut p.store, tokenizer.vocab(), &vectors)?;
        log::info!("initialised {n} embeddings from {}", path.display());
    }
    Ok(p)
}

/// Trains the gaze model on the fixation corpus and writes its checkpoint.
/// With `cv_folds > 1` a cross-validation pass is logged first.
pub fn run_train_gaze(cfg: &RunConfig) -> Result<GazeTrainReport> {
    let mut inputs = vec!["vocab", "fixations"];
    if cfg.word_vectors.is_some() {
        inputs.push("word_vectors");
    }
    cfg.validate(&inputs)?;
    let out = cfg.required(&cfg.gaze_checkpoint, "gaze_checkpoint")?;
    let tok = tokenizer(cfg)?;
    let examples = gaze_examples(cfg, &tok)?;
    let train_cfg = cfg.gaze_train();
    if cfg.cv_folds > 1 {
        let cv = cross_validate_gaze(
            &examples,
            cfg.cv_folds,
            |f| new_gaze_predictor(cfg, &tok, cfg.seed + f as u64),
            &train_cfg,
        )?;
        log::info!("{}-fold gaze MSE {:.6} ± {:.6}", cv.folds.len(), cv.mean, cv.std);
    }
    let mut p = new_gaze_predictor(cfg, &tok, cfg.seed)?;
    let report = train_gaze(&mut p, &examples, &train_cfg)?;
    log::info!("gaze training MSE {:.6} after {} steps", report.final_mse, report.steps);
    save_gaze(&out, &p, tok.vocab().len())?;
    Ok(report)
}

/// A fresh ranker of the configured kind and mode.
pub fn build_ranker(cfg: &RunConfig, tokenizer: Tokenizer) -> Result<AnyRanker> {
    Ok(match cfg.kind {
        RankerKind::Cross => AnyRanker::Cross(CrossEncoder::new(cfg.cross_config()?, tokenizer, cfg.seed)?),
        RankerKind::Bi => AnyRanker::Bi(BiEncoder::new(cfg.bi_config()?, tokenizer, cfg.seed)?),
    })
}

fn attach_idf(cfg: &RunConfig, model: &mut AnyRanker, collection: Option<&[TextRecord]>) -> Result<()> {
    if let (AnyRanker::Bi(m), Some(coll)) = (model, collection) {
        m.set_idf(build_idf_table(coll, &m.tokenizer().clone())?);
    } else if cfg.kind == RankerKind::Bi && cfg.mode == "tfidf" {
        return Err(Error::invalid("tfidf mode needs a collection for its idf table"));
    }
    Ok(())
}

/// Trains a ranker on the triples and writes its checkpoint. An existing
/// gaze checkpoint initialises the gaze sub-model.
pub fn run_train_ranker(cfg: &RunConfig) -> Result<RankerTrainReport> {
    let mut inputs = vec!["vocab", "triples"];
    if cfg.collection.is_some() {
        inputs.push("collection");
    }
    cfg.validate(&inputs)?;
    let out = cfg.required(&cfg.ranker_checkpoint, "ranker_checkpoint")?;
    let tok = tokenizer(cfg)?;
    let triples = load_triples(&cfg.required(&cfg.triples, "triples")?)?;
    let mut model = build_ranker(cfg, tok.clone())?;
    match &cfg.gaze_checkpoint {
        Some(p) if p.is_file() => {
            let gaze = load_gaze(p, tok.vocab().len())?;
            model.load_gaze(&gaze.store)?;
        }
        _ => log::warn!("no gaze checkpoint; the gaze sub-model starts untrained"),
    }
    let collection = cfg.collection.as_deref().map(load_collection).transpose()?;
    attach_idf(cfg, &mut model, collection.as_deref())?;
    let report = train_ranker(model.ranker_mut(), &triples, &cfg.ranker_train())?;
    if let (Some(first), Some(last)) = (report.step_loss.first(), report.step_loss.last()) {
        log::info!("{} steps, batch loss {first:.4} -> {last:.4}", report.steps);
    }
    save_ranker(&out, model.ranker())?;
    Ok(report)
}

/// Scores every query's candidates and ranks them. Queries are processed in
/// id order; candidates of one query are scored under `exec`.
pub fn rerank(
    ranker: &dyn Ranker,
    queries: &[TextRecord],
    collection: &[TextRecord],
    candidates: &Candidates,
    exec: Execution,
) -> Result<RankedRun> {
    let qtext: HashMap<&str, &str> = queries.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
    let dtext: HashMap<&str, &str> = collection.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
    let mut run = RankedRun::new();
    for (qid, docs) in candidates {
        let q = qtext
            .get(qid.as_str())
            .ok_or_else(|| Error::invalid(format!("candidates name unknown query {qid}")))?;
        let texts = docs
            .iter()
            .map(|d| {
                dtext
                    .get(d.as_str())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("candidates name unknown document {d}")))
            })
            .collect::<Result<Vec<&str>>>()?;
        let scores = ranker.score_candidates(q, &texts, exec)?;
        let pairs: Vec<(&str, f64)> = docs.iter().map(String::as_str).zip(scores).collect();
        run.insert_scores(qid.clone(), &pairs)?;
    }
    Ok(run)
}

/// Loads the ranker checkpoint, re-ranks the candidates and writes the run.
pub fn run_rerank(cfg: &RunConfig) -> Result<RankedRun> {
    cfg.validate(&["vocab", "queries", "collection", "candidates", "ranker_checkpoint"])?;
    let out = cfg.required(&cfg.run, "run")?;
    let mut model = load_ranker(
        &cfg.required(&cfg.ranker_checkpoint, "ranker_checkpoint")?,
        tokenizer(cfg)?,
    )?;
    if !cfg.mode.is_empty() {
        model.set_mode(&cfg.mode)?;
    }
    let queries = load_queries(&cfg.required(&cfg.queries, "queries")?)?;
    let collection = load_collection(&cfg.required(&cfg.collection, "collection")?)?;
    let candidates = load_candidates(&cfg.required(&cfg.candidates, "candidates")?)?;
    attach_idf(cfg, &mut model, Some(&collection))?;
    let run = rerank(model.ranker(), &queries, &collection, &candidates, cfg.train.exec)?;
    write_run_file(&run, &cfg.run_tag, &out)?;
    Ok(run)
}

pub fn evaluate_run(run: &RankedRun, qrels: &Qrels, cfg: &RunConfig) -> Result<Evaluation> {
    evaluate(run, qrels, cfg.k, cfg.gain)
}

/// Scores the configured run file against the qrels.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    cfg.validate(&["run", "qrels"])?;
    let run = load_run_file(&cfg.required(&cfg.run, "run")?)?;
    let qrels = load_qrels_file(&cfg.required(&cfg.qrels, "qrels")?)?;
    evaluate_run(&run, &qrels, cfg)
}

/// Mean nDCG@k over `n` seeded random orderings of every candidate list.
pub fn random_permutation_ndcg(
    candidates: &Candidates,
    qrels: &Qrels,
    k: usize,
    gain: Gain,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let mut run = RankedRun::new();
        for (qid, docs) in candidates {
            let mut order = docs.clone();
            order.shuffle(&mut rng);
            let m = order.len() as f64;
            let scores: Vec<(&str, f64)> = order
                .iter()
                .enumerate()
                .map(|(i, d)| (d.as_str(), m - i as f64))
                .collect();
            run.insert_scores(qid.clone(), &scores)?;
        }
        total += ndcg_at_k(&run, qrels, k, gain)?.mean;
    }
    Ok(total / n as f64)
}
