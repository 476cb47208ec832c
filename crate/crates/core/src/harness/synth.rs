//! Seeded synthetic corpus with lexical-overlap relevance.
//!
//! Words are built from consonant-vowel syllables. Each topic owns a set of
//! words no other topic uses; documents mix words of their topic with shared
//! filler. A query is a few words of one topic and a document's grade is the
//! number of distinct query words it contains, capped at 3. Training triples
//! come from a separate pool of queries. The gaze corpus reads every word for
//! a time proportional to its length.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{format_candidates, format_fixations, format_qrels, format_records, format_triples, write};
use super::data::{Candidates, TextRecord};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::gaze::FixationRecord;
use crate::ranker::TrainingTriple;
use crate::tokenizer::{Tokenizer, Vocabulary, SPECIAL_TOKENS};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SUFFIXES: [&str; 3] = ["s", "ed", "ing"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub topics: usize,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub docs: usize,
    /// Topic words per document.
    pub doc_topic_words: usize,
    /// Filler words per document.
    pub doc_filler_words: usize,
    pub queries: usize,
    pub query_words: usize,
    pub train_queries: usize,
    pub candidates: usize,
    /// Candidates drawn from the query's own topic.
    pub on_topic_candidates: usize,
    pub triples: usize,
    pub gaze_sentences: usize,
    /// Chance that a document word carries an inflection suffix.
    pub suffix_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            topics: 25,
            words_per_topic: 10,
            filler_words: 60,
            docs: 200,
            doc_topic_words: 6,
            doc_filler_words: 6,
            queries: 50,
            query_words: 3,
            train_queries: 200,
            candidates: 20,
            on_topic_candidates: 6,
            triples: 2000,
            gaze_sentences: 2000,
            suffix_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub collection: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    pub candidates: Candidates,
    pub qrels: Qrels,
    pub triples: Vec<TrainingTriple>,
    pub fixations: Vec<FixationRecord>,
}

struct Doc {
    topic: usize,
    /// Base forms, before inflection.
    words: BTreeSet<usize>,
    text: String,
}

fn make_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(1..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.topics == 0 || cfg.docs < cfg.topics || cfg.queries == 0 {
            return Err(Error::invalid("synthetic corpus needs topics, documents and queries"));
        }
        if cfg.doc_topic_words > cfg.words_per_topic || cfg.query_words > cfg.words_per_topic {
            return Err(Error::invalid("topic word counts exceed words per topic"));
        }
        let per_topic = cfg.docs / cfg.topics;
        if cfg.on_topic_candidates > per_topic || cfg.candidates > cfg.docs || cfg.on_topic_candidates > cfg.candidates
        {
            return Err(Error::invalid("candidate counts exceed the available documents"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let words = make_words(&mut rng, cfg.topics * cfg.words_per_topic + cfg.filler_words);
        let topic_words = |t: usize| t * cfg.words_per_topic..(t + 1) * cfg.words_per_topic;
        let filler = cfg.topics * cfg.words_per_topic..words.len();

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().cloned());
        tokens.extend(SUFFIXES.iter().map(|s| format!("##{s}")));
        let vocab = Vocabulary::from_tokens(tokens)?;

        let docs: Vec<Doc> = (0..cfg.docs)
            .map(|i| {
                let topic = i % cfg.topics;
                let mut picked: Vec<usize> = topic_words(topic)
                    .collect::<Vec<_>>()
                    .choose_multiple(&mut rng, cfg.doc_topic_words)
                    .copied()
                    .collect();
                let bag: BTreeSet<usize> = picked.iter().copied().collect();
                for _ in 0..cfg.doc_filler_words {
                    picked.push(rng.gen_range(filler.clone()));
                }
                picked.shuffle(&mut rng);
                let text: Vec<String> = picked
                    .iter()
                    .map(|&w| {
                        if rng.gen_bool(cfg.suffix_rate) {
                            format!("{}{}", words[w], SUFFIXES[rng.gen_range(0..SUFFIXES.len())])
                        } else {
                            words[w].clone()
                        }
                    })
                    .collect();
                Doc {
                    topic,
                    words: bag,
                    text: text.join(" "),
                }
            })
            .collect();
        let doc_id = |i: usize| format!("d{i}");
        let collection = docs
            .iter()
            .enumerate()
            .map(|(i, d)| TextRecord {
                id: doc_id(i),
                text: d.text.clone(),
            })
            .collect();

        let make_query = |rng: &mut ChaCha8Rng, topic: usize| -> Vec<usize> {
            topic_words(topic)
                .collect::<Vec<_>>()
                .choose_multiple(rng, cfg.query_words)
                .copied()
                .collect()
        };
        let grade = |q: &[usize], d: &Doc| q.iter().filter(|w| d.words.contains(w)).count().min(3);
        let render = |q: &[usize]| q.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" ");

        let mut queries = Vec::new();
        let mut candidates = Candidates::new();
        let mut qrels = Qrels::new();
        for qi in 0..cfg.queries {
            let topic = qi % cfg.topics;
            let q = make_query(&mut rng, topic);
            let qid = format!("q{qi}");
            let (on, off): (Vec<usize>, Vec<usize>) = (0..docs.len()).partition(|&d| docs[d].topic == topic);
            let mut list: Vec<usize> = on.choose_multiple(&mut rng, cfg.on_topic_candidates).copied().collect();
            list.extend(off.choose_multiple(&mut rng, cfg.candidates - cfg.on_topic_candidates));
            list.shuffle(&mut rng);
            for &d in &list {
                qrels.insert(qid.clone(), doc_id(d), grade(&q, &docs[d]) as i64)?;
            }
            candidates.insert(qid.clone(), list.into_iter().map(doc_id).collect());
            queries.push(TextRecord {
                id: qid,
                text: render(&q),
            });
        }

        let train_queries: Vec<(usize, Vec<usize>)> = (0..cfg.train_queries)
            .map(|i| {
                let topic = i % cfg.topics;
                (topic, make_query(&mut rng, topic))
            })
            .collect();
        let mut triples = Vec::with_capacity(cfg.triples);
        while triples.len() < cfg.triples && !train_queries.is_empty() {
            let (topic, q) = &train_queries[rng.gen_range(0..train_queries.len())];
            let on: Vec<(usize, usize)> = docs
                .iter()
                .enumerate()
                .filter(|(_, d)| d.topic == *topic)
                .map(|(i, d)| (i, grade(q, d)))
                .collect();
            let best = on.iter().map(|&(_, g)| g).max().unwrap_or(0);
            if best == 0 {
                continue;
            }
            let pos_pool: Vec<&(usize, usize)> = on.iter().filter(|&&(_, g)| g >= best.min(2)).collect();
            let &&(pos, pos_grade) = pos_pool.choose(&mut rng).expect("non-empty");
            let lower: Vec<usize> = on.iter().filter(|&&(_, g)| g < pos_grade).map(|&(i, _)| i).collect();
            let neg = if !lower.is_empty() && rng.gen_bool(0.3) {
                *lower.choose(&mut rng).expect("non-empty")
            } else {
                loop {
                    let d = rng.gen_range(0..docs.len());
                    if docs[d].topic != *topic {
                        break d;
                    }
                }
            };
            triples.push(TrainingTriple::new(
                render(q),
                docs[pos].text.clone(),
                docs[neg].text.clone(),
            )?);
        }

        let mut fixations = Vec::new();
        for s in 0..cfg.gaze_sentences {
            let len = rng.gen_range(4..=9);
            for _ in 0..len {
                let w = &words[rng.gen_range(0..words.len())];
                fixations.push(FixationRecord {
                    dataset_id: "synthetic".into(),
                    sentence_id: format!("s{s}"),
                    token: w.clone(),
                    fixation_ms: 60.0 + 30.0 * w.len() as f64,
                });
            }
        }

        Ok(SyntheticCorpus {
            vocab,
            collection,
            queries,
            candidates,
            qrels,
            triples,
            fixations,
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab.clone())
    }

    /// Document texts keyed by id.
    pub fn documents(&self) -> BTreeMap<&str, &str> {
        self.collection
            .iter()
            .map(|r| (r.id.as_str(), r.text.as_str()))
            .collect()
    }

    /// Writes every corpus file plus `config.txt` pointing at them, and returns
    /// that config with paths resolved against `dir`.
    pub fn write_to(&self, dir: &Path, base: &RunConfig) -> Result<RunConfig> {
        write(&dir.join("vocab.txt"), self.vocab.to_text().as_bytes())?;
        write(&dir.join("collection.tsv"), format_records(&self.collection).as_bytes())?;
        write(&dir.join("queries.tsv"), format_records(&self.queries).as_bytes())?;
        write(
            &dir.join("candidates.tsv"),
            format_candidates(&self.candidates).as_bytes(),
        )?;
        write(&dir.join("qrels.txt"), format_qrels(&self.qrels).as_bytes())?;
        write(&dir.join("triples.tsv"), format_triples(&self.triples).as_bytes())?;
        write(&dir.join("fixations.tsv"), format_fixations(&self.fixations).as_bytes())?;
        let mut cfg = base.clone();
        for (k, v) in [
            ("vocab", "vocab.txt"),
            ("collection", "collection.tsv"),
            ("queries", "queries.tsv"),
            ("candidates", "candidates.tsv"),
            ("qrels", "qrels.txt"),
            ("triples", "triples.tsv"),
            ("fixations", "fixations.tsv"),
            ("gaze_checkpoint", "gaze.ckpt"),
            ("ranker_checkpoint", "ranker.ckpt"),
            ("run", "run.txt"),
        ] {
            cfg.set(k, v)?;
        }
        write(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
        RunConfig::parse(&cfg.to_text(), "config.txt", dir)
    }
}
