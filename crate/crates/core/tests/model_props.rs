use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gazby::encoder::{EncoderConfig, EncoderLayer};
use gazby::gaze::{GazeConfig, GazePredictor};
use gazby::harness::{SynthConfig, SyntheticCorpus};
use gazby::numerics::{ParamStore, Tape, Tensor};
use gazby::ranker::{CrossEncoder, CrossEncoderConfig, CrossMode, GazeSource};
use gazby::tokenizer::Tokenizer;

const N: usize = 5;
const D: usize = 8;
const HEADS: usize = 2;

fn layer(seed: u64) -> (ParamStore, EncoderLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = EncoderLayer::new(&mut store, "l", D, HEADS, 16, 0.0, &mut rng).unwrap();
    (store, l)
}

fn small_corpus() -> SyntheticCorpus {
    SyntheticCorpus::generate(&SynthConfig {
        topics: 4,
        docs: 40,
        queries: 2,
        candidates: 10,
        on_topic_candidates: 5,
        train_queries: 2,
        triples: 2,
        gaze_sentences: 0,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn words(tok: &Tokenizer) -> Vec<String> {
    tok.vocab()
        .tokens()
        .iter()
        .filter(|t| t.chars().all(|c| c.is_ascii_lowercase()))
        .cloned()
        .collect()
}

fn text(words: &[String], picks: &[usize]) -> String {
    picks
        .iter()
        .map(|&i| words[i % words.len()].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one_over_real_keys(
        x in prop::collection::vec(-2.0f64..2.0, N * D),
        g in prop::collection::vec(0.0f64..1.0, N),
        pads in 0usize..N,
        seed in 0u64..100,
    ) {
        let (store, l) = layer(seed);
        let mask: Vec<bool> = (0..N).map(|j| j < N - pads).collect();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(N, D, x).unwrap());
        let gz = tape.input(Tensor::matrix(N, D / HEADS, g.iter().flat_map(|&v| [v; D / HEADS]).collect()).unwrap());
        let out = l.attention(&mut tape, x, &mask, Some(gz)).unwrap();
        for p in &out.probs {
            let p = tape.value(*p);
            for i in 0..N {
                let row = p.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for j in 0..N {
                    if !mask[j] {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gaze_scales_one_logit_column_linearly(
        x in prop::collection::vec(-2.0f64..2.0, N * D),
        g in prop::collection::vec(0.1f64..1.0, N),
        j in 0usize..N,
        c in 0.1f64..4.0,
        seed in 0u64..100,
    ) {
        let (store, l) = layer(seed);
        let mask = vec![true; N];
        let logits = |g: &[f64]| {
            let mut tape = Tape::new(&store);
            let xv = tape.input(Tensor::matrix(N, D, x.clone()).unwrap());
            let gz = tape.input(Tensor::matrix(N, D / HEADS, g.iter().flat_map(|&v| [v; D / HEADS]).collect()).unwrap());
            let out = l.attention(&mut tape, xv, &mask, Some(gz)).unwrap();
            out.logits.iter().map(|s| tape.value(*s).clone()).collect::<Vec<_>>()
        };
        let base = logits(&g);
        let mut bumped = g.clone();
        bumped[j] *= c;
        let moved = logits(&bumped);
        for (a, b) in base.iter().zip(&moved) {
            for i in 0..N {
                for k in 0..N {
                    let want = if k == j { c * a.get(i, k) } else { a.get(i, k) };
                    prop_assert!((b.get(i, k) - want).abs() <= 1e-12 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn gaze_predictions_lie_in_open_unit_interval(picks in prop::collection::vec(0usize..500, 1..12), seed in 0u64..50) {
        let corpus = small_corpus();
        let tok = corpus.tokenizer();
        let cfg = GazeConfig::desk();
        let p = GazePredictor::new(cfg.clone(), tok.vocab().len(), seed).unwrap();
        let seq = tok.frame_single(&tok.encode(&text(&words(&tok), &picks)), cfg.pad_len);
        let g = p.predict(&seq).unwrap();
        prop_assert!(g.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cross_scores_are_probabilities(
        q in prop::collection::vec(0usize..500, 1..5),
        d in prop::collection::vec(0usize..500, 1..20),
        seed in 0u64..50,
    ) {
        let corpus = small_corpus();
        let tok = corpus.tokenizer();
        let w = words(&tok);
        let cfg = CrossEncoderConfig {
            encoder: EncoderConfig { layers: 1, heads: 2, d_model: 8, d_ff: 16, max_len: 32, attn_dropout: 0.0 },
            max_len: 32,
            ..CrossEncoderConfig::default()
        };
        let m = CrossEncoder::new(cfg, tok, seed).unwrap();
        for mode in [CrossMode::Baseline, CrossMode::LastLayer, CrossMode::AllLayers, CrossMode::FirstLayer] {
            let s = m.score_text_with(&text(&w, &q), &text(&w, &d), mode, GazeSource::Predicted).unwrap();
            prop_assert!(s > 0.0 && s < 1.0, "{s}");
        }
    }
}
