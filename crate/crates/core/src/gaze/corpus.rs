use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Tokenizer};

/// One row of the eye-tracking corpus file.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationRecord {
    pub dataset_id: String,
    pub sentence_id: String,
    pub token: String,
    pub fixation_ms: f64,
}

/// A sentence with one standardized label per word.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence {
    pub dataset_id: String,
    pub sentence_id: String,
    pub words: Vec<String>,
    pub labels: Vec<f64>,
}

/// Framed tokens with per-token regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeExample {
    pub tokens: TokenSequence,
    pub targets: Vec<f64>,
}

impl GazeExample {
    pub fn new(tokens: TokenSequence, targets: Vec<f64>) -> Result<Self> {
        if targets.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "{} targets for {} tokens",
                targets.len(),
                tokens.len()
            )));
        }
        for (i, (&t, k)) in targets.iter().zip(&tokens.kinds).enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("target {t} at position {i} outside [0, 1]")));
            }
            if k.is_special() && t != 0.0 {
                return Err(Error::invalid(format!(
                    "special token {k:?} at position {i} has non-zero target {t}"
                )));
            }
        }
        Ok(GazeExample { tokens, targets })
    }
}

/// Min-max scales durations to [0, 1] separately for every dataset, then
/// groups records into sentences (first-appearance order). A dataset whose
/// durations are all equal maps to zeros.
pub fn standardize_fixations(records: &[FixationRecord]) -> Result<Vec<LabeledSentence>> {
    if records.is_empty() {
        return Err(Error::invalid("empty gaze corpus"));
    }
    let mut ranges: HashMap<&str, (f64, f64)> = HashMap::new();
    for r in records {
        if !(r.fixation_ms.is_finite() && r.fixation_ms >= 0.0) {
            return Err(Error::invalid(format!(
                "invalid fixation duration {} for token {:?}",
                r.fixation_ms, r.token
            )));
        }
        let e = ranges
            .entry(&r.dataset_id)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.fixation_ms);
        e.1 = e.1.max(r.fixation_ms);
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut sentences: HashMap<(String, String), LabeledSentence> = HashMap::new();
    for r in records {
        let (lo, hi) = ranges[r.dataset_id.as_str()];
        let label = if hi > lo { (r.fixation_ms - lo) / (hi - lo) } else { 0.0 };
        let key = (r.dataset_id.clone(), r.sentence_id.clone());
        let s = sentences.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            LabeledSentence {
                dataset_id: r.dataset_id.clone(),
                sentence_id: r.sentence_id.clone(),
                words: Vec::new(),
                labels: Vec::new(),
            }
        });
        s.words.push(r.token.clone());
        s.labels.push(label);
    }
    Ok(order.into_iter().map(|k| sentences.remove(&k).unwrap()).collect())
}

/// Every subword inherits its source word's label; specials get 0.
pub fn align_subword_labels(word_labels: &[f64], tokens: &TokenSequence) -> Result<Vec<f64>> {
    tokens
        .word_index
        .iter()
        .map(|w| match w {
            None => Ok(0.0),
            Some(w) => word_labels
                .get(*w)
                .copied()
                .ok_or_else(|| Error::invalid(format!("word index {w} out of range for {} labels", word_labels.len()))),
        })
        .collect()
}

/// Frames each sentence for the gaze model and aligns its labels.
pub fn build_examples(
    sentences: &[LabeledSentence],
    tokenizer: &Tokenizer,
    pad_len: usize,
) -> Result<Vec<GazeExample>> {
    sentences
        .iter()
        .map(|s| {
            let pieces = tokenizer.encode_words(&s.words);
            let tokens = tokenizer.frame_single(&pieces, pad_len);
            let targets = align_subword_labels(&s.labels, &tokens)?;
            GazeExample::new(tokens, targets)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Vocabulary, SPECIAL_TOKENS};
    use proptest::prelude::*;

    fn rec(ds: &str, sid: &str, tok: &str, ms: f64) -> FixationRecord {
        FixationRecord {
            dataset_id: ds.into(),
            sentence_id: sid.into(),
            token: tok.into(),
            fixation_ms: ms,
        }
    }

    #[test]
    fn min_max_per_dataset() {
        let s = standardize_fixations(&[
            rec("a", "1", "x", 100.0),
            rec("a", "1", "y", 200.0),
            rec("a", "1", "z", 300.0),
        ])
        .unwrap();
        assert_eq!(s[0].labels, [0.0, 0.5, 1.0]);
        let s = standardize_fixations(&[
            rec("a", "1", "x", 5.0),
            rec("a", "1", "y", 5.0),
            rec("a", "1", "z", 5.0),
        ])
        .unwrap();
        assert_eq!(s[0].labels, [0.0, 0.0, 0.0]);
        let s = standardize_fixations(&[
            rec("geco", "1", "x", 100.0),
            rec("geco", "1", "y", 400.0),
            rec("zuco", "9", "x", 10.0),
            rec("zuco", "9", "y", 20.0),
        ])
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].labels[1], 1.0);
        assert_eq!(s[1].labels[1], 1.0);
        assert!(standardize_fixations(&[]).is_err());
        assert!(standardize_fixations(&[rec("a", "1", "x", -1.0)]).is_err());
    }

    #[test]
    fn subwords_inherit_labels() {
        let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
        t.extend(["wi", "##fi", "is", "fast"]);
        let tok = Tokenizer::new(Vocabulary::from_tokens(t).unwrap());
        let pieces = tok.encode_words(&["wifi", "is"]);
        let seq = tok.frame_single(&pieces, 10);
        let targets = align_subword_labels(&[0.7, 0.2], &seq).unwrap();
        assert_eq!(targets[..5], [0.0, 0.7, 0.7, 0.2, 0.0]);
        assert_eq!(targets.len(), 10);
        assert!(targets[5..].iter().all(|&t| t == 0.0));
        assert!(align_subword_labels(&[0.7], &seq).is_err());

        let specials_only = tok.frame_single(&tok.encode_words::<&str>(&[]), 4);
        assert_eq!(align_subword_labels(&[], &specials_only).unwrap(), [0.0; 4]);
    }

    #[test]
    fn example_rejects_nonzero_special_target() {
        let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
        t.push("a");
        let tok = Tokenizer::new(Vocabulary::from_tokens(t).unwrap());
        let seq = tok.frame_single(&tok.encode("a"), 3);
        assert!(GazeExample::new(seq.clone(), vec![0.1, 0.5, 0.0]).is_err());
        assert!(GazeExample::new(seq, vec![0.0, 0.5, 0.0]).is_ok());
    }

    proptest! {
        #[test]
        fn standardization_preserves_order(ms in prop::collection::vec(0.0f64..1000.0, 2..30)) {
            let recs: Vec<_> = ms.iter().enumerate().map(|(i, &m)| rec("d", "s", &format!("w{i}"), m)).collect();
            let s = standardize_fixations(&recs).unwrap();
            let labels = &s[0].labels;
            for i in 0..ms.len() {
                prop_assert!((0.0..=1.0).contains(&labels[i]));
                for j in 0..ms.len() {
                    if ms[i] < ms[j] {
                        prop_assert!(labels[i] < labels[j]);
                    }
                }
            }
        }
    }
}
