//! Uncased wordpiece tokenization and input framing for the three consumers:
//! the gaze model, the cross-encoder and the two bi-encoder towers.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const Q_MARK: &str = "[Q]";
pub const D_MARK: &str = "[D]";
pub const UNK: &str = "[UNK]";

pub const SPECIAL_TOKENS: [&str; 7] = [PAD, UNK, CLS, SEP, MASK, Q_MARK, D_MARK];

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Regular,
    Cls,
    Sep,
    Pad,
    Mask,
    QMark,
    DMark,
    Unk,
}

impl TokenKind {
    /// Specials are every kind that does not stand for source text.
    pub fn is_special(self) -> bool {
        !matches!(self, TokenKind::Regular | TokenKind::Unk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub mask: u32,
    pub q_mark: u32,
    pub d_mark: u32,
    pub unk: u32,
}

/// Token list read from a one-token-per-line file; the line number is the id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    specials: SpecialIds,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Vocab("empty vocabulary".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token at line {}", i + 1)));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?} at line {}", i + 1)));
            }
        }
        let get = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {s}")))
        };
        let specials = SpecialIds {
            cls: get(CLS)?,
            sep: get(SEP)?,
            pad: get(PAD)?,
            mask: get(MASK)?,
            q_mark: get(Q_MARK)?,
            d_mark: get(D_MARK)?,
            unk: get(UNK)?,
        };
        Ok(Vocabulary { tokens, ids, specials })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        Self::from_tokens(lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn kind_of(&self, id: u32) -> TokenKind {
        let s = &self.specials;
        match id {
            x if x == s.cls => TokenKind::Cls,
            x if x == s.sep => TokenKind::Sep,
            x if x == s.pad => TokenKind::Pad,
            x if x == s.mask => TokenKind::Mask,
            x if x == s.q_mark => TokenKind::QMark,
            x if x == s.d_mark => TokenKind::DMark,
            x if x == s.unk => TokenKind::Unk,
            _ => TokenKind::Regular,
        }
    }
}

/// Lower-cases and splits on whitespace and punctuation.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Greedy longest-match-first split of a single word. A word that cannot be
/// fully covered becomes a lone `[UNK]`.
pub fn wordpiece_word(word: &str, vocab: &Vocabulary) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut cand: String = chars[start..end].iter().collect();
            if start > 0 {
                cand.insert_str(0, CONTINUATION);
            }
            if vocab.id(&cand).is_some() {
                found = Some(cand);
                break;
            }
            end -= 1;
        }
        match found {
            Some(p) => pieces.push(p),
            None => return vec![UNK.to_string()],
        }
        start = end;
    }
    pieces
}

/// Wordpiece split of free text (after lower-casing and punctuation splitting).
pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<String>> {
    if vocab.is_empty() {
        return Err(Error::Vocab("empty vocabulary".into()));
    }
    Ok(basic_split(text)
        .iter()
        .flat_map(|w| wordpiece_word(w, vocab))
        .collect())
}

/// Wordpiece output with ids and the source-word ordinal of each piece.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pieces {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    pub word_index: Vec<usize>,
    /// Number of source words (an `[UNK]` word still counts).
    pub words: usize,
}

impl Pieces {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Document,
}

/// Framed model input. `word_index[i]` is `None` exactly for specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    pub word_index: Vec<Option<usize>>,
    pub qlen: usize,
    pub dlen: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` for every position that may be attended to.
    pub fn key_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|&k| k != TokenKind::Pad).collect()
    }

    pub fn pad_to(&mut self, len: usize, vocab: &Vocabulary) {
        while self.ids.len() < len {
            self.push(vocab.specials().pad, TokenKind::Pad, None);
        }
    }

    fn push(&mut self, id: u32, kind: TokenKind, word: Option<usize>) {
        self.ids.push(id);
        self.kinds.push(kind);
        self.word_index.push(word);
    }

    fn empty() -> Self {
        TokenSequence {
            ids: Vec::new(),
            kinds: Vec::new(),
            word_index: Vec::new(),
            qlen: 0,
            dlen: 0,
        }
    }

    fn extend(&mut self, p: &Pieces, take: usize, word_offset: usize) {
        for i in 0..take {
            self.push(p.ids[i], p.kinds[i], Some(p.word_index[i] + word_offset));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Arc<Vocabulary>,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Tokenizer { vocab: Arc::new(vocab) }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Pieces {
        self.encode_words(&basic_split(text))
    }

    /// Pieces for already-split words; each word keeps its own ordinal.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Pieces {
        let mut out = Pieces::default();
        for (w, word) in words.iter().enumerate() {
            for piece in wordpiece_word(&word.as_ref().to_lowercase(), &self.vocab) {
                let id = self.vocab.id(&piece).unwrap_or(self.vocab.specials().unk);
                out.ids.push(id);
                out.kinds.push(self.vocab.kind_of(id));
                out.word_index.push(w);
            }
        }
        out.words = words.len();
        out
    }

    /// `[CLS] q [SEP] d [SEP]`, truncating document pieces before query pieces.
    pub fn frame_cross(&self, q: &Pieces, d: &Pieces, max_len: usize) -> Result<TokenSequence> {
        if max_len < 4 {
            return Err(Error::invalid(format!(
                "max_len {max_len} cannot hold three specials and one query token"
            )));
        }
        if q.is_empty() {
            return Err(Error::invalid("empty query"));
        }
        let budget = max_len - 3;
        let qlen = q.len().min(budget);
        let dlen = d.len().min(budget - qlen);
        let s = self.vocab.specials();
        let mut seq = TokenSequence::empty();
        seq.push(s.cls, TokenKind::Cls, None);
        seq.extend(q, qlen, 0);
        seq.push(s.sep, TokenKind::Sep, None);
        seq.extend(d, dlen, q.words);
        seq.push(s.sep, TokenKind::Sep, None);
        seq.qlen = qlen;
        seq.dlen = dlen;
        Ok(seq)
    }

    /// Query: `[CLS] [Q] t… [SEP]` then `[MASK]` up to exactly `m_q`.
    /// Document: `[CLS] [D] t… [SEP]` then `[PAD]` up to `m_d`.
    pub fn frame_bi(&self, p: &Pieces, role: Role, m_q: usize, m_d: usize) -> Result<TokenSequence> {
        if m_q < 4 || m_d < 4 {
            return Err(Error::invalid(format!(
                "bi-encoder lengths must be at least 4, got M_q={m_q}, M_d={m_d}"
            )));
        }
        let s = self.vocab.specials();
        let (limit, marker, marker_kind, fill, fill_kind) = match role {
            Role::Query => (m_q, s.q_mark, TokenKind::QMark, s.mask, TokenKind::Mask),
            Role::Document => (m_d, s.d_mark, TokenKind::DMark, s.pad, TokenKind::Pad),
        };
        let take = p.len().min(limit - 3);
        let mut seq = TokenSequence::empty();
        seq.push(s.cls, TokenKind::Cls, None);
        seq.push(marker, marker_kind, None);
        seq.extend(p, take, 0);
        seq.push(s.sep, TokenKind::Sep, None);
        while seq.len() < limit {
            seq.push(fill, fill_kind, None);
        }
        match role {
            Role::Query => seq.qlen = take,
            Role::Document => seq.dlen = take,
        }
        Ok(seq)
    }

    /// Gaze-model framing of one sentence: `[CLS] x… [SEP]` padded with
    /// `[PAD]` to at least `pad_len`. Longer sentences are kept whole.
    pub fn frame_single(&self, p: &Pieces, pad_len: usize) -> TokenSequence {
        let s = self.vocab.specials();
        let mut seq = TokenSequence::empty();
        seq.push(s.cls, TokenKind::Cls, None);
        seq.extend(p, p.len(), 0);
        seq.push(s.sep, TokenKind::Sep, None);
        seq.qlen = p.len();
        seq.pad_to(pad_len, &self.vocab);
        seq
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy_vocab() -> Vocabulary {
        let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
        t.extend([
            "wi", "##fi", "blue", "##tooth", "a", "b", "c", "e", "f", "x", "y", "z", "what", "is", "wifi", ".", "un",
            "##aff", "##able",
        ]);
        Vocabulary::from_tokens(t).unwrap()
    }

    fn pieces(tok: &Tokenizer, words: &[&str]) -> Pieces {
        tok.encode_words(words)
    }

    fn render(tok: &Tokenizer, s: &TokenSequence) -> Vec<String> {
        s.ids
            .iter()
            .map(|&i| tok.vocab().token(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn wordpiece_examples() {
        let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
        t.extend(["wi", "##fi", "blue", "##tooth"]);
        let v = Vocabulary::from_tokens(t).unwrap();
        assert_eq!(wordpiece_word("wifi", &v), ["wi", "##fi"]);
        assert_eq!(wordpiece_word("bluetooth", &v), ["blue", "##tooth"]);
        let v = toy_vocab();
        assert_eq!(wordpiece_word("wifi", &v), ["wifi"]);
        assert_eq!(wordpiece_word("qqq", &v), [UNK]);
        assert_eq!(wordpiece_word("unaffable", &v), ["un", "##aff", "##able"]);
    }

    #[test]
    fn basic_split_lowercases_and_splits_punct() {
        assert_eq!(basic_split("What is WiFi?"), ["what", "is", "wifi", "?"]);
        assert_eq!(basic_split("  a.b  "), ["a", ".", "b"]);
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::parse("").is_err());
        assert!(Vocabulary::from_tokens(["[CLS]", "[SEP]"]).is_err());
        let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
        t.push("[CLS]");
        assert!(Vocabulary::from_tokens(t).is_err());
        let v = toy_vocab();
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap().tokens(), v.tokens());
    }

    #[test]
    fn frame_cross_examples() {
        let tok = Tokenizer::new(toy_vocab());
        let q = pieces(&tok, &["a", "b"]);
        let s = tok.frame_cross(&q, &pieces(&tok, &["c"]), 8).unwrap();
        assert_eq!(render(&tok, &s), ["[CLS]", "a", "b", "[SEP]", "c", "[SEP]"]);
        assert_eq!((s.qlen, s.dlen), (2, 1));
        let s = tok.frame_cross(&q, &Pieces::default(), 8).unwrap();
        assert_eq!(render(&tok, &s), ["[CLS]", "a", "b", "[SEP]", "[SEP]"]);
        let s = tok.frame_cross(&q, &pieces(&tok, &["c", "e", "f"]), 6).unwrap();
        assert_eq!(render(&tok, &s), ["[CLS]", "a", "b", "[SEP]", "c", "[SEP]"]);
        assert!(tok.frame_cross(&q, &Pieces::default(), 3).is_err());
    }

    #[test]
    fn frame_bi_examples() {
        let tok = Tokenizer::new(toy_vocab());
        let s = tok.frame_bi(&pieces(&tok, &["x"]), Role::Query, 6, 6).unwrap();
        assert_eq!(render(&tok, &s), ["[CLS]", "[Q]", "x", "[SEP]", "[MASK]", "[MASK]"]);
        let s = tok.frame_bi(&pieces(&tok, &["y", "z"]), Role::Document, 6, 6).unwrap();
        assert_eq!(render(&tok, &s), ["[CLS]", "[D]", "y", "z", "[SEP]", "[PAD]"]);
        let s = tok
            .frame_bi(&pieces(&tok, &["x", "y", "z"]), Role::Query, 6, 6)
            .unwrap();
        assert!(!s.kinds.contains(&TokenKind::Mask));
        assert!(tok.frame_bi(&pieces(&tok, &["x"]), Role::Query, 3, 6).is_err());
    }

    #[test]
    fn frame_single_pads_to_length() {
        let tok = Tokenizer::new(toy_vocab());
        let s = tok.frame_single(&pieces(&tok, &["wifi", "is"]), 10);
        assert_eq!(s.len(), 10);
        assert_eq!(s.kinds[4..], [TokenKind::Pad; 6]);
    }

    fn word_strategy() -> impl Strategy<Value = Vec<String>> {
        let words = [
            "a",
            "b",
            "c",
            "wifi",
            "bluetooth",
            "unaffable",
            "zzz",
            "x",
            "what",
            "is",
        ];
        prop::collection::vec(prop::sample::select(words.to_vec()), 0..12)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn frame_cross_respects_max_len(q in word_strategy(), d in word_strategy(), max_len in 4usize..20) {
            let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
            t.extend(["wi", "##fi", "blue", "##tooth", "a", "b", "c", "x", "what", "is", "un", "##aff", "##able"]);
            let tok = Tokenizer::new(Vocabulary::from_tokens(t).unwrap());
            let qp = tok.encode_words(&q);
            let dp = tok.encode_words(&d);
            prop_assume!(!qp.is_empty());
            let s = tok.frame_cross(&qp, &dp, max_len).unwrap();
            prop_assert!(s.len() <= max_len);
            prop_assert_eq!(s.ids.len(), s.kinds.len());
            prop_assert_eq!(s.ids.len(), s.word_index.len());
            prop_assert_eq!(s.kinds[0], TokenKind::Cls);
            prop_assert_eq!(s.kinds.iter().filter(|k| **k == TokenKind::Cls).count(), 1);
            let mut last = 0;
            for (k, w) in s.kinds.iter().zip(&s.word_index) {
                prop_assert_eq!(k.is_special(), w.is_none());
                if let Some(w) = w {
                    prop_assert!(*w >= last);
                    last = *w;
                }
            }
        }

        #[test]
        fn frame_bi_lengths(p in word_strategy(), m_q in 4usize..16, m_d in 4usize..16) {
            let tok = Tokenizer::new(toy_vocab());
            let pieces = tok.encode_words(&p);
            prop_assert_eq!(tok.frame_bi(&pieces, Role::Query, m_q, m_d).unwrap().len(), m_q);
            prop_assert_eq!(tok.frame_bi(&pieces, Role::Document, m_q, m_d).unwrap().len(), m_d);
        }

        #[test]
        fn pieces_reassemble_in_vocab_words(w in prop::sample::select(vec!["wifi", "bluetooth", "unaffable", "a", "what"])) {
            let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
            t.extend(["wi", "##fi", "blue", "##tooth", "a", "what", "un", "##aff", "##able"]);
            let v = Vocabulary::from_tokens(t).unwrap();
            let joined: String = wordpiece_word(w, &v).iter().map(|p| p.trim_start_matches("##")).collect();
            prop_assert_eq!(joined, w);
        }
    }
}
