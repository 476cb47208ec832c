use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderLayer, Linear};
use crate::error::{Error, Result};
use crate::numerics::{uniform, uniform_fan_in, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct GazeConfig {
    pub embed_dim: usize,
    /// Hidden units per LSTM direction; the transformer width is twice this.
    pub lstm_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Training inputs are padded with `[PAD]` to at least this length.
    pub pad_len: usize,
}

impl Default for GazeConfig {
    fn default() -> Self {
        GazeConfig {
            embed_dim: 300,
            lstm_hidden: 128,
            layers: 4,
            heads: 4,
            ffn_dim: 512,
            pad_len: 10,
        }
    }
}

impl GazeConfig {
    /// Same topology with narrow widths, for laptop-sized runs.
    pub fn desk() -> Self {
        GazeConfig {
            embed_dim: 32,
            lstm_hidden: 16,
            layers: 4,
            heads: 4,
            ffn_dim: 64,
            pad_len: 10,
        }
    }

    pub fn d_model(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.lstm_hidden == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid(format!("degenerate gaze config {self:?}")));
        }
        if self.heads == 0 || !self.d_model().is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "gaze width {} is not divisible by {} heads",
                self.d_model(),
                self.heads
            )));
        }
        Ok(())
    }
}

/// Predicted fixation score per token, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GazeScores(Vec<f64>);

impl GazeScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("gaze score {v} outside [0, 1]")));
        }
        Ok(GazeScores(values))
    }

    pub fn uniform(n: usize, v: f64) -> Result<Self> {
        Self::new(vec![v; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
struct LstmDirection {
    hidden: usize,
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

impl LstmDirection {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(LstmDirection {
            hidden,
            w_input: store.add(format!("{name}.w_input"), uniform_fan_in(rng, input, 4 * hidden))?,
            w_hidden: store.add(format!("{name}.w_hidden"), uniform_fan_in(rng, hidden, 4 * hidden))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]))?,
        })
    }

    /// Hidden states in time order, `n × hidden`. Gate layout: i, f, g, o.
    fn run(&self, tape: &mut Tape, x: Var, reverse: bool) -> Result<Var> {
        let n = tape.shape(x)[0];
        let h = self.hidden;
        let wi = tape.param(self.w_input);
        let wh = tape.param(self.w_hidden);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, wi)?;
        let xw = tape.add_bias(xw, b)?;
        let mut outs: Vec<Option<Var>> = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in steps {
            let row = tape.gather(xw, &[t])?;
            let gates = match state {
                Some((hp, _)) => {
                    let rec = tape.matmul(hp, wh)?;
                    tape.add(row, rec)?
                }
                None => row,
            };
            let i = tape.slice_cols(gates, 0, h)?;
            let i = tape.sigmoid(i);
            let g = tape.slice_cols(gates, 2 * h, h)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h, h)?;
            let o = tape.sigmoid(o);
            let mut c = tape.mul(i, g)?;
            if let Some((_, cp)) = state {
                let f = tape.slice_cols(gates, h, h)?;
                let f = tape.sigmoid(f);
                let keep = tape.mul(f, cp)?;
                c = tape.add(c, keep)?;
            }
            let tc = tape.tanh(c);
            let hn = tape.mul(o, tc)?;
            outs[t] = Some(hn);
            state = Some((hn, c));
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.unwrap()).collect();
        tape.concat_rows(&outs)
    }
}

/// Embedding → BiLSTM → transformer layers → affine head with sigmoid.
#[derive(Debug, Clone)]
pub struct GazeModel {
    cfg: GazeConfig,
    vocab_size: usize,
    embedding: ParamId,
    forward_lstm: LstmDirection,
    backward_lstm: LstmDirection,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

impl GazeModel {
    pub fn new<R: Rng>(
        cfg: GazeConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add(join(prefix, "embed"), uniform(rng, &[vocab_size, cfg.embed_dim], 0.05))?;
        let forward_lstm = LstmDirection::new(store, &join(prefix, "lstm.fwd"), cfg.embed_dim, cfg.lstm_hidden, rng)?;
        let backward_lstm = LstmDirection::new(store, &join(prefix, "lstm.bwd"), cfg.embed_dim, cfg.lstm_hidden, rng)?;
        let d = cfg.d_model();
        let layers = (0..cfg.layers)
            .map(|l| {
                EncoderLayer::new(
                    store,
                    &join(prefix, &format!("layer{l}")),
                    d,
                    cfg.heads,
                    cfg.ffn_dim,
                    0.0,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(store, &join(prefix, "head"), d, 1, true, rng)?;
        Ok(GazeModel {
            cfg,
            vocab_size,
            embedding,
            forward_lstm,
            backward_lstm,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &GazeConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Per-token fixation scores as a length-n vector on the tape.
    pub fn forward(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        let n = seq.len();
        if n == 0 {
            return Err(Error::invalid("gaze prediction on an empty sequence"));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside gaze vocabulary of {}",
                self.vocab_size
            )));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.embedding);
        let emb = tape.gather(table, &ids)?;
        let f = self.forward_lstm.run(tape, emb, false)?;
        let b = self.backward_lstm.run(tape, emb, true)?;
        let mut h = tape.concat_cols(&[f, b])?;
        let mask = seq.key_mask();
        for layer in &self.layers {
            h = layer.forward(tape, h, &mask, None)?;
        }
        let logit = self.head.forward(tape, h)?;
        let p = tape.sigmoid(logit);
        tape.reshape(p, &[n])
    }

    /// Copies pretrained vectors into the embedding rows of matching tokens.
    /// Returns how many rows were replaced.
    pub fn apply_word_vectors(
        &self,
        store: &mut ParamStore,
        vocab: &Vocabulary,
        vectors: &HashMap<String, Vec<f64>>,
    ) -> Result<usize> {
        let d = self.cfg.embed_dim;
        let table = store.value_mut(self.embedding);
        let mut n = 0;
        for (tok, v) in vectors {
            if v.len() != d {
                return Err(Error::invalid(format!(
                    "word vector for {tok:?} has {} dims, expected {d}",
                    v.len()
                )));
            }
            if let Some(id) = vocab.id(tok) {
                let row = id as usize * d;
                table.data_mut()[row..row + d].copy_from_slice(v);
                n += 1;
            }
        }
        Ok(n)
    }
}

/// A gaze model together with its own parameters.
#[derive(Debug, Clone)]
pub struct GazePredictor {
    pub model: GazeModel,
    pub store: ParamStore,
}

impl GazePredictor {
    pub fn new(cfg: GazeConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = GazeModel::new(cfg, vocab_size, &mut store, "", &mut rng)?;
        store.quantize_f32();
        Ok(GazePredictor { model, store })
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<GazeScores> {
        predict_gaze(seq, &self.model, &self.store)
    }

    /// Sets the head so every prediction equals `sigmoid(bias)`.
    pub fn set_constant_head(&mut self, bias: f64) {
        let head = self.model.head.clone();
        self.store.value_mut(head.w).data_mut().fill(0.0);
        if let Some(b) = head.b {
            self.store.value_mut(b).data_mut().fill(bias);
        }
    }
}

pub fn predict_gaze(seq: &TokenSequence, model: &GazeModel, store: &ParamStore) -> Result<GazeScores> {
    let mut tape = Tape::new(store);
    let g = model.forward(&mut tape, seq)?;
    let values = tape.value(g).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gaze prediction".into()));
    }
    GazeScores::new(values)
}

/// Parses `token v1 … vD` lines. Every line must carry `dim` values.
pub fn parse_word_vectors(text: &str, dim: usize, source: &str) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let tok = parts.next().unwrap().to_string();
        let v: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| Error::parse(source, i + 1, format!("bad float {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(Error::parse(
                source,
                i + 1,
                format!("expected {dim} values, got {}", v.len()),
            ));
        }
        out.insert(tok, v);
    }
    Ok(out)
}

pub fn load_word_vectors(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text, dim, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions};
    use crate::tokenizer::tests::toy_vocab;
    use crate::tokenizer::Tokenizer;

    fn tiny() -> GazeConfig {
        GazeConfig {
            embed_dim: 6,
            lstm_hidden: 4,
            layers: 2,
            heads: 2,
            ffn_dim: 8,
            pad_len: 6,
        }
    }

    #[test]
    fn output_shape_and_range() {
        let tok = Tokenizer::new(toy_vocab());
        let p = GazePredictor::new(tiny(), tok.vocab().len(), 1).unwrap();
        for n in [1usize, 2, 7, 40] {
            let words: Vec<&str> = std::iter::repeat_n("wifi", n).collect();
            let mut seq = tok.frame_single(&tok.encode_words(&words), 0);
            seq.ids.truncate(n);
            seq.kinds.truncate(n);
            seq.word_index.truncate(n);
            let g = p.predict(&seq).unwrap();
            assert_eq!(g.len(), n);
            assert!(g.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let tok = Tokenizer::new(toy_vocab());
        let seq = tok.frame_single(&tok.encode("what is wifi"), 10);
        let a = GazePredictor::new(tiny(), tok.vocab().len(), 9)
            .unwrap()
            .predict(&seq)
            .unwrap();
        let b = GazePredictor::new(tiny(), tok.vocab().len(), 9)
            .unwrap()
            .predict(&seq)
            .unwrap();
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_sequence_rejected() {
        let tok = Tokenizer::new(toy_vocab());
        let p = GazePredictor::new(tiny(), tok.vocab().len(), 1).unwrap();
        let mut seq = tok.frame_single(&tok.encode("a"), 0);
        seq.ids.clear();
        seq.kinds.clear();
        seq.word_index.clear();
        assert!(p.predict(&seq).is_err());
    }

    #[test]
    fn constant_head() {
        let tok = Tokenizer::new(toy_vocab());
        let mut p = GazePredictor::new(tiny(), tok.vocab().len(), 1).unwrap();
        p.set_constant_head(0.0);
        let g = p.predict(&tok.frame_single(&tok.encode("a b"), 5)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn word_vectors_fill_rows() {
        let tok = Tokenizer::new(toy_vocab());
        let mut p = GazePredictor::new(tiny(), tok.vocab().len(), 1).unwrap();
        let table = parse_word_vectors("wifi 1 2 3 4 5 6\nnotinvocab 0 0 0 0 0 0\n", 6, "t").unwrap();
        let model = p.model.clone();
        assert_eq!(model.apply_word_vectors(&mut p.store, tok.vocab(), &table).unwrap(), 1);
        let id = tok.vocab().id("wifi").unwrap() as usize;
        assert_eq!(
            &p.store.value(model.embedding()).data()[id * 6..id * 6 + 6],
            &[1., 2., 3., 4., 5., 6.]
        );
        assert!(parse_word_vectors("x 1 2\n", 6, "t").is_err());
    }

    #[test]
    fn mse_gradient_through_full_stack() {
        let tok = Tokenizer::new(toy_vocab());
        let cfg = GazeConfig {
            embed_dim: 8,
            lstm_hidden: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            pad_len: 6,
        };
        let mut p = GazePredictor::new(cfg, tok.vocab().len(), 5).unwrap();
        let seq = tok.frame_single(&tok.encode("what is wifi"), 6);
        assert_eq!(seq.len(), 6);
        let target = Tensor::vector(vec![0.0, 0.4, 0.2, 0.9, 0.0, 0.0]);
        let model = p.model.clone();
        let report = finite_difference_check(
            &mut p.store,
            |t| {
                let g = model.forward(t, &seq)?;
                let y = t.input(target.clone());
                let d = t.sub(g, y)?;
                let sq = t.square(d);
                Ok(t.mean(sq))
            },
            // Layer norm over the small LSTM activations is strongly curved;
            // eps 1e-4 leaves a truncation error right at the threshold.
            &GradCheckOptions {
                eps: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
