//! Post-norm transformer encoder with optional gaze-modulated attention.
//!
//! Gaze enters attention through the keys only: for head i,
//! `logits = Q_i (K_i ⊙ G)ᵀ / √dim` where row j of `G` repeats `g(x_j)`.
//! Scaling key j by `g(x_j)` therefore scales logit column j by the same
//! factor, so a unit gaze vector reproduces standard attention exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gaze::GazeScores;
use crate::numerics::{uniform_fan_in, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub attn_dropout: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            max_len: 128,
            attn_dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    /// BERT Large dimensions. Accepted by every constructor, never needed by tests.
    pub fn bert_large() -> Self {
        EncoderConfig {
            layers: 24,
            heads: 16,
            d_model: 1024,
            d_ff: 4096,
            max_len: 512,
            attn_dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::invalid(format!("degenerate encoder config {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::invalid("attention dropout must lie in [0, 1)"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be positive"));
        }
        Ok(())
    }
}

/// Where gaze-modulated attention is applied inside the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GazeInjection {
    None,
    LastLayer,
    AllLayers,
}

/// `y = x W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), uniform_fan_in(rng, fan_in, fan_out))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Row j of the result repeats `g[j]` across `dim` columns.
pub fn expand_gaze(g: &GazeScores, dim: usize) -> Result<Tensor> {
    if g.is_empty() {
        return Err(Error::invalid("cannot expand an empty gaze vector"));
    }
    if dim == 0 {
        return Err(Error::invalid("gaze expansion needs dim >= 1"));
    }
    let data = g.values().iter().flat_map(|&v| std::iter::repeat_n(v, dim)).collect();
    Tensor::matrix(g.len(), dim, data)
}

/// Attention output plus per-head pre-softmax logits and probabilities.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub attn_norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: Norm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(EncoderLayer {
            heads,
            d_model,
            dropout,
            query: Linear::new(store, &format!("{prefix}.attn.query"), d_model, d_model, true, rng)?,
            key: Linear::new(store, &format!("{prefix}.attn.key"), d_model, d_model, true, rng)?,
            value: Linear::new(store, &format!("{prefix}.attn.value"), d_model, d_model, true, rng)?,
            out: Linear::new(store, &format!("{prefix}.attn.out"), d_model, d_model, true, rng)?,
            attn_norm: Norm::new(store, &format!("{prefix}.attn.norm"), d_model)?,
            ff_in: Linear::new(store, &format!("{prefix}.ff.in"), d_model, d_ff, true, rng)?,
            ff_out: Linear::new(store, &format!("{prefix}.ff.out"), d_ff, d_model, true, rng)?,
            ff_norm: Norm::new(store, &format!("{prefix}.ff.norm"), d_model)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Multi-head attention followed by residual add and layer norm.
    ///
    /// `mask[j] == false` marks key j as padding. `gaze`, when present, is the
    /// `n × head_dim` gaze matrix applied to every head's keys.
    pub fn attention(&self, tape: &mut Tape, x: Var, mask: &[bool], gaze: Option<Var>) -> Result<AttentionOutput> {
        let n = tape.shape(x)[0];
        let dim = self.head_dim();
        if mask.len() != n {
            return Err(Error::invalid(format!(
                "mask length {} does not match sequence length {n}",
                mask.len()
            )));
        }
        if let Some(g) = gaze {
            if tape.shape(g) != [n, dim] {
                return Err(Error::Shape {
                    op: "gaze attention",
                    left: tape.shape(g).to_vec(),
                    right: vec![n, dim],
                });
            }
        }
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut logits = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dim, dim)?;
            let mut kh = tape.slice_cols(k, h * dim, dim)?;
            let vh = tape.slice_cols(v, h * dim, dim)?;
            if let Some(g) = gaze {
                kh = tape.mul(kh, g)?;
            }
            let scores = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(scores, scale);
            let p = tape.masked_softmax_rows(s, mask)?;
            let pd = tape.dropout(p, self.dropout)?;
            heads.push(tape.matmul(pd, vh)?);
            logits.push(s);
            probs.push(p);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let proj = self.out.forward(tape, cat)?;
        let res = tape.add(x, proj)?;
        let output = self.attn_norm.forward(tape, res)?;
        Ok(AttentionOutput { output, logits, probs })
    }

    /// Attention block then position-wise feed-forward block.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &[bool], gaze: Option<Var>) -> Result<Var> {
        let a = self.attention(tape, x, mask, gaze)?.output;
        let h = self.ff_in.forward(tape, a)?;
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, h)?;
        let res = tape.add(a, h)?;
        self.ff_norm.forward(tape, res)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    vocab_size: usize,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embedding_norm: Norm,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng>(
        cfg: EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let token_embedding = store.add(
            format!("{prefix}.embed.token"),
            uniform_fan_in(rng, d, vocab_size).transpose()?,
        )?;
        let position_embedding = store.add(
            format!("{prefix}.embed.position"),
            uniform_fan_in(rng, d, cfg.max_len).transpose()?,
        )?;
        let embedding_norm = Norm::new(store, &format!("{prefix}.embed.norm"), d)?;
        let layers = (0..cfg.layers)
            .map(|l| {
                EncoderLayer::new(
                    store,
                    &format!("{prefix}.layer{l}"),
                    d,
                    cfg.heads,
                    cfg.d_ff,
                    cfg.attn_dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg,
            vocab_size,
            token_embedding,
            position_embedding,
            embedding_norm,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// Normalized sum of token and learned absolute position embeddings.
    pub fn embed(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        let n = seq.len();
        if n == 0 {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if n > self.cfg.max_len {
            return Err(Error::invalid(format!(
                "sequence length {n} exceeds encoder max_len {}",
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside embedding table of {}",
                self.vocab_size
            )));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.token_embedding);
        let tok = tape.gather(table, &ids)?;
        let pos_table = tape.param(self.position_embedding);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(pos_table, &positions)?;
        let e = tape.add(tok, pos)?;
        self.embedding_norm.forward(tape, e)
    }

    /// Runs the layer stack. `gaze` is the per-token vector `g(x_j)`.
    pub fn encode(&self, tape: &mut Tape, seq: &TokenSequence, gaze: Option<Var>, mode: GazeInjection) -> Result<Var> {
        let e = self.embed(tape, seq)?;
        self.encode_embedded(tape, e, &seq.key_mask(), gaze, mode)
    }

    pub fn encode_embedded(
        &self,
        tape: &mut Tape,
        embedded: Var,
        mask: &[bool],
        gaze: Option<Var>,
        mode: GazeInjection,
    ) -> Result<Var> {
        let n = tape.shape(embedded)[0];
        let matrix = match (mode, gaze) {
            (GazeInjection::None, _) => None,
            (_, None) => return Err(Error::invalid(format!("gaze injection {mode:?} requires gaze scores"))),
            (_, Some(g)) => {
                if tape.shape(g) != [n] {
                    return Err(Error::invalid(format!(
                        "gaze vector of shape {:?} for a sequence of length {n}",
                        tape.shape(g)
                    )));
                }
                Some(tape.expand_cols(g, self.cfg.head_dim())?)
            }
        };
        let last = self.layers.len() - 1;
        let mut h = embedded;
        for (l, layer) in self.layers.iter().enumerate() {
            let use_gaze = match mode {
                GazeInjection::None => false,
                GazeInjection::LastLayer => l == last,
                GazeInjection::AllLayers => true,
            };
            h = layer.forward(tape, h, mask, if use_gaze { matrix } else { None })?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions};
    use crate::tokenizer::tests::toy_vocab;
    use crate::tokenizer::Tokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 16,
            attn_dropout: 0.0,
        }
    }

    #[test]
    fn expand_gaze_examples() {
        let g = GazeScores::new(vec![0.2, 0.5]).unwrap();
        let m = expand_gaze(&g, 3).unwrap();
        assert_eq!(m.data(), &[0.2, 0.2, 0.2, 0.5, 0.5, 0.5]);
        let ones = GazeScores::new(vec![1.0; 4]).unwrap();
        assert!(expand_gaze(&ones, 2).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(expand_gaze(&g, 1).unwrap().data(), g.values());
        assert!(expand_gaze(&g, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::bert_large().validate().is_ok());
    }

    #[test]
    fn unit_gaze_and_none_agree_for_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tok = Tokenizer::new(toy_vocab());
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_cfg(), tok.vocab().len(), &mut store, "enc", &mut rng).unwrap();
        let q = tok.encode("what is wifi");
        let d = tok.encode("blue tooth a b c");
        let seq = tok.frame_cross(&q, &d, 16).unwrap();
        let mut tape = Tape::new(&store);
        let base = enc.encode(&mut tape, &seq, None, GazeInjection::None).unwrap();
        let ones = tape.input(Tensor::full(&[seq.len()], 1.0));
        for mode in [GazeInjection::LastLayer, GazeInjection::AllLayers] {
            let out = enc.encode(&mut tape, &seq, Some(ones), mode).unwrap();
            assert!(tape.value(out).max_abs_diff(tape.value(base)) < 1e-12);
        }
        assert!(enc.encode(&mut tape, &seq, None, GazeInjection::LastLayer).is_err());
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tok = Tokenizer::new(toy_vocab());
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_cfg(), 5, &mut store, "enc", &mut rng).unwrap();
        let seq = tok.frame_single(&tok.encode("wifi"), 4);
        let mut tape = Tape::new(&store);
        assert!(enc.encode(&mut tape, &seq, None, GazeInjection::None).is_err());
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tok = Tokenizer::new(toy_vocab());
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            max_len: 8,
            attn_dropout: 0.0,
        };
        let enc = Encoder::new(cfg, tok.vocab().len(), &mut store, "enc", &mut rng).unwrap();
        let gaze = store
            .add("gaze_in", Tensor::vector(vec![0.3, 0.9, 0.5, 0.7, 0.2]))
            .unwrap();
        let seq = tok.frame_cross(&tok.encode("a"), &tok.encode("c"), 8).unwrap();
        assert_eq!(seq.len(), 5);
        let probe = Tensor::matrix(5, 8, (0..40).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect()).unwrap();
        let report = finite_difference_check(
            &mut store,
            |t| {
                let g = t.param(gaze);
                let out = enc.encode(t, &seq, Some(g), GazeInjection::AllLayers)?;
                let p = t.input(probe.clone());
                let prod = t.mul(out, p)?;
                Ok(t.sum(prod))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
