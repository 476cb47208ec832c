use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    echo_encoder, echo_gaze, gaze_maxsim, load_gaze_params, named_enum, pairwise_ce_loss, parse_encoder, parse_gaze,
    unit_gaze, ConfigEcho, GazeSource, IdfTable, Ranker,
};
use crate::encoder::{Encoder, EncoderConfig, GazeInjection, Linear};
use crate::error::{Error, Result};
use crate::gaze::{GazeConfig, GazeModel};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{Pieces, Role, TokenKind, TokenSequence, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiMode {
    /// Plain MaxSim.
    Baseline,
    /// MaxSim weighted by query and document gaze.
    MaxSim,
    /// Gaze-modulated last layer in both towers, plain MaxSim.
    LastLayer,
    /// Gaze-modulated last layer and gaze-weighted MaxSim.
    Combined,
    /// MaxSim weighted by query-term idf.
    Tfidf,
}

named_enum!(BiMode {
    Baseline => "baseline",
    MaxSim => "maxsim",
    LastLayer => "last_layer",
    Combined => "combined",
    Tfidf => "tfidf",
});

impl BiMode {
    fn weights_maxsim(self) -> bool {
        matches!(self, BiMode::MaxSim | BiMode::Combined)
    }

    fn injection(self) -> GazeInjection {
        match self {
            BiMode::LastLayer | BiMode::Combined => GazeInjection::LastLayer,
            _ => GazeInjection::None,
        }
    }

    fn needs_gaze(self) -> bool {
        self.weights_maxsim() || self.injection() != GazeInjection::None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoderConfig {
    pub encoder: EncoderConfig,
    pub gaze: GazeConfig,
    pub mode: BiMode,
    /// Query length after `[MASK]` augmentation.
    pub m_q: usize,
    /// Document length cap.
    pub m_d: usize,
    /// Width of the projected matching space.
    pub d_out: usize,
    /// One encoder for both towers.
    pub shared_towers: bool,
    /// Fixed query weight for `[MASK]` positions; `None` uses predicted gaze.
    pub mask_gaze: Option<f64>,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        BiEncoderConfig {
            encoder: EncoderConfig {
                max_len: 180,
                ..EncoderConfig::default()
            },
            gaze: GazeConfig::desk(),
            mode: BiMode::MaxSim,
            m_q: 32,
            m_d: 180,
            d_out: 32,
            shared_towers: true,
            mask_gaze: Some(1.0),
        }
    }
}

/// One encoded side of a pair: participating rows and their gaze.
struct Tower {
    rows: Var,
    gaze: Option<Var>,
    seq: TokenSequence,
}

/// Late-interaction bi-encoder scored with (gaze-weighted) MaxSim.
#[derive(Debug, Clone)]
pub struct BiEncoder {
    cfg: BiEncoderConfig,
    tokenizer: Tokenizer,
    query_encoder: Encoder,
    doc_encoder: Option<Encoder>,
    projection: Linear,
    gaze: GazeModel,
    idf: Option<IdfTable>,
    store: ParamStore,
}

impl BiEncoder {
    pub fn new(cfg: BiEncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        if cfg.m_q.max(cfg.m_d) > cfg.encoder.max_len {
            return Err(Error::invalid(format!(
                "framing lengths M_q={} M_d={} exceed encoder max_len {}",
                cfg.m_q, cfg.m_d, cfg.encoder.max_len
            )));
        }
        if cfg.d_out == 0 {
            return Err(Error::invalid("projection width must be positive"));
        }
        if let Some(g) = cfg.mask_gaze {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::invalid(format!("mask gaze {g} outside [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = tokenizer.vocab().len();
        let query_encoder = Encoder::new(cfg.encoder.clone(), v, &mut store, "encoder", &mut rng)?;
        let doc_encoder = if cfg.shared_towers {
            None
        } else {
            Some(Encoder::new(
                cfg.encoder.clone(),
                v,
                &mut store,
                "doc_encoder",
                &mut rng,
            )?)
        };
        let projection = Linear::new(
            &mut store,
            "projection",
            cfg.encoder.d_model,
            cfg.d_out,
            false,
            &mut rng,
        )?;
        let gaze = GazeModel::new(cfg.gaze.clone(), v, &mut store, "gaze", &mut rng)?;
        store.quantize_f32();
        Ok(BiEncoder {
            cfg,
            tokenizer,
            query_encoder,
            doc_encoder,
            projection,
            gaze,
            idf: None,
            store,
        })
    }

    pub fn from_echo(echo: &ConfigEcho, tokenizer: Tokenizer) -> Result<Self> {
        if echo.raw("kind") != Some("bi") {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {:?} is not a bi-encoder",
                echo.raw("kind")
            )));
        }
        let vocab: usize = echo.get("vocab_size")?;
        if vocab != tokenizer.vocab().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocabulary has {vocab} entries, tokenizer has {}",
                tokenizer.vocab().len()
            )));
        }
        let mask_gaze = match echo.raw("mask_gaze") {
            Some("predicted") => None,
            _ => Some(echo.get("mask_gaze")?),
        };
        let cfg = BiEncoderConfig {
            encoder: parse_encoder(echo, "encoder")?,
            gaze: parse_gaze(echo)?,
            mode: echo.get("mode")?,
            m_q: echo.get("m_q")?,
            m_d: echo.get("m_d")?,
            d_out: echo.get("d_out")?,
            shared_towers: echo.get("shared_towers")?,
            mask_gaze,
        };
        Self::new(cfg, tokenizer, 0)
    }

    pub fn config(&self) -> &BiEncoderConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: BiMode) {
        self.cfg.mode = mode;
    }

    pub fn set_idf(&mut self, idf: IdfTable) {
        self.idf = Some(idf);
    }

    pub fn idf(&self) -> Option<&IdfTable> {
        self.idf.as_ref()
    }

    pub fn gaze_model(&self) -> &GazeModel {
        &self.gaze
    }

    pub fn load_gaze(&mut self, gaze: &ParamStore) -> Result<()> {
        load_gaze_params(&mut self.store, gaze)
    }

    fn tower(&self, tape: &mut Tape, p: &Pieces, role: Role, mode: BiMode, source: GazeSource) -> Result<Tower> {
        if role == Role::Query && p.is_empty() {
            return Err(Error::invalid("empty query"));
        }
        let seq = self.tokenizer.frame_bi(p, role, self.cfg.m_q, self.cfg.m_d)?;
        let gaze = if mode.needs_gaze() {
            Some(match source {
                GazeSource::Predicted => self.gaze.forward(tape, &seq)?,
                GazeSource::Unit => unit_gaze(tape, seq.len()),
            })
        } else {
            None
        };
        let encoder = match (role, &self.doc_encoder) {
            (Role::Document, Some(e)) => e,
            _ => &self.query_encoder,
        };
        let injection = mode.injection();
        let h = encoder.encode(tape, &seq, gaze.filter(|_| injection != GazeInjection::None), injection)?;
        let proj = self.projection.forward(tape, h)?;
        let rows = tape.l2_normalize_rows(proj)?;
        Ok(Tower { rows, gaze, seq })
    }

    /// MaxSim-family score under an explicit mode and gaze source.
    pub fn score_with(&self, tape: &mut Tape, q: &Pieces, d: &Pieces, mode: BiMode, source: GazeSource) -> Result<Var> {
        let qt = self.tower(tape, q, Role::Query, mode, source)?;
        let dt = self.tower(tape, d, Role::Document, mode, source)?;
        let q_idx = query_positions(&qt.seq);
        let d_idx: Vec<usize> = (0..dt.seq.len())
            .filter(|&j| dt.seq.kinds[j] != TokenKind::Pad)
            .collect();
        let eq = tape.gather(qt.rows, &q_idx)?;
        let ed = tape.gather(dt.rows, &d_idx)?;
        let (wq, gd) = if mode.weights_maxsim() {
            let gq = tape.gather(qt.gaze.unwrap(), &q_idx)?;
            let wq = match self.cfg.mask_gaze {
                Some(fixed) => {
                    let is_mask: Vec<bool> = q_idx.iter().map(|&i| qt.seq.kinds[i] == TokenKind::Mask).collect();
                    let keep = Tensor::vector(is_mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect());
                    let add = Tensor::vector(is_mask.iter().map(|&m| if m { fixed } else { 0.0 }).collect());
                    let kept = tape.mul_const(gq, keep)?;
                    let add = tape.input(add);
                    tape.add(kept, add)?
                }
                None => gq,
            };
            (Some(wq), Some(tape.gather(dt.gaze.unwrap(), &d_idx)?))
        } else if mode == BiMode::Tfidf {
            let idf = self
                .idf
                .as_ref()
                .ok_or_else(|| Error::invalid("tfidf mode needs an idf table"))?;
            let w = q_idx
                .iter()
                .map(|&i| match qt.seq.kinds[i] {
                    TokenKind::Regular | TokenKind::Unk => {
                        idf.idf(self.tokenizer.vocab().token(qt.seq.ids[i]).unwrap_or_default())
                    }
                    _ => 1.0,
                })
                .collect();
            (Some(tape.input(Tensor::vector(w))), None)
        } else {
            (None, None)
        };
        let s = gaze_maxsim(tape, eq, ed, wq, gd)?;
        tape.reshape(s, &[1])
    }

    pub fn score_text_with(&self, q: &str, d: &str, mode: BiMode, source: GazeSource) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let s = self.score_with(
            &mut tape,
            &self.tokenizer.encode(q),
            &self.tokenizer.encode(d),
            mode,
            source,
        )?;
        Ok(tape.value(s).item())
    }

    /// Projected, normalized rows of the participating query and document
    /// positions, plus the per-row query token ids.
    pub fn embeddings(&self, q: &str, d: &str, mode: BiMode) -> Result<(Tensor, Tensor, Vec<u32>)> {
        let mut tape = Tape::new(&self.store);
        let qt = self.tower(
            &mut tape,
            &self.tokenizer.encode(q),
            Role::Query,
            mode,
            GazeSource::Unit,
        )?;
        let dt = self.tower(
            &mut tape,
            &self.tokenizer.encode(d),
            Role::Document,
            mode,
            GazeSource::Unit,
        )?;
        let q_idx = query_positions(&qt.seq);
        let d_idx: Vec<usize> = (0..dt.seq.len())
            .filter(|&j| dt.seq.kinds[j] != TokenKind::Pad)
            .collect();
        let eq = tape.gather(qt.rows, &q_idx)?;
        let ed = tape.gather(dt.rows, &d_idx)?;
        Ok((
            tape.value(eq).clone(),
            tape.value(ed).clone(),
            q_idx.iter().map(|&i| qt.seq.ids[i]).collect(),
        ))
    }
}

/// Query rows summed by MaxSim: text, `[Q]` and `[MASK]`; never
/// `[CLS]`, `[SEP]` or `[PAD]`.
fn query_positions(seq: &TokenSequence) -> Vec<usize> {
    (0..seq.len())
        .filter(|&i| {
            matches!(
                seq.kinds[i],
                TokenKind::Regular | TokenKind::Unk | TokenKind::QMark | TokenKind::Mask
            )
        })
        .collect()
}

impl Ranker for BiEncoder {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn score_tape(&self, tape: &mut Tape, q: &Pieces, d: &Pieces) -> Result<Var> {
        self.score_with(tape, q, d, self.cfg.mode, GazeSource::Predicted)
    }

    fn triple_loss(&self, tape: &mut Tape, q: &Pieces, pos: &Pieces, neg: &Pieces) -> Result<Var> {
        let sp = self.score_tape(tape, q, pos)?;
        let sn = self.score_tape(tape, q, neg)?;
        pairwise_ce_loss(tape, sp, sn)
    }

    fn config_echo(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("kind".to_string(), "bi".to_string()),
            ("mode".to_string(), self.cfg.mode.to_string()),
            ("m_q".to_string(), self.cfg.m_q.to_string()),
            ("m_d".to_string(), self.cfg.m_d.to_string()),
            ("d_out".to_string(), self.cfg.d_out.to_string()),
            ("shared_towers".to_string(), self.cfg.shared_towers.to_string()),
            (
                "mask_gaze".to_string(),
                self.cfg.mask_gaze.map_or("predicted".to_string(), |g| g.to_string()),
            ),
            ("vocab_size".to_string(), self.tokenizer.vocab().len().to_string()),
        ];
        echo_encoder(&mut out, "encoder", &self.cfg.encoder);
        echo_gaze(&mut out, &self.cfg.gaze);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions};
    use crate::ranker::maxsim_values;
    use crate::tokenizer::tests::toy_vocab;

    fn small() -> BiEncoderConfig {
        BiEncoderConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 2,
                d_model: 8,
                d_ff: 16,
                max_len: 12,
                attn_dropout: 0.0,
            },
            gaze: GazeConfig {
                embed_dim: 8,
                lstm_hidden: 4,
                layers: 1,
                heads: 2,
                ffn_dim: 8,
                pad_len: 10,
            },
            mode: BiMode::MaxSim,
            m_q: 8,
            m_d: 12,
            d_out: 6,
            shared_towers: true,
            mask_gaze: Some(1.0),
        }
    }

    #[test]
    fn unit_gaze_reduces_to_baseline() {
        let m = BiEncoder::new(small(), Tokenizer::new(toy_vocab()), 2).unwrap();
        let base = m
            .score_text_with("what is wifi", "blue tooth x y", BiMode::Baseline, GazeSource::Unit)
            .unwrap();
        for mode in [BiMode::MaxSim, BiMode::LastLayer, BiMode::Combined] {
            let s = m
                .score_text_with("what is wifi", "blue tooth x y", mode, GazeSource::Unit)
                .unwrap();
            assert!((s - base).abs() < 1e-12, "{mode}: {s} vs {base}");
        }
        let (eq, ed, _) = m
            .embeddings("what is wifi", "blue tooth x y", BiMode::Baseline)
            .unwrap();
        assert_eq!(eq.rows(), 1 + 3 + 2);
        assert!((maxsim_values(&eq, &ed).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn tfidf_requires_table_and_reduces_with_unit_idf() {
        let mut m = BiEncoder::new(small(), Tokenizer::new(toy_vocab()), 2).unwrap();
        assert!(m
            .score_text_with("a b", "c", BiMode::Tfidf, GazeSource::Predicted)
            .is_err());
        let all = toy_vocab().tokens().to_vec();
        m.set_idf(IdfTable::from_documents([all.clone(), all]).unwrap());
        let a = m
            .score_text_with("a b", "c e", BiMode::Tfidf, GazeSource::Predicted)
            .unwrap();
        let b = m
            .score_text_with("a b", "c e", BiMode::Baseline, GazeSource::Predicted)
            .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shared_and_separate_towers() {
        let mut cfg = small();
        cfg.shared_towers = false;
        let m = BiEncoder::new(cfg, Tokenizer::new(toy_vocab()), 2).unwrap();
        assert!(m.store().id("doc_encoder.embed.token").is_some());
        assert!(m.score("a", "b c").unwrap().is_finite());
        let echo = ConfigEcho::new(m.config_echo());
        assert!(
            !BiEncoder::from_echo(&echo, Tokenizer::new(toy_vocab()))
                .unwrap()
                .cfg
                .shared_towers
        );
    }

    #[test]
    fn empty_query_rejected() {
        let m = BiEncoder::new(small(), Tokenizer::new(toy_vocab()), 2).unwrap();
        assert!(m.score("", "a").is_err());
        assert!(m.score("a", "").is_ok());
    }

    #[test]
    fn pairwise_gradient_through_gaze() {
        let mut m = BiEncoder::new(small(), Tokenizer::new(toy_vocab()), 2).unwrap();
        let tok = m.tokenizer.clone();
        let (q, p, n) = (tok.encode("what is"), tok.encode("wifi x"), tok.encode("y z"));
        let model = m.clone();
        let report = finite_difference_check(
            m.store_mut(),
            |t| model.triple_loss(t, &q, &p, &n),
            &GradCheckOptions {
                eps: 1e-5,
                coords_per_param: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
