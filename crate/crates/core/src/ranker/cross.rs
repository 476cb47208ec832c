use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    echo_encoder, echo_gaze, load_gaze_params, named_enum, parse_encoder, parse_gaze, pointwise_bce_loss, unit_gaze,
    ConfigEcho, GazeSource, Ranker,
};
use crate::encoder::{Encoder, EncoderConfig, GazeInjection, Linear};
use crate::error::{Error, Result};
use crate::gaze::{GazeConfig, GazeModel};
use crate::numerics::{ParamStore, Tape, Var};
use crate::tokenizer::{Pieces, TokenSequence, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    /// Plain joint encoder, no gaze.
    Baseline,
    /// Embedding rows scaled by gaze before the first layer.
    FirstLayer,
    /// Gaze-modulated attention in the last layer only.
    LastLayer,
    /// Gaze-modulated attention in every layer.
    AllLayers,
}

named_enum!(CrossMode {
    Baseline => "baseline",
    FirstLayer => "first_layer",
    LastLayer => "last_layer",
    AllLayers => "all_layers",
});

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoderConfig {
    pub encoder: EncoderConfig,
    pub gaze: GazeConfig,
    pub mode: CrossMode,
    /// Framed length cap for `[CLS] q [SEP] d [SEP]`.
    pub max_len: usize,
}

impl Default for CrossEncoderConfig {
    fn default() -> Self {
        CrossEncoderConfig {
            encoder: EncoderConfig::default(),
            gaze: GazeConfig::desk(),
            mode: CrossMode::LastLayer,
            max_len: 128,
        }
    }
}

/// Joint query-document encoder with a two-way softmax head over `[CLS]`.
#[derive(Debug, Clone)]
pub struct CrossEncoder {
    cfg: CrossEncoderConfig,
    tokenizer: Tokenizer,
    encoder: Encoder,
    head: Linear,
    gaze: GazeModel,
    store: ParamStore,
}

impl CrossEncoder {
    pub fn new(cfg: CrossEncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        if cfg.max_len > cfg.encoder.max_len {
            return Err(Error::invalid(format!(
                "framing length {} exceeds encoder max_len {}",
                cfg.max_len, cfg.encoder.max_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = tokenizer.vocab().len();
        let encoder = Encoder::new(cfg.encoder.clone(), v, &mut store, "encoder", &mut rng)?;
        let head = Linear::new(&mut store, "head", cfg.encoder.d_model, 2, true, &mut rng)?;
        let gaze = GazeModel::new(cfg.gaze.clone(), v, &mut store, "gaze", &mut rng)?;
        store.quantize_f32();
        Ok(CrossEncoder {
            cfg,
            tokenizer,
            encoder,
            head,
            gaze,
            store,
        })
    }

    pub fn from_echo(echo: &ConfigEcho, tokenizer: Tokenizer) -> Result<Self> {
        if echo.raw("kind") != Some("cross") {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {:?} is not a cross-encoder",
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
        let cfg = CrossEncoderConfig {
            encoder: parse_encoder(echo, "encoder")?,
            gaze: parse_gaze(echo)?,
            mode: echo.get("mode")?,
            max_len: echo.get("max_len")?,
        };
        Self::new(cfg, tokenizer, 0)
    }

    pub fn config(&self) -> &CrossEncoderConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: CrossMode) {
        self.cfg.mode = mode;
    }

    pub fn gaze_model(&self) -> &GazeModel {
        &self.gaze
    }

    /// Replaces the attached gaze model's weights with a standalone one's.
    pub fn load_gaze(&mut self, gaze: &ParamStore) -> Result<()> {
        load_gaze_params(&mut self.store, gaze)
    }

    /// Zeroes the classification head, making every score exactly 0.5.
    pub fn zero_head(&mut self) {
        self.store.value_mut(self.head.w).data_mut().fill(0.0);
        if let Some(b) = self.head.b {
            self.store.value_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn frame(&self, q: &Pieces, d: &Pieces) -> Result<TokenSequence> {
        self.tokenizer.frame_cross(q, d, self.cfg.max_len)
    }

    /// P(relevant) under an explicit mode and gaze source.
    pub fn score_with(
        &self,
        tape: &mut Tape,
        q: &Pieces,
        d: &Pieces,
        mode: CrossMode,
        source: GazeSource,
    ) -> Result<Var> {
        let seq = self.frame(q, d)?;
        let gaze = match (mode, source) {
            (CrossMode::Baseline, _) => None,
            (_, GazeSource::Predicted) => Some(self.gaze.forward(tape, &seq)?),
            (_, GazeSource::Unit) => Some(unit_gaze(tape, seq.len())),
        };
        let mask = seq.key_mask();
        let e = self.encoder.embed(tape, &seq)?;
        let h = match mode {
            CrossMode::Baseline => self
                .encoder
                .encode_embedded(tape, e, &mask, None, GazeInjection::None)?,
            CrossMode::FirstLayer => {
                let scaled = tape.scale_rows(e, gaze.unwrap())?;
                self.encoder
                    .encode_embedded(tape, scaled, &mask, None, GazeInjection::None)?
            }
            CrossMode::LastLayer => self
                .encoder
                .encode_embedded(tape, e, &mask, gaze, GazeInjection::LastLayer)?,
            CrossMode::AllLayers => self
                .encoder
                .encode_embedded(tape, e, &mask, gaze, GazeInjection::AllLayers)?,
        };
        let cls = tape.gather(h, &[0])?;
        let logits = self.head.forward(tape, cls)?;
        let p = tape.softmax_rows(logits)?;
        let rel = tape.slice_cols(p, 1, 1)?;
        tape.reshape(rel, &[1])
    }

    pub fn score_text_with(&self, q: &str, d: &str, mode: CrossMode, source: GazeSource) -> Result<f64> {
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
}

impl Ranker for CrossEncoder {
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
        pointwise_bce_loss(tape, &[sp, sn], &[true, false])
    }

    fn config_echo(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("kind".to_string(), "cross".to_string()),
            ("mode".to_string(), self.cfg.mode.to_string()),
            ("max_len".to_string(), self.cfg.max_len.to_string()),
            ("vocab_size".to_string(), self.tokenizer.vocab().len().to_string()),
        ];
        echo_encoder(&mut out, "encoder", &self.cfg.encoder);
        echo_gaze(&mut out, &self.cfg.gaze);
        out
    }
}
