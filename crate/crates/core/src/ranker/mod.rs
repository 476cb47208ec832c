//! Gaze-aware re-rankers: a joint cross-encoder and a late-interaction
//! bi-encoder, their losses and their training loop.

mod bi;
mod cross;
mod scoring;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use bi::{BiEncoder, BiEncoderConfig, BiMode};
pub use cross::{CrossEncoder, CrossEncoderConfig, CrossMode};
pub use scoring::{
    gaze_maxsim, gaze_maxsim_values, idf_maxsim_values, maxsim_values, pairwise_ce_loss, pointwise_bce_loss,
    smoothed_idf, IdfTable,
};
pub use train::{mean_triple_loss, train_ranker, RankerTrainConfig, RankerTrainReport, TrainingTriple};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gaze::GazeConfig;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::parallel::Execution;
use crate::tokenizer::{Pieces, Tokenizer};

/// Where the gaze vector of a scored sequence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GazeSource {
    /// The attached gaze model.
    #[default]
    Predicted,
    /// Every position fixed at 1.
    Unit,
}

/// Behaviour shared by both rankers, as used by training and re-ranking.
pub trait Ranker: Sync {
    fn tokenizer(&self) -> &Tokenizer;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Relevance of `d` to `q` as a length-1 vector on the tape.
    fn score_tape(&self, tape: &mut Tape, q: &Pieces, d: &Pieces) -> Result<Var>;

    /// Training loss of one (query, positive, negative) triple.
    fn triple_loss(&self, tape: &mut Tape, q: &Pieces, pos: &Pieces, neg: &Pieces) -> Result<Var>;

    /// `key=value` pairs that fully determine the parameter layout.
    fn config_echo(&self) -> Vec<(String, String)>;

    fn score_pieces(&self, q: &Pieces, d: &Pieces) -> Result<f64> {
        let mut tape = Tape::new(self.store());
        let s = self.score_tape(&mut tape, q, d)?;
        let v = tape.value(s).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("relevance score {v}")));
        }
        Ok(v)
    }

    fn score(&self, q: &str, d: &str) -> Result<f64> {
        let tok = self.tokenizer();
        self.score_pieces(&tok.encode(q), &tok.encode(d))
    }

    /// Scores every candidate for one query, preserving input order.
    fn score_candidates(&self, q: &str, docs: &[&str], exec: Execution) -> Result<Vec<f64>> {
        let tok = self.tokenizer();
        let qp = tok.encode(q);
        let pieces: Vec<Pieces> = docs.iter().map(|d| tok.encode(d)).collect();
        exec.map(&pieces, |dp| self.score_pieces(&qp, dp)).into_iter().collect()
    }
}

fn unit_gaze(tape: &mut Tape, n: usize) -> Var {
    tape.input(Tensor::full(&[n], 1.0))
}

/// Parsed `key=value` echo with typed lookups.
#[derive(Debug, Clone, Default)]
pub struct ConfigEcho(BTreeMap<String, String>);

impl ConfigEcho {
    pub fn new<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        ConfigEcho(pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Checkpoint(format!("config echo lacks {key:?}")))?;
        v.parse::<T>()
            .map_err(|e| Error::Checkpoint(format!("config echo {key}={v:?}: {e}")))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

pub(crate) fn echo_encoder(out: &mut Vec<(String, String)>, prefix: &str, c: &EncoderConfig) {
    for (k, v) in [
        ("layers", c.layers.to_string()),
        ("heads", c.heads.to_string()),
        ("d_model", c.d_model.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("max_len", c.max_len.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

pub(crate) fn parse_encoder(echo: &ConfigEcho, prefix: &str) -> Result<EncoderConfig> {
    Ok(EncoderConfig {
        layers: echo.get(&format!("{prefix}.layers"))?,
        heads: echo.get(&format!("{prefix}.heads"))?,
        d_model: echo.get(&format!("{prefix}.d_model"))?,
        d_ff: echo.get(&format!("{prefix}.d_ff"))?,
        max_len: echo.get(&format!("{prefix}.max_len"))?,
        attn_dropout: 0.0,
    })
}

pub(crate) fn echo_gaze(out: &mut Vec<(String, String)>, c: &GazeConfig) {
    for (k, v) in [
        ("embed_dim", c.embed_dim),
        ("lstm_hidden", c.lstm_hidden),
        ("layers", c.layers),
        ("heads", c.heads),
        ("ffn_dim", c.ffn_dim),
        ("pad_len", c.pad_len),
    ] {
        out.push((format!("gaze.{k}"), v.to_string()));
    }
}

pub(crate) fn parse_gaze(echo: &ConfigEcho) -> Result<GazeConfig> {
    Ok(GazeConfig {
        embed_dim: echo.get("gaze.embed_dim")?,
        lstm_hidden: echo.get("gaze.lstm_hidden")?,
        layers: echo.get("gaze.layers")?,
        heads: echo.get("gaze.heads")?,
        ffn_dim: echo.get("gaze.ffn_dim")?,
        pad_len: echo.get("gaze.pad_len")?,
    })
}

/// Copies gaze-model parameters trained standalone into a ranker's store,
/// where they live under the `gaze.` prefix.
pub(crate) fn load_gaze_params(store: &mut ParamStore, gaze: &ParamStore) -> Result<()> {
    let expected = store.iter().filter(|(_, p)| p.name.starts_with("gaze.")).count();
    let n = store.copy_matching(gaze, "gaze.")?;
    if n != expected || n != gaze.len() {
        return Err(Error::invalid(format!(
            "gaze checkpoint provides {} parameters, ranker expects {expected} ({n} matched)",
            gaze.len()
        )));
    }
    Ok(())
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = $crate::Error;

            fn from_str(s: &str) -> $crate::Result<Self> {
                let lower = s.to_ascii_lowercase().replace('-', "_");
                $ty::ALL
                    .iter()
                    .copied()
                    .find(|m| m.name() == lower)
                    .ok_or_else(|| {
                        let names: Vec<&str> = $ty::ALL.iter().map(|m| m.name()).collect();
                        $crate::Error::invalid(format!("unknown {} {s:?}; expected one of {}", stringify!($ty), names.join(", ")))
                    })
            }
        }
    };
}

pub(crate) use named_enum;
