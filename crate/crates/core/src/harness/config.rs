//! `key = value` run configuration shared by every pipeline.
//!
//! Blank lines and `#` comments are ignored. Relative paths resolve against
//! the directory of the config file. The `GAZBY_SEED` environment variable
//! overrides `seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::data::read;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::Gain;
use crate::gaze::{GazeConfig, GazeTrainConfig};
use crate::ranker::{named_enum, BiEncoderConfig, BiMode, CrossEncoderConfig, CrossMode, RankerTrainConfig};

pub const SEED_ENV: &str = "GAZBY_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankerKind {
    #[default]
    Cross,
    Bi,
}

named_enum!(RankerKind {
    Cross => "cross",
    Bi => "bi",
});

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: RankerKind,
    /// Scoring mode name; empty means the kind's default.
    pub mode: String,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub gaze: GazeConfig,
    /// Cross-encoder framing cap.
    pub max_len: usize,
    pub m_q: usize,
    pub m_d: usize,
    pub d_out: usize,
    pub shared_towers: bool,
    pub mask_gaze: Option<f64>,
    pub train: RankerTrainConfig,
    pub gaze_train: GazeTrainConfig,
    pub cv_folds: usize,
    pub vocab: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub collection: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub fixations: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub gaze_checkpoint: Option<PathBuf>,
    pub ranker_checkpoint: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub run_tag: String,
    pub k: usize,
    pub gain: Gain,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cross = CrossEncoderConfig::default();
        let bi = BiEncoderConfig::default();
        RunConfig {
            kind: RankerKind::Cross,
            mode: String::new(),
            seed: 0,
            encoder: cross.encoder,
            gaze: cross.gaze,
            max_len: cross.max_len,
            m_q: bi.m_q,
            m_d: bi.m_d,
            d_out: bi.d_out,
            shared_towers: bi.shared_towers,
            mask_gaze: bi.mask_gaze,
            train: RankerTrainConfig::default(),
            gaze_train: GazeTrainConfig::default(),
            cv_folds: 0,
            vocab: None,
            queries: None,
            collection: None,
            triples: None,
            candidates: None,
            qrels: None,
            fixations: None,
            word_vectors: None,
            gaze_checkpoint: None,
            ranker_checkpoint: None,
            run: None,
            run_tag: "gazby".into(),
            k: 10,
            gain: Gain::Exp,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::invalid(format!("{key} = {v:?}: {e}")))
}

fn opt_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected key = value"))?;
            cfg.set_in(k.trim(), v.trim(), base).map_err(|e| match e {
                Error::Invalid(m) => Error::parse(source, i + 1, m),
                e => e,
            })?;
        }
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::parse(&read(path)?, &path.display().to_string(), base)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Sets one key; paths are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_in(key, value, Path::new(""))
    }

    fn set_in(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = || Some(base.join(v));
        match key {
            "kind" => self.kind = v.parse()?,
            "mode" => self.mode = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "layers" => self.encoder.layers = num(key, v)?,
            "heads" => self.encoder.heads = num(key, v)?,
            "d_model" => self.encoder.d_model = num(key, v)?,
            "d_ff" => self.encoder.d_ff = num(key, v)?,
            "encoder_max_len" => self.encoder.max_len = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            "m_q" => self.m_q = num(key, v)?,
            "m_d" => self.m_d = num(key, v)?,
            "d_out" => self.d_out = num(key, v)?,
            "shared_towers" => self.shared_towers = num(key, v)?,
            "mask_gaze" => self.mask_gaze = opt_num(key, v)?,
            "gaze.embed_dim" => self.gaze.embed_dim = num(key, v)?,
            "gaze.lstm_hidden" => self.gaze.lstm_hidden = num(key, v)?,
            "gaze.layers" => self.gaze.layers = num(key, v)?,
            "gaze.heads" => self.gaze.heads = num(key, v)?,
            "gaze.ffn_dim" => self.gaze.ffn_dim = num(key, v)?,
            "gaze.pad_len" => self.gaze.pad_len = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "adam_eps" => self.train.adam_eps = num(key, v)?,
            "clip_norm" => self.train.clip_norm = opt_num(key, v)?,
            "freeze_gaze" => self.train.freeze_gaze = num(key, v)?,
            "max_steps" => self.train.max_steps = opt_num(key, v)?,
            "gaze.epochs" => self.gaze_train.epochs = num(key, v)?,
            "gaze.lr" => self.gaze_train.lr = num(key, v)?,
            "gaze.adam_eps" => self.gaze_train.adam_eps = num(key, v)?,
            "gaze.batch_size" => self.gaze_train.batch_size = num(key, v)?,
            "gaze.stop_below" => self.gaze_train.stop_below = opt_num(key, v)?,
            "cv_folds" => self.cv_folds = num(key, v)?,
            "vocab" => self.vocab = path(),
            "queries" => self.queries = path(),
            "collection" => self.collection = path(),
            "triples" => self.triples = path(),
            "candidates" => self.candidates = path(),
            "qrels" => self.qrels = path(),
            "fixations" => self.fixations = path(),
            "word_vectors" => self.word_vectors = path(),
            "gaze_checkpoint" => self.gaze_checkpoint = path(),
            "ranker_checkpoint" => self.ranker_checkpoint = path(),
            "run" => self.run = path(),
            "run_tag" => self.run_tag = v.to_string(),
            "k" => self.k = num(key, v)?,
            "gain" => self.gain = v.parse()?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Text that [`RunConfig::parse`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("kind", self.kind.to_string());
        if !self.mode.is_empty() {
            kv("mode", self.mode.clone());
        }
        kv("seed", self.seed.to_string());
        kv("layers", self.encoder.layers.to_string());
        kv("heads", self.encoder.heads.to_string());
        kv("d_model", self.encoder.d_model.to_string());
        kv("d_ff", self.encoder.d_ff.to_string());
        kv("encoder_max_len", self.encoder.max_len.to_string());
        kv("max_len", self.max_len.to_string());
        kv("m_q", self.m_q.to_string());
        kv("m_d", self.m_d.to_string());
        kv("d_out", self.d_out.to_string());
        kv("shared_towers", self.shared_towers.to_string());
        kv("mask_gaze", show_opt(&self.mask_gaze));
        kv("gaze.embed_dim", self.gaze.embed_dim.to_string());
        kv("gaze.lstm_hidden", self.gaze.lstm_hidden.to_string());
        kv("gaze.layers", self.gaze.layers.to_string());
        kv("gaze.heads", self.gaze.heads.to_string());
        kv("gaze.ffn_dim", self.gaze.ffn_dim.to_string());
        kv("gaze.pad_len", self.gaze.pad_len.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("lr", self.train.lr.to_string());
        kv("adam_eps", self.train.adam_eps.to_string());
        kv("clip_norm", show_opt(&self.train.clip_norm));
        kv("freeze_gaze", self.train.freeze_gaze.to_string());
        kv("max_steps", show_opt(&self.train.max_steps));
        kv("gaze.epochs", self.gaze_train.epochs.to_string());
        kv("gaze.lr", self.gaze_train.lr.to_string());
        kv("gaze.adam_eps", self.gaze_train.adam_eps.to_string());
        kv("gaze.batch_size", self.gaze_train.batch_size.to_string());
        kv("gaze.stop_below", show_opt(&self.gaze_train.stop_below));
        kv("cv_folds", self.cv_folds.to_string());
        for (k, p) in self.paths() {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("run_tag", self.run_tag.clone());
        kv("k", self.k.to_string());
        kv(
            "gain",
            match self.gain {
                Gain::Exp => "exp".into(),
                Gain::Linear => "linear".into(),
            },
        );
        s
    }

    fn paths(&self) -> [(&'static str, &Option<PathBuf>); 11] {
        [
            ("vocab", &self.vocab),
            ("queries", &self.queries),
            ("collection", &self.collection),
            ("triples", &self.triples),
            ("candidates", &self.candidates),
            ("qrels", &self.qrels),
            ("fixations", &self.fixations),
            ("word_vectors", &self.word_vectors),
            ("gaze_checkpoint", &self.gaze_checkpoint),
            ("ranker_checkpoint", &self.ranker_checkpoint),
            ("run", &self.run),
        ]
    }

    /// Checks value ranges and that every listed input file exists.
    pub fn validate(&self, inputs: &[&str]) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if self.train.batch_size == 0 || self.gaze_train.batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        for lr in [self.train.lr, self.gaze_train.lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("learning rate {lr} must be positive")));
            }
        }
        if self.run_tag.is_empty() || self.run_tag.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("run tag {:?} must be one word", self.run_tag)));
        }
        self.gaze.validate()?;
        match self.kind {
            RankerKind::Cross => self.cross_config().map(drop)?,
            RankerKind::Bi => self.bi_config().map(drop)?,
        }
        for key in inputs {
            let (_, p) = self
                .paths()
                .into_iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::invalid(format!("no path setting named {key:?}")))?;
            let p = p
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("config does not set {key}")))?;
            if !p.is_file() {
                return Err(Error::invalid(format!("{key} file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn required(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| Error::invalid(format!("config does not set {key}")))
    }

    pub fn cross_config(&self) -> Result<CrossEncoderConfig> {
        let mode = if self.mode.is_empty() {
            CrossMode::LastLayer
        } else {
            self.mode.parse()?
        };
        Ok(CrossEncoderConfig {
            encoder: self.encoder.clone(),
            gaze: self.gaze.clone(),
            mode,
            max_len: self.max_len,
        })
    }

    pub fn bi_config(&self) -> Result<BiEncoderConfig> {
        let mode = if self.mode.is_empty() {
            BiMode::MaxSim
        } else {
            self.mode.parse()?
        };
        Ok(BiEncoderConfig {
            encoder: self.encoder.clone(),
            gaze: self.gaze.clone(),
            mode,
            m_q: self.m_q,
            m_d: self.m_d,
            d_out: self.d_out,
            shared_towers: self.shared_towers,
            mask_gaze: self.mask_gaze,
        })
    }

    pub fn ranker_train(&self) -> RankerTrainConfig {
        RankerTrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn gaze_train(&self) -> GazeTrainConfig {
        GazeTrainConfig {
            seed: self.seed,
            ..self.gaze_train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("kind", "bi").unwrap();
        c.set("mode", "tfidf").unwrap();
        c.set("mask_gaze", "none").unwrap();
        c.set("max_steps", "40").unwrap();
        c.set("queries", "/data/q.tsv").unwrap();
        c.set("gain", "linear").unwrap();
        c.set("lr", "0.001").unwrap();
        let back = RunConfig::parse(&c.to_text(), "cfg", Path::new("")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("seed = 1\n\nd_model = many\n", "run.cfg", Path::new("")).unwrap_err();
        assert!(e.to_string().contains("run.cfg") && e.to_string().contains('3'), "{e}");
        assert!(RunConfig::parse("colour = red\n", "c", Path::new("")).is_err());
        assert!(RunConfig::parse("just words\n", "c", Path::new("")).is_err());
    }

    #[test]
    fn relative_paths_and_comments() {
        let c = RunConfig::parse("# data\nqueries = q.tsv   # eval set\n", "c", Path::new("/corpus")).unwrap();
        assert_eq!(c.queries, Some(PathBuf::from("/corpus/q.tsv")));
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig {
            queries: Some(dir.path().join("missing.tsv")),
            ..RunConfig::default()
        };
        assert!(c.validate(&["queries"]).is_err());
        std::fs::write(dir.path().join("missing.tsv"), "q1\tx\n").unwrap();
        c.validate(&["queries"]).unwrap();
        assert!(c.validate(&["qrels"]).is_err());
        c.mode = "maxsim".into();
        assert!(c.validate(&[]).is_err());
        c.kind = RankerKind::Bi;
        c.validate(&[]).unwrap();
        c.run_tag = "two words".into();
        assert!(c.validate(&[]).is_err());
    }
}
