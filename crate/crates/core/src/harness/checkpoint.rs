//! Checkpoint files: a text manifest followed by a little-endian f32 payload.
//!
//! ```text
//! gazby-checkpoint 1
//! config kind=cross
//! config encoder.d_model=64
//! param encoder.embed.token 120x64 0
//! param head.b 2 30720
//! payload 30728
//! <payload bytes>
//! ```
//!
//! Offsets and the payload length are in bytes; values are row-major.

use std::fmt::Write as _;
use std::path::Path;

use super::data::write;
use crate::error::{Error, Result};
use crate::gaze::{GazeConfig, GazePredictor};
use crate::numerics::{ParamStore, Tensor};
use crate::ranker::{echo_gaze, BiEncoder, ConfigEcho, CrossEncoder, Ranker};
use crate::tokenizer::Tokenizer;

const MAGIC: &str = "gazby-checkpoint 1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub echo: ConfigEcho,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_checkpoint(echo: &[(String, String)], store: &ParamStore) -> Result<Vec<u8>> {
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    for (k, v) in echo {
        if k.contains(['=', '\n', ' ']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable config entry {k:?}={v:?}")));
        }
        let _ = writeln!(header, "config {k}={v}");
    }
    let mut payload = Vec::with_capacity(store.num_values() * 4);
    for (_, p) in store.iter() {
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {} before saving", p.name)));
        }
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(header, "param {} {} {}", p.name, shape.join("x"), payload.len());
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let _ = writeln!(header, "payload {}", payload.len());
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest ends without a payload line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err(bad("not a gazby checkpoint".into()));
    }
    let mut echo = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let payload_len = loop {
        let line = next_line()?;
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "config" => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("malformed config line {line:?}")))?;
                echo.push((k.to_string(), v.to_string()));
            }
            "param" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("malformed param line {line:?}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset = f[2].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                manifest.push((f[0].to_string(), shape, offset));
            }
            "payload" => {
                break rest
                    .parse::<usize>()
                    .map_err(|_| bad(format!("bad payload length {rest:?}")))?
            }
            _ => return Err(bad(format!("unexpected manifest line {line:?}"))),
        }
    };
    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        log::debug!("payload holds {} bytes, manifest declares {payload_len}", payload.len());
    }
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, shape, offset) in manifest {
        if offset != expected_offset {
            return Err(bad(format!(
                "parameter {name} at offset {offset}, expected {expected_offset}"
            )));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > payload.len() {
            return Err(bad(format!(
                "payload truncated in parameter {name}: needs bytes {offset}..{end}, have {}",
                payload.len()
            )));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
        expected_offset = end;
    }
    if expected_offset != payload_len || payload.len() != payload_len {
        return Err(bad(format!(
            "payload is {} bytes, manifest declares {payload_len} and covers {expected_offset}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        echo: ConfigEcho::new(echo),
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, echo: &[(String, String)], store: &ParamStore) -> Result<()> {
    write(path, &encode_checkpoint(echo, store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

impl Checkpoint {
    /// Refuses when any key present in both echoes has a different value.
    pub fn check_echo(&self, current: &[(String, String)]) -> Result<()> {
        let diffs: Vec<String> = current
            .iter()
            .filter_map(|(k, v)| match self.echo.raw(k) {
                Some(saved) if saved != v => Some(format!("{k}: checkpoint {saved}, current {v}")),
                _ => None,
            })
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("config mismatch ({})", diffs.join("; "))))
        }
    }

    /// Overwrites every parameter of `store`; names and shapes must match
    /// exactly.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Either ranker, as reconstructed from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyRanker {
    Cross(CrossEncoder),
    Bi(BiEncoder),
}

impl AnyRanker {
    pub fn ranker(&self) -> &dyn Ranker {
        match self {
            AnyRanker::Cross(m) => m,
            AnyRanker::Bi(m) => m,
        }
    }

    pub fn ranker_mut(&mut self) -> &mut dyn Ranker {
        match self {
            AnyRanker::Cross(m) => m,
            AnyRanker::Bi(m) => m,
        }
    }

    /// Switches the scoring mode by name.
    pub fn set_mode(&mut self, mode: &str) -> Result<()> {
        match self {
            AnyRanker::Cross(m) => m.set_mode(mode.parse()?),
            AnyRanker::Bi(m) => m.set_mode(mode.parse()?),
        }
        Ok(())
    }

    pub fn load_gaze(&mut self, gaze: &ParamStore) -> Result<()> {
        match self {
            AnyRanker::Cross(m) => m.load_gaze(gaze),
            AnyRanker::Bi(m) => m.load_gaze(gaze),
        }
    }
}

pub fn save_ranker(path: &Path, ranker: &dyn Ranker) -> Result<()> {
    save_checkpoint(path, &ranker.config_echo(), ranker.store())
}

pub fn load_ranker(path: &Path, tokenizer: Tokenizer) -> Result<AnyRanker> {
    let ck = load_checkpoint(path)?;
    let mut model = match ck.echo.raw("kind") {
        Some("cross") => AnyRanker::Cross(CrossEncoder::from_echo(&ck.echo, tokenizer)?),
        Some("bi") => AnyRanker::Bi(BiEncoder::from_echo(&ck.echo, tokenizer)?),
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: kind {other:?} is not a ranker",
                path.display()
            )))
        }
    };
    ck.apply(model.ranker_mut().store_mut())?;
    Ok(model)
}

pub fn gaze_echo(cfg: &GazeConfig, vocab_size: usize) -> Vec<(String, String)> {
    let mut out = vec![
        ("kind".to_string(), "gaze".to_string()),
        ("vocab_size".to_string(), vocab_size.to_string()),
    ];
    echo_gaze(&mut out, cfg);
    out
}

pub fn save_gaze(path: &Path, predictor: &GazePredictor, vocab_size: usize) -> Result<()> {
    save_checkpoint(path, &gaze_echo(predictor.model.config(), vocab_size), &predictor.store)
}

/// Loads a standalone gaze model; its config comes from the checkpoint.
pub fn load_gaze(path: &Path, vocab_size: usize) -> Result<GazePredictor> {
    let ck = load_checkpoint(path)?;
    if ck.echo.raw("kind") != Some("gaze") {
        return Err(Error::Checkpoint(format!(
            "{}: kind {:?} is not a gaze model",
            path.display(),
            ck.echo.raw("kind")
        )));
    }
    let saved_vocab: usize = ck.echo.get("vocab_size")?;
    if saved_vocab != vocab_size {
        return Err(Error::Checkpoint(format!(
            "{}: gaze model built for {saved_vocab} tokens, vocabulary has {vocab_size}",
            path.display()
        )));
    }
    let cfg = crate::ranker::parse_gaze(&ck.echo)?;
    let mut p = GazePredictor::new(cfg, vocab_size, 0)?;
    ck.apply(&mut p.store)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::ranker::{CrossEncoderConfig, CrossMode};
    use crate::tokenizer::tests::toy_vocab;

    fn model(d_model: usize) -> CrossEncoder {
        let cfg = CrossEncoderConfig {
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                d_model,
                d_ff: 8,
                max_len: 16,
                attn_dropout: 0.0,
            },
            gaze: GazeConfig {
                embed_dim: 4,
                lstm_hidden: 4,
                layers: 1,
                heads: 2,
                ffn_dim: 8,
                pad_len: 10,
            },
            mode: CrossMode::AllLayers,
            max_len: 16,
        };
        CrossEncoder::new(cfg, Tokenizer::new(toy_vocab()), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model(8);
        let bytes = encode_checkpoint(&m.config_echo(), m.store()).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        let mut r = CrossEncoder::from_echo(&ck.echo, Tokenizer::new(toy_vocab())).unwrap();
        ck.apply(r.store_mut()).unwrap();
        let a = m.score("what is wifi", "blue tooth").unwrap();
        let b = r.score("what is wifi", "blue tooth").unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(encode_checkpoint(&r.config_echo(), r.store()).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_names_parameter() {
        let m = model(8);
        let bytes = encode_checkpoint(&m.config_echo(), m.store()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let e = decode_checkpoint(cut).unwrap_err().to_string();
        let last = m.store().iter().last().unwrap().1.name.clone();
        assert!(e.contains(&last), "{e}");
    }

    #[test]
    fn config_mismatch_refused() {
        let small = model(8);
        let big = model(12);
        let ck = decode_checkpoint(&encode_checkpoint(&small.config_echo(), small.store()).unwrap()).unwrap();
        let e = ck.check_echo(&big.config_echo()).unwrap_err().to_string();
        assert!(e.contains("encoder.d_model"), "{e}");
        let mut target = big.clone();
        assert!(ck.apply(target.store_mut()).is_err());
    }

    #[test]
    fn garbage_rejected() {
        assert!(decode_checkpoint(b"hello\n").is_err());
        assert!(decode_checkpoint(b"gazby-checkpoint 1\nparam a 2 0\npayload 8\n\0\0\0\0\0\0\0\0\0").is_err());
    }
}
