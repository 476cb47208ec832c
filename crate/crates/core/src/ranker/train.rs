use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Ranker;
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, Adam, Gradients, Tape};
use crate::parallel::Execution;
use crate::tokenizer::Pieces;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriple {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

impl TrainingTriple {
    pub fn new(query: impl Into<String>, positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let t = TrainingTriple {
            query: query.into(),
            positive: positive.into(),
            negative: negative.into(),
        };
        if t.positive == t.negative {
            return Err(Error::invalid(format!(
                "triple for query {:?} has identical positive and negative",
                t.query
            )));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Keep every `gaze.*` parameter fixed.
    pub freeze_gaze: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        RankerTrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 3e-6,
            adam_eps: 1e-6,
            clip_norm: Some(1.0),
            freeze_gaze: false,
            max_steps: None,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RankerTrainReport {
    /// Mean triple loss of each mini-batch, measured before its update.
    pub step_loss: Vec<f64>,
    pub steps: u64,
}

struct Encoded {
    q: Pieces,
    pos: Pieces,
    neg: Pieces,
}

fn encode<R: Ranker + ?Sized>(ranker: &R, triples: &[TrainingTriple]) -> Vec<Encoded> {
    let tok = ranker.tokenizer();
    triples
        .iter()
        .map(|t| Encoded {
            q: tok.encode(&t.query),
            pos: tok.encode(&t.positive),
            neg: tok.encode(&t.negative),
        })
        .collect()
}

/// Mean triple loss under the current parameters.
pub fn mean_triple_loss<R: Ranker + ?Sized>(ranker: &R, triples: &[TrainingTriple], exec: Execution) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::invalid("no triples"));
    }
    let enc = encode(ranker, triples);
    let losses = exec
        .map(&enc, |e| -> Result<f64> {
            let mut tape = Tape::new(ranker.store());
            let l = ranker.triple_loss(&mut tape, &e.q, &e.pos, &e.neg)?;
            Ok(tape.value(l).item())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mini-batch Adam over triples; encoder, head and gaze parameters are
/// updated jointly unless `freeze_gaze` is set.
pub fn train_ranker<R: Ranker + ?Sized>(
    ranker: &mut R,
    triples: &[TrainingTriple],
    cfg: &RankerTrainConfig,
) -> Result<RankerTrainReport> {
    if triples.is_empty() {
        return Err(Error::invalid("train_ranker needs at least one triple"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let enc = encode(ranker, triples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.adam_eps);
    let mut order: Vec<usize> = (0..enc.len()).collect();
    let mut report = RankerTrainReport::default();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let freeze = cfg.freeze_gaze;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if report.step_loss.len() >= limit {
                break 'epochs;
            }
            let step = report.step_loss.len();
            let shared: &R = ranker;
            let results = cfg.exec.map(batch, |&i| -> Result<(f64, Gradients)> {
                let e = &enc[i];
                let mut tape = Tape::new(shared.store());
                let l = shared.triple_loss(&mut tape, &e.q, &e.pos, &e.neg)?;
                Ok((tape.value(l).item(), tape.backward(l)?))
            });
            let mut total = 0.0;
            let mut grads: Option<Gradients> = None;
            for r in results {
                let (v, g) = r.map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {step}: {msg}")),
                    e => e,
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss {v} at epoch {epoch}, step {step}")));
                }
                total += v;
                match &mut grads {
                    Some(acc) => acc.merge(g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            let store = ranker.store_mut();
            store.zero_gradients();
            store.accumulate(&grads);
            if freeze {
                for p in store.iter_mut().filter(|p| p.name.starts_with("gaze.")) {
                    p.grad.data_mut().fill(0.0);
                }
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(store, c);
            }
            adam.step(store, |name| !(freeze && name.starts_with("gaze.")));
            store.quantize_f32();
            let mean = total / batch.len() as f64;
            log::debug!("ranker epoch {epoch} step {step}: loss {mean:.6}");
            report.step_loss.push(mean);
        }
    }
    report.steps = adam.steps_taken();
    Ok(report)
}
