use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::GazeExample;
use super::model::{GazeModel, GazePredictor, GazeScores};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Gradients, ParamStore, Tape, Tensor, Var};
use crate::parallel::Execution;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct GazeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once an epoch's mean training loss falls below this value.
    pub stop_below: Option<f64>,
    pub exec: Execution,
}

impl Default for GazeTrainConfig {
    fn default() -> Self {
        GazeTrainConfig {
            epochs: 100,
            lr: 1e-4,
            adam_eps: 1e-8,
            batch_size: 16,
            seed: 0,
            stop_below: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GazeTrainReport {
    /// Mean per-example loss seen during each epoch, before its updates.
    pub epoch_loss: Vec<f64>,
    /// Training-set MSE of the returned parameters.
    pub final_mse: f64,
    pub steps: u64,
}

fn mse_loss(tape: &mut Tape, model: &GazeModel, ex: &GazeExample) -> Result<Var> {
    let g = model.forward(tape, &ex.tokens)?;
    let y = tape.input(Tensor::vector(ex.targets.clone()));
    let d = tape.sub(g, y)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean squared error of one example, averaged over all its positions.
pub fn example_mse(model: &GazeModel, store: &ParamStore, ex: &GazeExample) -> Result<f64> {
    let mut tape = Tape::new(store);
    let l = mse_loss(&mut tape, model, ex)?;
    Ok(tape.value(l).item())
}

/// Mean over examples of the per-example MSE.
pub fn evaluate_mse(model: &GazeModel, store: &ParamStore, examples: &[GazeExample], exec: Execution) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let losses = exec
        .map(examples, |ex| example_mse(model, store, ex))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn predict_batch(
    model: &GazeModel,
    store: &ParamStore,
    seqs: &[TokenSequence],
    exec: Execution,
) -> Result<Vec<GazeScores>> {
    exec.map(seqs, |s| super::model::predict_gaze(s, model, store))
        .into_iter()
        .collect()
}

/// Adam on the per-example MSE, averaged over each mini-batch.
pub fn train_gaze(
    predictor: &mut GazePredictor,
    examples: &[GazeExample],
    cfg: &GazeTrainConfig,
) -> Result<GazeTrainReport> {
    if examples.is_empty() {
        return Err(Error::invalid("train_gaze needs at least one example"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.adam_eps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let model = predictor.model.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let store = &predictor.store;
            let results = cfg.exec.map(batch, |&i| -> Result<(f64, Gradients)> {
                let mut tape = Tape::new(store);
                let l = mse_loss(&mut tape, &model, &examples[i])?;
                let v = tape.value(l).item();
                Ok((v, tape.backward(l)?))
            });
            let mut grads: Option<Gradients> = None;
            for r in results {
                let (v, g) = r.map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::NonFinite(format!("gaze epoch {epoch}, step {}: {msg}", adam.steps_taken()))
                    }
                    e => e,
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gaze loss {v} at epoch {epoch}, step {}",
                        adam.steps_taken()
                    )));
                }
                total += v;
                match &mut grads {
                    Some(acc) => acc.merge(g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            predictor.store.zero_gradients();
            predictor.store.accumulate(&grads);
            adam.step(&mut predictor.store, |_| true);
            predictor.store.quantize_f32();
        }
        let mean = total / examples.len() as f64;
        log::debug!("gaze epoch {epoch}: loss {mean:.6}");
        epoch_loss.push(mean);
        if cfg.stop_below.is_some_and(|t| mean < t) {
            break;
        }
    }
    let final_mse = evaluate_mse(&model, &predictor.store, examples, cfg.exec)?;
    Ok(GazeTrainReport {
        epoch_loss,
        final_mse,
        steps: adam.steps_taken(),
    })
}

#[derive(Debug, Clone)]
pub struct CrossValidationReport {
    pub fold_mse: Vec<f64>,
    /// Example indices held out in each fold.
    pub folds: Vec<Vec<usize>>,
    pub mean: f64,
    pub std: f64,
}

/// Seeded sentence-level k-fold partition.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid(format!("cross-validation needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} examples cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Trains a fresh predictor per fold and reports held-out MSE.
/// `make` builds the initial predictor for a fold index.
pub fn cross_validate_gaze<F>(
    examples: &[GazeExample],
    k: usize,
    make: F,
    cfg: &GazeTrainConfig,
) -> Result<CrossValidationReport>
where
    F: Fn(usize) -> Result<GazePredictor> + Sync + Send,
{
    let folds = kfold_partition(examples.len(), k, cfg.seed)?;
    let inner = GazeTrainConfig {
        exec: Execution::Sequential,
        ..cfg.clone()
    };
    let fold_mse = cfg
        .exec
        .map_indexed(k, |f| -> Result<f64> {
            let held: Vec<GazeExample> = folds[f].iter().map(|&i| examples[i].clone()).collect();
            let train: Vec<GazeExample> = (0..k)
                .filter(|&o| o != f)
                .flat_map(|o| folds[o].iter().map(|&i| examples[i].clone()))
                .collect();
            let mut p = make(f)?;
            train_gaze(&mut p, &train, &inner)?;
            evaluate_mse(&p.model, &p.store, &held, Execution::Sequential)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mean = fold_mse.iter().sum::<f64>() / k as f64;
    let var = fold_mse.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(CrossValidationReport {
        fold_mse,
        folds,
        mean,
        std: var.sqrt(),
    })
}
