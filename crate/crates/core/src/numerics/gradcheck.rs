//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step for central differences; must lie in [1e-6, 1e-3].
    pub eps: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    /// Only parameters whose name starts with one of these are checked.
    /// Empty means all.
    pub prefixes: Vec<String>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            coords_per_param: Some(8),
            prefixes: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |g_analytic − g_fd| / max(1, |g_analytic|, |g_fd|)
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` records a scalar loss on the tape it is handed; it is evaluated once
/// for the analytic pass and twice per checked coordinate.
pub fn finite_difference_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "finite-difference eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = f(&mut tape)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::invalid("gradient check needs a scalar loss"));
        }
        Ok(v.item())
    };
    let base = eval(store)?;
    if eval(store)? != base {
        return Err(Error::invalid(
            "function is not deterministic: two baseline evaluations differ",
        ));
    }
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| opts.prefixes.is_empty() || opts.prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[c] = orig;
            let fd = (plus? - minus?) / (2.0 * opts.eps);
            let rel = (analytic - fd).abs() / 1f64.max(analytic.abs()).max(fd.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), c));
                }
            }
        }
    }
    Ok(report)
}
