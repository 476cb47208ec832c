//! Late-interaction scoring and the ranking losses.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Smoothed inverse document frequency over a collection of N documents:
/// `idf(t) = ln((N + 1) / (df(t) + 1)) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    n_docs: usize,
    df: HashMap<String, usize>,
}

impl IdfTable {
    /// Builds document frequencies from each document's token list.
    pub fn from_documents<I, D, S>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            let uniq: HashSet<String> = doc.into_iter().map(|t| t.as_ref().to_string()).collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::invalid("idf table over an empty collection"));
        }
        Ok(IdfTable { n_docs, df })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    pub fn idf(&self, token: &str) -> f64 {
        smoothed_idf(self.n_docs, self.df(token))
    }
}

pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((n_docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

/// `Σ_i wq(i) · max_j [ cos(q_i, d_j) · gd(j) ]` on the tape.
///
/// `eq` (qlen × d) and `ed` (dlen × d) hold the rows that take part, already
/// L2-normalized. Missing weights mean 1.
pub fn gaze_maxsim(tape: &mut Tape, eq: Var, ed: Var, wq: Option<Var>, gd: Option<Var>) -> Result<Var> {
    let (nq, nd) = (tape.shape(eq)[0], tape.shape(ed)[0]);
    for (name, w, n) in [("query", wq, nq), ("document", gd, nd)] {
        if let Some(w) = w {
            if tape.shape(w) != [n] {
                return Err(Error::invalid(format!(
                    "{name} weights of shape {:?} for {n} rows",
                    tape.shape(w)
                )));
            }
        }
    }
    let mut sim = tape.matmul_nt(eq, ed)?;
    if let Some(gd) = gd {
        sim = tape.scale_cols(sim, gd)?;
    }
    let best = tape.row_max(sim)?;
    let weighted = match wq {
        Some(w) => tape.mul(best, w)?,
        None => best,
    };
    Ok(tape.sum(weighted))
}

fn check_rows(eq: &Tensor, ed: &Tensor) -> Result<()> {
    if eq.rank() != 2 || ed.rank() != 2 || eq.cols() != ed.cols() {
        return Err(Error::Shape {
            op: "maxsim",
            left: eq.shape().to_vec(),
            right: ed.shape().to_vec(),
        });
    }
    Ok(())
}

/// Value-level form of [`gaze_maxsim`].
pub fn gaze_maxsim_values(eq: &Tensor, ed: &Tensor, gq: &[f64], gd: &[f64]) -> Result<f64> {
    check_rows(eq, ed)?;
    if gq.len() != eq.rows() || gd.len() != ed.rows() {
        return Err(Error::invalid(format!(
            "gaze lengths {}/{} for {} query and {} document rows",
            gq.len(),
            gd.len(),
            eq.rows(),
            ed.rows()
        )));
    }
    let mut s = 0.0;
    for (i, &w) in gq.iter().enumerate() {
        let q = eq.row(i);
        let best = (0..ed.rows())
            .map(|j| dot(q, ed.row(j)) * gd[j])
            .fold(f64::NEG_INFINITY, f64::max);
        s += w * best;
    }
    Ok(s)
}

pub fn maxsim_values(eq: &Tensor, ed: &Tensor) -> Result<f64> {
    gaze_maxsim_values(eq, ed, &vec![1.0; eq.rows()], &vec![1.0; ed.rows()])
}

/// `Σ_i idf(q_i) · max_j cos(q_i, d_j)` with per-row query weights.
pub fn idf_maxsim_values(eq: &Tensor, ed: &Tensor, idf: &[f64]) -> Result<f64> {
    gaze_maxsim_values(eq, ed, idf, &vec![1.0; ed.rows()])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) const BCE_CLAMP: f64 = 1e-7;

/// `−Σ_{pos} log S − Σ_{neg} log(1 − S)` over scores in (0, 1).
/// Scores are clamped to `[1e-7, 1 − 1e-7]`.
pub fn pointwise_bce_loss(tape: &mut Tape, scores: &[Var], labels: &[bool]) -> Result<Var> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&s, &rel) in scores.iter().zip(labels) {
        let v = tape.value(s).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("relevance score {v}")));
        }
        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&v) {
            log::warn!("relevance score {v} clamped for the cross-entropy loss");
        }
        let c = tape.clamp(s, BCE_CLAMP, 1.0 - BCE_CLAMP);
        let p = if rel { c } else { tape.affine(c, -1.0, 1.0) };
        let l = tape.log(p);
        let term = tape.scale(l, -1.0);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty scores");
    Ok(tape.sum(total))
}

/// `−log softmax([s_pos, s_neg])[0] = softplus(s_neg − s_pos)`.
pub fn pairwise_ce_loss(tape: &mut Tape, s_pos: Var, s_neg: Var) -> Result<Var> {
    for s in [s_pos, s_neg] {
        let v = tape.value(s);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("raw score {:?}", v.data())));
        }
    }
    let d = tape.sub(s_neg, s_pos)?;
    let l = tape.softplus(d);
    Ok(tape.sum(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, GradCheckOptions, ParamStore};
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let eq = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let ed = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = gaze_maxsim_values(&eq, &ed, &[0.5], &[0.8, 1.0]).unwrap();
        assert!((s - 0.4).abs() < 1e-12);

        let mut tape = Tape::detached();
        let (q, d) = (tape.input(eq), tape.input(ed));
        let gq = tape.input(Tensor::vector(vec![0.5]));
        let gd = tape.input(Tensor::vector(vec![0.8, 1.0]));
        let v = gaze_maxsim(&mut tape, q, d, Some(gq), Some(gd)).unwrap();
        assert!((tape.value(v).item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn idf_hand_values() {
        assert_eq!(smoothed_idf(5, 5), 1.0);
        assert!((smoothed_idf(3, 1) - (2f64.ln() + 1.0)).abs() < 1e-15);
        assert!((smoothed_idf(3, 1) - 1.6931).abs() < 1e-4);
        let t = IdfTable::from_documents([vec!["a", "b", "a"], vec!["b"], vec!["b", "c"]]).unwrap();
        assert_eq!(t.df("a"), 1);
        assert_eq!(t.df("b"), 3);
        assert_eq!(t.idf("b"), 1.0);
        assert_eq!(t.idf("zzz"), 4f64.ln() + 1.0);
        assert!(IdfTable::from_documents(Vec::<Vec<&str>>::new()).is_err());
    }

    #[test]
    fn loss_hand_values() {
        let mut tape = Tape::detached();
        let a = tape.input(Tensor::scalar(0.5));
        let b = tape.input(Tensor::scalar(0.5));
        let l = pointwise_bce_loss(&mut tape, &[a, b], &[true, false]).unwrap();
        assert!((tape.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l = pairwise_ce_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let hi = tape.input(Tensor::scalar(1.0 - 1e-12));
        let l = pointwise_bce_loss(&mut tape, &[hi], &[true]).unwrap();
        assert!(tape.value(l).item() < 1e-6);
        let big = tape.input(Tensor::scalar(60.0));
        let l = pairwise_ce_loss(&mut tape, big, a).unwrap();
        assert!(tape.value(l).item() < 1e-20);
        let nan = tape.input(Tensor::scalar(f64::NAN));
        assert!(pairwise_ce_loss(&mut tape, nan, a).is_err());
    }

    #[test]
    fn bce_gradient_signs() {
        let mut store = ParamStore::new();
        let p = store.add("s", Tensor::vector(vec![0.3, 0.6])).unwrap();
        let mut tape = Tape::new(&store);
        let s = tape.param(p);
        let s0 = tape.gather(s, &[0]).unwrap();
        let s1 = tape.gather(s, &[1]).unwrap();
        let l = pointwise_bce_loss(&mut tape, &[s0, s1], &[true, false]).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(p).unwrap().data();
        assert!(g[0] < 0.0 && g[1] > 0.0);
    }

    #[test]
    fn maxsim_gradients() {
        let mut store = ParamStore::new();
        let q = store
            .add(
                "q",
                Tensor::matrix(3, 4, (0..12).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect()).unwrap(),
            )
            .unwrap();
        let d = store
            .add(
                "d",
                Tensor::matrix(5, 4, (0..20).map(|i| ((i * 3) % 11) as f64 / 11.0 - 0.5).collect()).unwrap(),
            )
            .unwrap();
        let gq = store.add("gq", Tensor::vector(vec![0.2, 0.7, 0.9])).unwrap();
        let gd = store.add("gd", Tensor::vector(vec![0.3, 0.8, 0.5, 0.6, 0.95])).unwrap();
        let report = finite_difference_check(
            &mut store,
            |t| {
                let (q, d) = (t.param(q), t.param(d));
                let q = t.l2_normalize_rows(q)?;
                let d = t.l2_normalize_rows(d)?;
                let (gq, gd) = (t.param(gq), t.param(gd));
                gaze_maxsim(t, q, d, Some(gq), Some(gd))
            },
            &GradCheckOptions {
                coords_per_param: None,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn unit_rows(rows: usize, cols: usize, raw: Vec<f64>) -> Tensor {
        let mut t = Tensor::matrix(rows, cols, raw).unwrap();
        for r in t.data_mut().chunks_mut(cols) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    proptest! {
        #[test]
        fn maxsim_properties(
            q in prop::collection::vec(-1.0f64..1.0, 12),
            d in prop::collection::vec(-1.0f64..1.0, 16),
            gq in prop::collection::vec(0.0f64..1.0, 3),
            gd in prop::collection::vec(0.0f64..1.0, 4),
            c in 0.01f64..10.0,
        ) {
            let eq = unit_rows(3, 4, q);
            let ed = unit_rows(4, 4, d);
            let s = gaze_maxsim_values(&eq, &ed, &gq, &gd).unwrap();
            prop_assert!(s <= gq.iter().sum::<f64>() + 1e-12);
            let scaled: Vec<f64> = gq.iter().map(|g| g * c).collect();
            let sc = gaze_maxsim_values(&eq, &ed, &scaled, &gd).unwrap();
            prop_assert!((sc - c * s).abs() <= 1e-12 * (1.0 + sc.abs()));
            let perm = [2usize, 0, 3, 1];
            let ed_p = Tensor::from_rows(&perm.iter().map(|&j| ed.row(j)).collect::<Vec<_>>()).unwrap();
            let gd_p: Vec<f64> = perm.iter().map(|&j| gd[j]).collect();
            prop_assert_eq!(gaze_maxsim_values(&eq, &ed_p, &gq, &gd_p).unwrap(), s);
            prop_assert_eq!(idf_maxsim_values(&eq, &ed, &[1.0; 3]).unwrap(), maxsim_values(&eq, &ed).unwrap());
        }

        #[test]
        fn maxsim_nonnegative_for_nonnegative_rows(
            q in prop::collection::vec(0.0f64..1.0, 12),
            d in prop::collection::vec(0.0f64..1.0, 16),
            gq in prop::collection::vec(0.0f64..1.0, 3),
            gd in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let s = gaze_maxsim_values(&unit_rows(3, 4, q), &unit_rows(4, 4, d), &gq, &gd).unwrap();
            prop_assert!(s >= 0.0 && s <= gq.iter().sum::<f64>() + 1e-12);
        }
    }
}
