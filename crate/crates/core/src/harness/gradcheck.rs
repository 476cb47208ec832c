//! The gradient verification suite run by `gazby gradcheck`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, EncoderLayer};
use crate::error::Result;
use crate::gaze::{GazeConfig, GazePredictor};
use crate::numerics::{finite_difference_check, GradCheckOptions, GradCheckReport, ParamStore, Tensor};
use crate::ranker::{
    gaze_maxsim, pairwise_ce_loss, pointwise_bce_loss, BiEncoder, BiEncoderConfig, BiMode, CrossEncoder,
    CrossEncoderConfig, CrossMode, Ranker,
};
use crate::tokenizer::{Tokenizer, Vocabulary, SPECIAL_TOKENS};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn vocab() -> Vocabulary {
    let mut t: Vec<&str> = SPECIAL_TOKENS.to_vec();
    t.extend([
        "what", "is", "wifi", "blue", "##tooth", "radio", "signal", "range", "short", "wave",
    ]);
    Vocabulary::from_tokens(t).expect("static vocabulary")
}

fn probe(rows: usize, cols: usize, seed: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| (((i + seed) * 7) % 13) as f64 / 13.0 - 0.45)
        .collect();
    Tensor::matrix(rows, cols, data).expect("probe shape")
}

fn small_gaze() -> GazeConfig {
    GazeConfig {
        embed_dim: 8,
        lstm_hidden: 4,
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        pad_len: 6,
    }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 16,
        attn_dropout: 0.0,
    }
}

fn opts(eps: f64, coords: Option<usize>, seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps,
        coords_per_param: coords,
        prefixes: Vec::new(),
        seed,
    }
}

fn gaze_model_case(seed: u64) -> Result<GradCheckReport> {
    let tok = Tokenizer::new(vocab());
    let mut p = GazePredictor::new(
        GazeConfig {
            layers: 2,
            ..small_gaze()
        },
        tok.vocab().len(),
        seed,
    )?;
    let seq = tok.frame_single(&tok.encode("what is bluetooth"), 6);
    let target = Tensor::vector(
        (0..seq.len())
            .map(|i| {
                if seq.word_index[i].is_some() {
                    0.2 + 0.3 * i as f64 / seq.len() as f64
                } else {
                    0.0
                }
            })
            .collect(),
    );
    let model = p.model.clone();
    // Layer norm over small LSTM activations is strongly curved, so a
    // smaller step keeps the truncation error out of the measurement.
    finite_difference_check(
        &mut p.store,
        |t| {
            let g = model.forward(t, &seq)?;
            let y = t.input(target.clone());
            let d = t.sub(g, y)?;
            let sq = t.square(d);
            Ok(t.mean(sq))
        },
        &opts(1e-5, Some(6), seed),
    )
}

/// One gaze-modulated attention layer; `g` is a per-position parameter
/// broadcast across the head dimension.
fn attention_case(seed: u64, wrt_gaze: bool) -> Result<GradCheckReport> {
    let (n, d, heads) = (5, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, "layer", d, heads, 16, 0.0, &mut rng)?;
    let x = store.add("x", probe(n, d, seed as usize))?;
    let g = store.add("g", Tensor::vector(vec![0.3, 0.9, 0.5, 0.7, 0.2]))?;
    let mask = [true, true, true, true, false];
    let out_probe = probe(n, d, seed as usize + 3);
    let ones = Tensor::full(&[n, d / heads], 1.0);
    let mut o = opts(1e-4, None, seed);
    o.prefixes = if wrt_gaze {
        vec!["g".into()]
    } else {
        vec![
            "layer.attn.query".into(),
            "layer.attn.key".into(),
            "layer.attn.value".into(),
        ]
    };
    finite_difference_check(
        &mut store,
        |t| {
            let xv = t.param(x);
            let gv = t.param(g);
            let base = t.input(ones.clone());
            let gm = t.scale_rows(base, gv)?;
            let out = layer.attention(t, xv, &mask, Some(gm))?.output;
            let p = t.input(out_probe.clone());
            let prod = t.mul(out, p)?;
            Ok(t.sum(prod))
        },
        &o,
    )
}

fn maxsim_case(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let q = store.add("eq", probe(3, 4, seed as usize))?;
    let d = store.add("ed", probe(5, 4, seed as usize + 5))?;
    let gq = store.add("gq", Tensor::vector(vec![0.2, 0.7, 0.9]))?;
    let gd = store.add("gd", Tensor::vector(vec![0.3, 0.8, 0.5, 0.6, 0.95]))?;
    finite_difference_check(
        &mut store,
        |t| {
            let (q, d) = (t.param(q), t.param(d));
            let q = t.l2_normalize_rows(q)?;
            let d = t.l2_normalize_rows(d)?;
            let (gq, gd) = (t.param(gq), t.param(gd));
            gaze_maxsim(t, q, d, Some(gq), Some(gd))
        },
        &opts(1e-4, None, seed),
    )
}

fn loss_case(seed: u64, pairwise: bool) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let s: Vec<_> = [0.8, -0.3, 1.7, 0.1]
        .iter()
        .enumerate()
        .map(|(i, v)| store.add(format!("s{i}"), Tensor::vector(vec![*v])))
        .collect::<Result<_>>()?;
    finite_difference_check(
        &mut store,
        |t| {
            let v: Vec<_> = s.iter().map(|&id| t.param(id)).collect();
            if pairwise {
                let a = pairwise_ce_loss(t, v[0], v[1])?;
                let b = pairwise_ce_loss(t, v[2], v[3])?;
                t.add(a, b)
            } else {
                pointwise_bce_loss(t, &v, &[true, false, true, false])
            }
        },
        &opts(1e-4, None, seed),
    )
}

fn cross_case(seed: u64) -> Result<GradCheckReport> {
    let cfg = CrossEncoderConfig {
        encoder: small_encoder(),
        gaze: small_gaze(),
        mode: CrossMode::AllLayers,
        max_len: 16,
    };
    let mut m = CrossEncoder::new(cfg, Tokenizer::new(vocab()), seed)?;
    let tok = m.tokenizer().clone();
    let (q, p, n) = (
        tok.encode("what is wifi"),
        tok.encode("radio signal"),
        tok.encode("blue wave"),
    );
    let model = m.clone();
    finite_difference_check(
        m.store_mut(),
        |t| model.triple_loss(t, &q, &p, &n),
        &opts(1e-5, Some(3), seed),
    )
}

fn bi_case(seed: u64) -> Result<GradCheckReport> {
    let cfg = BiEncoderConfig {
        encoder: small_encoder(),
        gaze: small_gaze(),
        mode: BiMode::Combined,
        m_q: 6,
        m_d: 12,
        d_out: 6,
        shared_towers: true,
        mask_gaze: Some(1.0),
    };
    let mut m = BiEncoder::new(cfg, Tokenizer::new(vocab()), seed)?;
    let tok = m.tokenizer().clone();
    let (q, p, n) = (
        tok.encode("what is wifi"),
        tok.encode("radio signal"),
        tok.encode("blue wave"),
    );
    let model = m.clone();
    finite_difference_check(
        m.store_mut(),
        |t| model.triple_loss(t, &q, &p, &n),
        &opts(1e-5, Some(3), seed),
    )
}

/// Every gradient check, in a fixed order.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    type Case = (&'static str, fn(u64) -> Result<GradCheckReport>);
    let cases: [Case; 8] = [
        ("gaze model end-to-end", gaze_model_case),
        ("attention wrt query/key/value weights", |s| attention_case(s, false)),
        ("attention wrt gaze", |s| attention_case(s, true)),
        ("gaze maxsim wrt embeddings and gaze", maxsim_case),
        ("pointwise cross-entropy", |s| loss_case(s, false)),
        ("pairwise cross-entropy", |s| loss_case(s, true)),
        ("cross-encoder triple loss", cross_case),
        ("bi-encoder triple loss", bi_case),
    ];
    cases
        .iter()
        .map(|(name, f)| Ok(GradCheckCase { name, report: f(seed)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for case in gradient_suite(0).unwrap() {
            assert!(case.passed(), "{}: {:?}", case.name, case.report);
            assert!(case.report.coords_checked > 0, "{}", case.name);
        }
    }
}
