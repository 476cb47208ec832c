use proptest::prelude::*;

use gazby::numerics::{finite_difference_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use gazby::Result;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..4, 1usize..4)
}

type Op = fn(&mut Tape<'_>, Var, Var, Var, Var) -> Result<Var>;

/// Every differentiable op as a function of two r×c matrices `a` and `b`,
/// a length-r vector `u` and a length-c vector `v`.
fn ops() -> Vec<(&'static str, Op)> {
    vec![
        ("matmul", |t, a, b, _, _| {
            let bt = t.transpose(b)?;
            t.matmul(a, bt)
        }),
        ("matmul_nt", |t, a, b, _, _| t.matmul_nt(a, b)),
        ("add", |t, a, b, _, _| t.add(a, b)),
        ("sub", |t, a, b, _, _| t.sub(a, b)),
        ("mul", |t, a, b, _, _| t.mul(a, b)),
        ("add_bias", |t, a, _, _, v| t.add_bias(a, v)),
        ("scale_rows", |t, a, _, u, _| t.scale_rows(a, u)),
        ("scale_cols", |t, a, _, _, v| t.scale_cols(a, v)),
        ("expand_cols", |t, _, _, u, _| t.expand_cols(u, 3)),
        ("affine", |t, a, _, _, _| Ok(t.affine(a, 1.5, -0.25))),
        ("exp", |t, a, _, _, _| Ok(t.exp(a))),
        ("log", |t, a, _, _, _| {
            let s = t.square(a);
            let p = t.affine(s, 1.0, 0.5);
            Ok(t.log(p))
        }),
        ("tanh", |t, a, _, _, _| Ok(t.tanh(a))),
        ("sigmoid", |t, a, _, _, _| Ok(t.sigmoid(a))),
        ("gelu", |t, a, _, _, _| Ok(t.gelu(a))),
        ("softplus", |t, a, _, _, _| Ok(t.softplus(a))),
        ("square", |t, a, _, _, _| Ok(t.square(a))),
        ("softmax_rows", |t, a, _, _, _| t.softmax_rows(a)),
        ("masked_softmax_rows", |t, a, _, _, v| {
            let n = t.shape(v)[0];
            let allowed: Vec<bool> = (0..n).map(|j| j == 0 || j % 2 == 1).collect();
            t.masked_softmax_rows(a, &allowed)
        }),
        ("layer_norm", |t, a, _, _, v| {
            let beta = t.scale(v, 0.5);
            t.layer_norm(a, v, beta, 1e-5)
        }),
        ("slice_cols", |t, a, _, _, _| {
            let c = t.shape(a)[1];
            t.slice_cols(a, c / 2, c - c / 2)
        }),
        ("concat_cols", |t, a, b, _, _| t.concat_cols(&[a, b])),
        ("concat_rows", |t, a, b, _, _| t.concat_rows(&[b, a])),
        ("gather", |t, a, _, _, _| {
            let r = t.shape(a)[0];
            let idx: Vec<usize> = (0..r).rev().chain(0..r).collect();
            t.gather(a, &idx)
        }),
        ("row_max", |t, a, _, _, _| t.row_max(a)),
        ("mean", |t, a, _, _, _| Ok(t.mean(a))),
        ("reshape", |t, a, _, _, _| {
            let n = t.value(a).len();
            t.reshape(a, &[1, n])
        }),
    ]
}

fn weighted_sum(t: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let n = t.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7 + seed as f64).sin()).collect();
    let w = Tensor::new(t.shape(out).to_vec(), w)?;
    let prod = t.mul_const(out, w)?;
    Ok(t.sum(prod))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c, -700.0, 700.0))) {
        let s = x.softmax_rows().unwrap();
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, n, p, q)| (matrix(m, n, -1.0, 1.0), matrix(n, p, -1.0, 1.0), matrix(p, q, -1.0, 1.0)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn ops_match_finite_differences(
        (a, b, u, v) in shape().prop_flat_map(|(r, c)| (
            matrix(r, c, -1.5, 1.5),
            matrix(r, c, -1.5, 1.5),
            prop::collection::vec(0.2f64..1.5, r),
            prop::collection::vec(0.2f64..1.5, c),
        )),
        seed in 0u64..1000,
    ) {
        for (name, op) in ops() {
            let mut store = ParamStore::new();
            let ia = store.add("a", a.clone()).unwrap();
            let ib = store.add("b", b.clone()).unwrap();
            let iu = store.add("u", Tensor::vector(u.clone())).unwrap();
            let iv = store.add("v", Tensor::vector(v.clone())).unwrap();
            let f = |t: &mut Tape<'_>| {
                let (a, b, u, v) = (t.param(ia), t.param(ib), t.param(iu), t.param(iv));
                let out = op(t, a, b, u, v)?;
                weighted_sum(t, out, seed)
            };
            let opts = GradCheckOptions { eps: 1e-6, seed, ..GradCheckOptions::default() };
            let report = finite_difference_check(&mut store, f, &opts).unwrap();
            prop_assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(
        (a, b, u, v) in shape().prop_flat_map(|(r, c)| (
            matrix(r, c, -50.0, 50.0),
            matrix(r, c, -50.0, 50.0),
            prop::collection::vec(-50.0f64..50.0, r),
            prop::collection::vec(-50.0f64..50.0, c),
        )),
    ) {
        for (name, op) in ops() {
            let store = ParamStore::new();
            let mut t = Tape::new(&store);
            let (a, b) = (t.input(a.clone()), t.input(b.clone()));
            let (u, v) = (t.input(Tensor::vector(u.clone())), t.input(Tensor::vector(v.clone())));
            let out = op(&mut t, a, b, u, v).unwrap();
            prop_assert!(t.value(out).is_finite(), "{name}");
        }
    }
}
