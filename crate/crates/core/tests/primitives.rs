mod oracle;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg_core::frequency::{laplacian_split, nearest_upsample};
use roadseg_core::ops::conv::{ConvSpec, Padding};
use roadseg_core::{Graph, ParamStore, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}

fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
    g.value(y).clone()
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [
        // (h, w, cin, cout, k, stride, dilation, groups, same)
        (7, 6, 3, 4, 3, 1, 1, 1, true),
        (8, 8, 4, 6, 3, 2, 1, 1, true),
        (9, 7, 4, 4, 3, 1, 2, 4, true),
        (8, 8, 6, 4, 5, 1, 1, 2, true),
        (8, 8, 3, 5, 4, 4, 1, 1, false),
        (5, 5, 2, 3, 1, 1, 1, 1, true),
        (10, 10, 8, 8, 7, 1, 1, 8, true),
    ];
    for (h, w, cin, cout, k, stride, dilation, groups, same) in cases {
        let spec = ConvSpec {
            kernel: (k, k),
            stride,
            dilation,
            groups,
            padding: if same { Padding::Same } else { Padding::Valid },
        };
        let x = rand_tensor(&mut rng, &[2, h, w, cin]);
        let wt = rand_tensor(&mut rng, &spec.weight_shape(cin, cout));
        let b = rand_tensor(&mut rng, &[cout]);
        let got = run_conv(&x, &wt, &b, &spec);
        let want = oracle::conv2d(&x, &wt, Some(b.data()), stride, dilation, groups, same);
        assert_close(&got, &want, 1e-12);
    }
}

#[test]
fn same_padding_preserves_extent_at_stride_one() {
    let x = Tensor::full([1, 5, 9, 2], 1.0);
    let w = Tensor::full([3, 3, 2, 1], 1.0);
    let y = run_conv(&x, &w, &Tensor::zeros([1]), &ConvSpec::same(3));
    assert_eq!(y.shape(), &[1, 5, 9, 1]);
    // Corner sees a 2x2 window of both channels, the centre a full 3x3 window.
    assert_eq!(y.at4(0, 0, 0, 0), 8.0);
    assert_eq!(y.at4(0, 2, 4, 0), 18.0);
}

#[test]
fn transposed_conv_matches_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (s, cin, cout) in [(2, 3, 5), (4, 4, 2)] {
        let x = rand_tensor(&mut rng, &[2, 3, 4, cin]);
        let w = rand_tensor(&mut rng, &[cin, s, s, cout]);
        let b = rand_tensor(&mut rng, &[cout]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv_transpose2d(xv, wv, Some(bv), s).unwrap();
        let want = oracle::conv_transpose2d(&x, &w, Some(b.data()), s);
        assert_eq!(want.shape(), &[2, 3 * s, 4 * s, cout]);
        assert_close(g.value(y), &want, 1e-12);
    }
}

#[test]
fn transposed_conv_rejects_unit_stride() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros([1, 2, 2, 1]));
    let w = g.input(Tensor::zeros([1, 1, 1, 1]));
    assert!(g.conv_transpose2d(x, w, None, 1).is_err());
}

#[test]
fn layer_norm_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 3, 3, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (xv, gv, bv) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, 1e-6).unwrap();
    assert_close(g.value(y), &oracle::layer_norm(&x, gamma.data(), beta.data(), 1e-6), 1e-12);
}

#[test]
fn attention_matches_per_head_loops_and_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (b, nq, nk, d, heads) = (2, 5, 3, 8, 2);
    let q = rand_tensor(&mut rng, &[b, nq, d]);
    let k = rand_tensor(&mut rng, &[b, nk, d]);
    let v = rand_tensor(&mut rng, &[b, nk, d]);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let y = g.attention(qv, kv, vv, heads).unwrap();
    let tok = |t: &Tensor, n: usize| -> Vec<Vec<Vec<f64>>> {
        t.data().chunks(n * d).map(|item| item.chunks(d).map(<[f64]>::to_vec).collect()).collect()
    };
    let (want, rows) = oracle::attention(&tok(&q, nq), &tok(&k, nk), &tok(&v, nk), heads);
    let want: Vec<f64> = want.into_iter().flatten().flatten().collect();
    for (a, e) in g.value(y).data().iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
    let probs = g.attention_probs(y).unwrap();
    let flat: Vec<f64> = rows.into_iter().flatten().flatten().flatten().collect();
    assert_eq!(probs.len(), flat.len());
    for row in probs.chunks(nk) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for (a, e) in probs.iter().zip(&flat) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn laplacian_bands_match_pool_and_upsample_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[2, 8, 4, 3]);
    let pair = laplacian_split(&x, 2).unwrap();
    assert_eq!(pair.low, oracle::max_pool(&x, 2));
    let up = oracle::nearest_up(&pair.low, 2);
    assert_eq!(nearest_upsample(&pair.low, 2).unwrap(), up);
    let high: Vec<f64> = up.data().iter().zip(x.data()).map(|(u, v)| u - v).collect();
    assert_eq!(pair.high.data(), &high[..]);
    // Every high-band value is a non-negative gap to the window maximum.
    assert!(pair.high.data().iter().all(|&h| h >= 0.0));
}

#[test]
fn laplacian_rejects_indivisible_and_small_strides() {
    let x = Tensor::zeros([1, 6, 6, 1]);
    assert!(laplacian_split(&x, 4).is_err());
    assert!(laplacian_split(&x, 1).is_err());
}

/// Values on the grid `k / 2^16` with `|v| <= 16`: both subtractions in the round trip are
/// exact in double precision.
fn dyadic_map() -> impl Strategy<Value = (Tensor, usize)> {
    (1usize..=2, 1usize..=4, 1usize..=4, 1usize..=8, prop_oneof![Just(2usize), Just(4usize)]).prop_flat_map(
        |(b, hm, wm, c, s)| {
            let (h, w) = (hm * s, wm * s);
            let (h, w) = (h.min(16 / s * s), w.min(16 / s * s));
            prop::collection::vec(-(1i64 << 20)..=(1i64 << 20), b * h * w * c).prop_map(move |ks| {
                let data = ks.into_iter().map(|k| k as f64 / 65536.0).collect();
                (Tensor::new([b, h, w, c], data).unwrap(), s)
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn laplacian_round_trip_is_exact_on_dyadic_values((x, s) in dyadic_map()) {
        let pair = laplacian_split(&x, s).unwrap();
        prop_assert_eq!(pair.reconstruct(), x);
    }

    #[test]
    fn laplacian_round_trip_is_within_rounding_on_arbitrary_values(
        data in prop::collection::vec(-1e3f64..1e3, 2 * 8 * 8 * 3)
    ) {
        let x = Tensor::new([2, 8, 8, 3], data).unwrap();
        let pair = laplacian_split(&x, 2).unwrap();
        let up = nearest_upsample(&pair.low, 2).unwrap();
        let r = pair.reconstruct();
        for ((a, b), u) in r.data().iter().zip(x.data()).zip(up.data()) {
            // Two roundings, each at most half an ulp of a value bounded by |u| + |x|.
            prop_assert!((a - b).abs() <= 2.0 * f64::EPSILON * (u.abs() + b.abs()));
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::same(3);
        let x1 = rand_tensor(&mut rng, &[1, 5, 5, 2]);
        let x2 = rand_tensor(&mut rng, &[1, 5, 5, 2]);
        let w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let zero = Tensor::zeros([3]);
        let sum = Tensor::new([1, 5, 5, 2], x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let lhs = run_conv(&sum, &w, &zero, &spec);
        let a = run_conv(&x1, &w, &zero, &spec);
        let b = run_conv(&x2, &w, &zero, &spec);
        for ((l, p), q) in lhs.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!((l - p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn outputs_stay_finite_for_large_inputs() {
    let x = Tensor::from_fn([1, 4, 4, 4], |i| if i % 2 == 0 { 1e150 } else { -1e150 });
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.input(x);
    let gamma = g.input(Tensor::full([4], 1.0));
    let beta = g.input(Tensor::zeros([4]));
    let y = g.layer_norm(xv, gamma, beta, 1e-6).unwrap();
    let s = g.sigmoid(y);
    let a = g.gelu(y);
    assert!(g.value(y).is_finite() && g.value(s).is_finite() && g.value(a).is_finite());
}
