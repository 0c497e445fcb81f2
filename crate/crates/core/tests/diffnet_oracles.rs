mod common;

use chanforge::diffnet::nn::{self, EncoderLayerParams, MhaParams, LAYER_NORM_EPS};
use chanforge::diffnet::{Graph, ParamStore, Tensor};
use common::{rng, uniform};
use proptest::prelude::*;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let [ba, m, k] = a.shape();
    let [bb, _, n] = b.shape();
    let batch = ba.max(bb);
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        let (ta, tb) = (if ba == 1 { 0 } else { t }, if bb == 1 { 0 } else { t });
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(ta, i, p) * b.get(tb, p, j);
                }
                out[(t * m + i) * n + j] = s;
            }
        }
    }
    out
}

fn random_tensor(r: &mut rand_chacha::ChaCha8Rng, shape: [usize; 3]) -> Tensor {
    Tensor::new(shape, uniform(r, shape.iter().product(), -1.0, 1.0)).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (sa, sb) in [
        ([1, 3, 4], [1, 4, 2]),
        ([5, 7, 3], [5, 3, 6]),
        ([4, 2, 9], [1, 9, 5]),
        ([1, 6, 6], [3, 6, 1]),
        ([2, 1, 1], [2, 1, 8]),
    ] {
        let a = random_tensor(&mut r, sa);
        let b = random_tensor(&mut r, sb);
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        let expected = naive_matmul(&a, &b);
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Direct evaluation of `softmax(QKᵀ/sqrt(d_k)) V` for one batch entry.
fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let w = softmax(&logits);
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let [_, r, c] = t.shape();
    (0..r).map(|i| (0..c).map(|j| t.get(b, i, j)).collect()).collect()
}

fn project(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let [_, k, n] = w.shape();
    x.iter()
        .map(|xi| (0..n).map(|j| (0..k).map(|p| xi[p] * w.get(0, p, j)).sum()).collect())
        .collect()
}

#[test]
fn attention_matches_direct_formula() {
    let mut r = rng(2);
    let (q, k, v) = (
        random_tensor(&mut r, [2, 5, 4]),
        random_tensor(&mut r, [2, 6, 4]),
        random_tensor(&mut r, [2, 6, 3]),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let out = nn::attention(&mut g, qv, kv, vv, 4).unwrap();
    for b in 0..2 {
        let expected = attention_oracle(&rows(&q, b), &rows(&k, b), &rows(&v, b));
        for (got, want) in rows(g.value(out), b).iter().zip(&expected) {
            for (x, y) in got.iter().zip(want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn multi_head_attention_matches_per_head_oracle() {
    let mut r = rng(3);
    let (d, h, dk, l) = (6, 3, 2, 4);
    let x = random_tensor(&mut r, [2, l, d]);
    let wq: Vec<Tensor> = (0..h).map(|_| random_tensor(&mut r, [1, d, dk])).collect();
    let wk: Vec<Tensor> = (0..h).map(|_| random_tensor(&mut r, [1, d, dk])).collect();
    let wv: Vec<Tensor> = (0..h).map(|_| random_tensor(&mut r, [1, d, dk])).collect();
    let wo = random_tensor(&mut r, [1, h * dk, d]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let leaves = |g: &mut Graph, ws: &[Tensor]| ws.iter().map(|w| g.leaf(w.clone())).collect::<Vec<_>>();
    let p = MhaParams {
        wq: leaves(&mut g, &wq),
        wk: leaves(&mut g, &wk),
        wv: leaves(&mut g, &wv),
        wo: g.leaf(wo.clone()),
    };
    let out = nn::multi_head_attention(&mut g, xv, &p).unwrap();
    for b in 0..2 {
        let xb = rows(&x, b);
        let mut cat = vec![Vec::new(); l];
        for i in 0..h {
            let head = attention_oracle(&project(&xb, &wq[i]), &project(&xb, &wk[i]), &project(&xb, &wv[i]));
            for (row, hr) in cat.iter_mut().zip(head) {
                row.extend(hr);
            }
        }
        let expected = project(&cat, &wo);
        for (got, want) in rows(g.value(out), b).iter().zip(&expected) {
            for (x, y) in got.iter().zip(want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn zero_layer(g: &mut Graph, d: usize, heads: usize) -> EncoderLayerParams {
    let dk = d / heads;
    let mut zeros = |shape| g.leaf(Tensor::zeros(shape));
    let wq = (0..heads).map(|_| zeros([1, d, dk])).collect();
    let wk = (0..heads).map(|_| zeros([1, d, dk])).collect();
    let wv = (0..heads).map(|_| zeros([1, d, dk])).collect();
    let wo = zeros([1, d, d]);
    let w1 = zeros([1, d, d]);
    let b1 = zeros([1, 1, d]);
    let w2 = zeros([1, d, d]);
    let b2 = zeros([1, 1, d]);
    let ln1_offset = zeros([1, 1, d]);
    let ln2_offset = zeros([1, 1, d]);
    let ln1_scale = g.leaf(Tensor::full([1, 1, d], 1.0));
    let ln2_scale = g.leaf(Tensor::full([1, 1, d], 1.0));
    EncoderLayerParams {
        mha: MhaParams { wq, wk, wv, wo },
        ln1_scale,
        ln1_offset,
        w1,
        b1,
        w2,
        b2,
        ln2_scale,
        ln2_offset,
    }
}

fn standardize_rows(x: &Tensor) -> Vec<f64> {
    let [_, _, c] = x.shape();
    x.data()
        .chunks(c)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter().map(move |v| (v - mean) * inv).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn encoder_with_zero_sublayers_is_repeated_layer_norm() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, [2, 5, 8]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let layers: Vec<_> = (0..3).map(|_| zero_layer(&mut g, 8, 2)).collect();
    let out = nn::transformer_encoder(&mut g, xv, &layers).unwrap();
    let mut expected = x.clone();
    for _ in 0..6 {
        expected = Tensor::new(expected.shape(), standardize_rows(&expected)).unwrap();
    }
    for (a, b) in g.value(out).data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_layer_binds_named_parameters() {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let d = 4;
    for kind in ["q", "k", "v"] {
        for i in 0..2 {
            store
                .insert(format!("e.attn.{kind}.{i}"), random_tensor(&mut r, [1, d, 2]))
                .unwrap();
        }
    }
    for name in ["attn.o", "ffn.w1", "ffn.w2"] {
        store
            .insert(format!("e.{name}"), random_tensor(&mut r, [1, d, d]))
            .unwrap();
    }
    for name in ["ln1.scale", "ln1.offset", "ln2.scale", "ln2.offset", "ffn.b1", "ffn.b2"] {
        store
            .insert(format!("e.{name}"), random_tensor(&mut r, [1, 1, d]))
            .unwrap();
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let layer = EncoderLayerParams::bind(&bound, "e", 2).unwrap();
    let x = g.leaf(random_tensor(&mut r, [1, 3, d]));
    let y = nn::encoder_layer(&mut g, x, &layer).unwrap();
    assert_eq!(g.shape(y), [1, 3, d]);
    assert!(EncoderLayerParams::bind(&bound, "e", 3).is_err());
}

fn row_strategy() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(-30.0f64..30.0, 1..12), -500.0f64..500.0)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant((row, shift) in row_strategy()) {
        let n = row.len();
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new([1, 1, n], row.clone()).unwrap());
        let shifted = g.leaf(Tensor::new([1, 1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let s = g.softmax(a);
        let t = g.softmax(shifted);
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (x, y) in g.value(s).data().iter().zip(g.value(t).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values(seed in 0u64..10_000, lq in 1usize..5, lk in 1usize..6) {
        let mut r = rng(seed);
        let q = random_tensor(&mut r, [1, lq, 3]);
        let k = random_tensor(&mut r, [1, lk, 3]);
        let v = random_tensor(&mut r, [1, lk, 2]);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let out = nn::attention(&mut g, qv, kv, vv, 3).unwrap();
        let qr = rows(&q, 0);
        let kr = rows(&k, 0);
        let vr = rows(&v, 0);
        for (i, got) in rows(g.value(out), 0).iter().enumerate() {
            // barycentric weights recovered from the logits
            let logits: Vec<f64> = kr.iter().map(|kj| qr[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt()).collect();
            let w = softmax(&logits);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..2 {
                let comb: f64 = w.iter().zip(&vr).map(|(wj, vj)| wj * vj[c]).sum();
                prop_assert!((got[c] - comb).abs() < 1e-12);
                let lo = vr.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = vr.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(got[c] >= lo - 1e-12 && got[c] <= hi + 1e-12);
            }
        }
    }
}
