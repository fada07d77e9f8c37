use lscd::autodiff::check::{gradient_check, relative_error};
use lscd::autodiff::nn::{MultiHeadSelfAttention, TransformerLayer};
use lscd::autodiff::{Adam, AdamConfig, Graph, Init, LombScargleOp, ParamStore, Tensor, Unary, Var};
use lscd::grid::FrequencyGrid;
use lscd::lombscargle::{periodogram_raw, spectral_feature_raw, FeatureOptions};
use lscd::rng::{seeded, Rng};
use lscd::{Dims, Mask, Result};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Scalar loss `Σ out ⊙ r` with a fixed random `r`, so every output entry matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = randn(&mut seeded(seed), &shape);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let errs = gradient_check(&inputs, H, |g, v| {
        let out = f(g, v)?;
        project(g, out, 99)
    })
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = seeded(1);
    for _ in 0..20 {
        let (a, b, c) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 5));
        let x = randn(&mut rng, &[a, b, c]);
        let y = randn(&mut rng, &[a, b, c]);
        let v = randn(&mut rng, &[b, c]);
        check("add", vec![x.clone(), y.clone()], |g, v| g.add(v[0], v[1]));
        check("sub", vec![x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]));
        check("mul", vec![x.clone(), y.clone()], |g, v| g.mul(v[0], v[1]));
        check("scale", vec![x.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
        check("add_bcast", vec![x.clone(), v.clone()], |g, v| g.add_bcast(v[0], v[1]));
        check("mul_bcast", vec![x.clone(), v.clone()], |g, v| g.mul_bcast(v[0], v[1]));
        let axis = rng.random_range(0..=3);
        check("expand_axis", vec![x.clone()], move |g, v| g.expand_axis(v[0], axis, 3));
    }
}

#[test]
fn unary_ops() {
    let mut rng = seeded(2);
    for _ in 0..20 {
        let shape = [dims(&mut rng, 1, 5), dims(&mut rng, 1, 6)];
        let x = randn(&mut rng, &shape);
        for kind in [Unary::Gelu, Unary::Sigmoid, Unary::Tanh, Unary::Square] {
            check(&format!("{kind:?}"), vec![x.clone()], move |g, v| Ok(g.unary(v[0], kind)));
        }
        let away = Tensor::new(&shape, x.data.iter().map(|v| v + v.signum() * 0.1).collect()).unwrap();
        check("relu", vec![away], |g, v| Ok(g.relu(v[0])));
        let pos = Tensor::new(&shape, x.data.iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        check("log1p", vec![pos.clone()], |g, v| Ok(g.unary(v[0], Unary::Log1p)));
        let opts = FeatureOptions::default();
        let power = Tensor::new(&shape, pos.data.iter().map(|v| 3.0 * v).collect()).unwrap();
        check("fap_log", vec![power], move |g, v| Ok(g.unary(v[0], Unary::FapLog { j_eff: 20.0, opts })));
    }
}

#[test]
fn matmul_and_bmm() {
    let mut rng = seeded(3);
    for _ in 0..20 {
        let (g_, m, k, n) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 5), dims(&mut rng, 1, 5), dims(&mut rng, 1, 5));
        let x = randn(&mut rng, &[g_, m, k]);
        let w = randn(&mut rng, &[k, n]);
        check("matmul", vec![x.clone(), w], |g, v| g.matmul(v[0], v[1]));
        let b = randn(&mut rng, &[g_, k, n]);
        check("bmm", vec![x.clone(), b], |g, v| g.bmm(v[0], v[1], false));
        let bt = randn(&mut rng, &[g_, n, k]);
        check("bmm_t", vec![x, bt], |g, v| g.bmm(v[0], v[1], true));
    }
}

#[test]
fn normalizations() {
    let mut rng = seeded(4);
    for _ in 0..20 {
        let (r, d) = (dims(&mut rng, 1, 4), dims(&mut rng, 3, 7));
        let x = randn(&mut rng, &[r, d]);
        let gamma = randn(&mut rng, &[d]);
        let beta = randn(&mut rng, &[d]);
        check("softmax", vec![x.clone()], |g, v| Ok(g.softmax_last(v[0])));
        check("layernorm", vec![x.clone(), gamma, beta], |g, v| g.layernorm(v[0], v[1], v[2]));
        check("standardize", vec![x], |g, v| Ok(g.standardize_last(v[0])));
    }
}

#[test]
fn shape_ops_and_reductions() {
    let mut rng = seeded(5);
    for _ in 0..20 {
        let (a, b, c) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 2, 5));
        let x = randn(&mut rng, &[a, b, c]);
        let y = randn(&mut rng, &[a, b, 2]);
        check("reshape", vec![x.clone()], move |g, v| g.reshape(v[0], &[a * b, c]));
        check("permute", vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
        check("sum", vec![x.clone()], |g, v| Ok(g.sum(v[0])));
        check("mean", vec![x.clone()], |g, v| Ok(g.mean(v[0])));
        let axis = rng.random_range(0..3);
        check("mean_axis", vec![x.clone()], move |g, v| g.mean_axis(v[0], axis));
        check("concat", vec![x.clone(), y], |g, v| g.concat_last(&[v[0], v[1]]));
        check("slice", vec![x.clone()], move |g, v| g.slice_last(v[0], 1, c - 1));
        check("im2col", vec![x.clone()], |g, v| g.im2col_time(v[0], 3));
        let mask: Vec<bool> = (0..x.len()).map(|_| rng.random()).collect();
        check("masked_fill", vec![x.clone()], move |g, v| g.masked_fill(v[0], &mask, 0.5));
        let table = randn(&mut rng, &[a + 2, c]);
        let idx: Vec<usize> = (0..b + 2).map(|_| rng.random_range(0..a + 2)).collect();
        check("gather", vec![table], move |g, v| g.gather_rows(v[0], &idx));
        let w: Vec<f64> = (0..x.len()).map(|_| f64::from(rng.random::<bool>())).collect();
        let t = randn(&mut rng, &[a, b, c]);
        check("masked_mse", vec![x, t], move |g, v| g.masked_mse(v[0], v[1], &w));
    }
}

#[test]
fn lomb_scargle_feature_chain() {
    let mut rng = seeded(6);
    for trial in 0..20 {
        let d = Dims::new(dims(&mut rng, 1, 2), dims(&mut rng, 1, 3), dims(&mut rng, 8, 20));
        let times: Vec<f64> = (0..d.samples)
            .flat_map(|_| {
                let mut t = 0.0;
                (0..d.steps)
                    .map(|_| {
                        t += rng.random_range(0.05..0.3);
                        t
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mask = Mask::from_bits(d, (0..d.len()).map(|_| rng.random::<f64>() < 0.7).collect()).unwrap();
        let grid = FrequencyGrid::linear_hz(6, 0.2, 1.5).unwrap();
        let x = randn(&mut rng, &[d.samples, d.channels, d.steps]);
        let center = trial % 2 == 0;
        // Composed forward values equal the standalone implementation.
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let op = LombScargleOp { timestamps: times.clone(), mask: mask.clone(), grid: grid.clone(), center };
        let p = g.lomb_scargle(v, op).unwrap();
        let f = g.spectral_feature(p, FeatureOptions::default());
        let direct = periodogram_raw(&x.data, &times, &mask, &grid, center).unwrap();
        assert_eq!(g.value(p).data, direct.power);
        let feat = spectral_feature_raw(&direct.power, 6, &FeatureOptions::default());
        assert!(relative_error(&g.value(f).data, &feat) < 1e-14);

        check("lomb_scargle_feature", vec![x], move |g, v| {
            let op = LombScargleOp { timestamps: times.clone(), mask: mask.clone(), grid: grid.clone(), center };
            let p = g.lomb_scargle(v[0], op)?;
            Ok(g.spectral_feature(p, FeatureOptions::default()))
        });
    }
}

fn attention_store(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadSelfAttention, TransformerLayer) {
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    let attn = MultiHeadSelfAttention::new(&mut store, "a", d, heads, &mut rng).unwrap();
    let layer = TransformerLayer::new(&mut store, "t", d, heads, 2 * d, &mut rng).unwrap();
    // Larger weights so the attention pattern is far from uniform.
    for p in store.iter_mut() {
        if matches!(p.init, Init::TruncNormal { .. }) {
            p.value.data.iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    (store, attn, layer)
}

#[test]
fn attention_gradients() {
    let mut rng = seeded(7);
    for _ in 0..20 {
        let heads = dims(&mut rng, 1, 2);
        let d = heads * dims(&mut rng, 3, 4);
        let (groups, n) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 4));
        let x = randn(&mut rng, &[groups, n, d]);
        let (store, attn, layer) = attention_store(d, heads, rng.random());
        check("attention", vec![x.clone()], |g, v| attn.forward(g, &store, v[0]));
        check("transformer", vec![x], |g, v| layer.forward(g, &store, v[0]));
    }
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4], 3.0));
    let s = g.softmax_last(x);
    assert!(g.value(s).data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn matmul_by_identity() {
    let mut rng = seeded(8);
    let x = randn(&mut rng, &[3, 4]);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data[i * 5] = 1.0;
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(eye));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn single_token_attention_is_value_path() {
    let (store, attn, _) = attention_store(4, 2, 9);
    let x = randn(&mut seeded(10), &[1, 1, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = attn.forward(&mut g, &store, xv).unwrap();
    // softmax over one key is 1, so the output is out(v(x))
    let mut h = Graph::new();
    let xv = h.constant(x);
    let qkv = attn.qkv.forward(&mut h, &store, xv).unwrap();
    let v = h.slice_last(qkv, 8, 4).unwrap();
    let expect = attn.out.forward(&mut h, &store, v).unwrap();
    assert!(relative_error(&g.value(y).data, &h.value(expect).data) < 1e-14);
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, _, layer) = attention_store(6, 2, 11);
    let n = 5;
    let x = randn(&mut seeded(12), &[1, n, 6]);
    let perm = [3, 0, 4, 1, 2];
    let permuted = Tensor::new(&[1, n, 6], perm.iter().flat_map(|&i| x.data[i * 6..(i + 1) * 6].to_vec()).collect()).unwrap();
    let run = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = layer.forward(&mut g, &store, v).unwrap();
        g.value(y).data.clone()
    };
    let y = run(x);
    let yp = run(permuted);
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..6 {
            assert!((yp[dst * 6 + c] - y[src * 6 + c]).abs() < 1e-10);
        }
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.bmm(a, b, false).is_err());
    assert!(g.matmul(a, a).is_err());
}

/// Scalar Adam written out longhand.
fn adam_reference(w0: f64, grads: impl Fn(f64) -> f64, steps: usize) -> f64 {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for t in 1..=steps {
        let g = grads(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - f64::powi(b1, t as i32));
        let vh = v / (1.0 - f64::powi(b2, t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}

#[test]
fn adam_matches_scalar_reference() {
    let grad = |w: f64| 2.0 * (w - 0.3) + (3.0 * w).sin();
    let mut store = ParamStore::new();
    let id = store.add("w", &[1], Init::Zeros, &mut seeded(0));
    store.get_mut(id).value.data[0] = 1.5;
    let mut opt = Adam::new(AdamConfig::default(), &store);
    for _ in 0..100 {
        let w = store.flatten()[0];
        opt.step(&mut store, &[Tensor::new(&[1], vec![grad(w)]).unwrap()]).unwrap();
    }
    let expect = adam_reference(1.5, grad, 100);
    assert!((store.flatten()[0] - expect).abs() < 1e-10);
}
