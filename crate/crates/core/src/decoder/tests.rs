use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck::{check, GradCheckOptions};
use crate::autograd::{gelu, sigmoid, ParamId, ParamStore};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn rand_mask(r: &mut ChaCha8Rng, b: usize, h: usize, w: usize, p: f64) -> Tensor {
    Tensor::new(
        vec![b, h, w, 1],
        (0..b * h * w).map(|_| if r.random::<f64>() < p { 1.0 } else { 0.0 }).collect(),
    )
}

fn full(feat: Tensor) -> TokenGrid {
    let s = feat.shape().to_vec();
    TokenGrid {
        feat: Var::constant(feat),
        mask: TokenGrid::full_mask(s[0], s[1], s[2]),
    }
}

fn zero_param(store: &mut ParamStore, id: ParamId) {
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::zeros(&shape));
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn amplitude_phase_round_trip() {
    let mut r = rng(1);
    for _ in 0..100 {
        let x = rand_tensor(&mut r, &[2, 4, 6, 3]);
        let (a, p) = amplitude_phase(&Var::constant(x.clone()));
        let back = real_inverse(&a, &p);
        assert!(back.value().max_abs_diff(&x) < 1e-6);
    }
}

fn fusion(seed: u64, dim: usize) -> (ParamStore, FrequencyFusion) {
    let mut store = ParamStore::new();
    let f = FrequencyFusion::new(&mut Init { store: &mut store, rng: &mut rng(seed) }, "ff", dim);
    (store, f)
}

#[test]
fn identical_inputs_with_averaging_fusion_reproduce_the_conv() {
    let (mut store, f) = fusion(2, 4);
    let w = store.value(f.conv_spatial.weight).clone();
    store.set_value(f.conv_freq.weight, w);
    let x = full(rand_tensor(&mut rng(3), &[1, 8, 8, 4]));
    let g = Graph::new(&store, false, rng(0));
    let out = f.forward(&g, &x, &x).unwrap();
    let conv = f.conv_spatial.forward(&g, &x);
    assert!(out.feat.value().max_abs_diff(conv.feat.value()) < 1e-5);

    let zero = full(Tensor::zeros(&[1, 8, 8, 4]));
    let out = f.forward(&g, &zero, &zero).unwrap();
    assert!(out.feat.data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_attention_values() {
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut Init { store: &mut store, rng: &mut rng(4) }, "ca", 8);
    let g = Graph::new(&store, false, rng(0));
    let x = rand_tensor(&mut rng(5), &[2, 4, 4, 8]);
    let w = ca.forward(&g, &Var::constant(x));
    assert_eq!(w.shape(), &[2, 1, 1, 8]);
    assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));

    // constant channels: pooled vector is the constant itself
    let consts: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let x = Tensor::new(vec![1, 3, 3, 8], (0..72).map(|i| consts[i % 8]).collect());
    let w = ca.forward(&g, &Var::constant(x));
    let (w1, b1) = (store.value(ca.reduce.weight).data(), store.value(ca.reduce.bias.unwrap()).data());
    let (w2, b2) = (store.value(ca.expand.weight).data(), store.value(ca.expand.bias.unwrap()).data());
    let hidden: Vec<f64> = (0..2)
        .map(|j| gelu((0..8).map(|i| consts[i] * w1[i * 2 + j]).sum::<f64>() + b1[j]))
        .collect();
    for o in 0..8 {
        let want = sigmoid((0..2).map(|j| hidden[j] * w2[j * 8 + o]).sum::<f64>() + b2[o]);
        assert!((w.data()[o] - want).abs() < 1e-12);
    }

    for id in [ca.reduce.bias.unwrap(), ca.expand.bias.unwrap()] {
        zero_param(&mut store, id);
    }
    let g = Graph::new(&store, false, rng(0));
    let w = ca.forward(&g, &Var::constant(Tensor::zeros(&[1, 4, 4, 8])));
    assert!(w.data().iter().all(|&v| v == 0.5));
}

#[test]
fn spatial_attention_values_and_shapes() {
    let mut store = ParamStore::new();
    let sa = SpatialAttention::new(&mut Init { store: &mut store, rng: &mut rng(6) }, "sa", 4);
    let mut r = rng(7);
    {
        let g = Graph::new(&store, false, rng(0));
        for side in [32, 16, 8] {
            let a = Var::constant(rand_tensor(&mut r, &[1, side, side, 4]));
            let b = Var::constant(rand_tensor(&mut r, &[1, side, side, 4]));
            let m = sa.forward(&g, &a, &b);
            assert_eq!(m.shape(), &[1, side, side, 1]);
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
    zero_param(&mut store, sa.conv.bias.unwrap());
    let g = Graph::new(&store, false, rng(0));
    let z = Var::constant(Tensor::zeros(&[1, 8, 8, 4]));
    assert!(sa.forward(&g, &z, &z).data().iter().all(|&v| v == 0.5));
}

fn skip_fusion(seed: u64, dim: usize) -> (ParamStore, SkipFusion) {
    let mut store = ParamStore::new();
    let f = SkipFusion::new(&mut Init { store: &mut store, rng: &mut rng(seed) }, "fuse", dim);
    (store, f)
}

#[test]
fn zero_skips_give_affine_map_of_decoder_state() {
    let (store, f) = skip_fusion(8, 4);
    let g = Graph::new(&store, false, rng(0));
    let zero = full(Tensor::zeros(&[1, 4, 4, 4]));
    let d = rand_tensor(&mut rng(9), &[1, 4, 4, 4]);
    let out = f.forward(&g, &zero, &zero, &full(d.clone())).unwrap();
    assert_eq!(out.feat.shape(), &[1, 4, 4, 4]);
    let w = store.value(f.reduce.weight).data();
    let b = store.value(f.reduce.bias.unwrap()).data();
    for p in 0..16 {
        for o in 0..4 {
            let want: f64 = (0..4).map(|i| d.data()[p * 4 + i] * w[(4 + i) * 4 + o]).sum::<f64>() + b[o];
            assert!((out.feat.data()[p * 4 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_output_and_gradient_flow() {
    let cfg = ModelConfig::toy();
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut Init { store: &mut store, rng: &mut rng(10) }, &cfg);
    let mut r = rng(11);
    let sides = cfg.level_sides();
    let dims = cfg.level_dims();
    let skips: Vec<LevelSkips> = (0..3)
        .map(|l| {
            let grid = |r: &mut ChaCha8Rng| TokenGrid {
                feat: Var::constant(rand_tensor(r, &[2, sides[l], sides[l], dims[l]])),
                mask: rand_mask(r, 2, sides[l], sides[l], 0.7),
            };
            LevelSkips::new(&grid(&mut r), &grid(&mut r), Some(&grid(&mut r)))
        })
        .collect();
    let bottleneck = Var::constant(rand_tensor(&mut r, &[2, sides[2], sides[2], dims[2]]));
    let g = Graph::new(&store, true, rng(0));
    let rec = dec.forward(&g, &bottleneck, &skips).unwrap();
    assert_eq!(rec.shape(), &[2, cfg.input_size, cfg.input_size]);
    assert!(rec.data().iter().all(|v| v.is_finite()));
    let target = rand_tensor(&mut r, rec.shape());
    rec.sub(&Var::constant(target)).square().mean_all().backward();
    let grads = g.grads();
    let mut seen = 0;
    for (id, grad) in grads {
        let name = store.name(id);
        if name.starts_with("decoder.fuse") {
            seen += 1;
            let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "{name} receives no gradient");
        }
    }
    // 3 levels x (2 convs + 2 fusion convs + 4 channel + 2 spatial + 2 reduce)
    assert_eq!(seen, 36);
}

#[test]
fn classifier_logits() {
    let cfg = ModelConfig::toy();
    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut Init { store: &mut store, rng: &mut rng(12) }, &cfg);
    let mut r = rng(13);
    let side = cfg.level_sides()[2];
    let a = full(rand_tensor(&mut r, &[3, side, side, cfg.bottleneck_dim()]));
    let b = full(rand_tensor(&mut r, &[3, side, side, cfg.bottleneck_dim()]));
    let eval = |seed| {
        let g = Graph::new(&store, false, rng(seed));
        head.forward(&g, &a, &b).value().clone()
    };
    let l1 = eval(1);
    assert_eq!(l1.shape(), &[3, 8]);
    assert_eq!(l1, eval(2));
    let probs = Var::constant(l1).softmax_last(None);
    for row in probs.data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let g = Graph::new(&store, true, rng(1));
    assert_ne!(head.forward(&g, &a, &b).value(), &eval(1));
}

#[test]
fn frequency_fusion_gradients() {
    let (mut store, f) = fusion(14, 2);
    let mut r = rng(15);
    let a = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let b = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let mask = Tensor::new(vec![1, 4, 4, 1], (0..16).map(|i| if i % 4 == 1 { 0.0 } else { 1.0 }).collect());
    let proj = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let rep = check(&mut store, &[a, b], GradCheckOptions::default(), |g, v| {
        let s = TokenGrid { feat: v[0].clone(), mask: TokenGrid::full_mask(1, 4, 4) };
        let q = TokenGrid { feat: v[1].clone(), mask: mask.clone() };
        f.forward(g, &s, &q).unwrap().feat.mul_const(&proj).sum_all()
    });
    assert!(rep.pass_fraction() >= 0.99, "{rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fusion_ignores_masked_skip_values(seed in 0u64..10_000) {
        let (store, f) = skip_fusion(seed, 4);
        let g = Graph::new(&store, false, rng(0));
        let mut r = rng(seed + 1);
        let mk = |r: &mut ChaCha8Rng| (rand_tensor(r, &[1, 8, 8, 4]), rand_mask(r, 1, 8, 8, 0.6));
        let (s, sm) = mk(&mut r);
        let (q, qm) = mk(&mut r);
        let d = full(rand_tensor(&mut r, &[1, 8, 8, 4]));
        let noisy = |t: &Tensor, m: &Tensor, r: &mut ChaCha8Rng| {
            let mut t = t.clone();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if m.data()[i / 4] == 0.0 {
                    *v = r.random_range(-100.0..100.0);
                }
            }
            t
        };
        let grid = |t: Tensor, m: &Tensor| TokenGrid { feat: Var::constant(t), mask: m.clone() };
        let a = f.forward(&g, &grid(s.clone(), &sm), &grid(q.clone(), &qm), &d).unwrap();
        let b = f
            .forward(&g, &grid(noisy(&s, &sm, &mut r), &sm), &grid(noisy(&q, &qm, &mut r), &qm), &d)
            .unwrap();
        prop_assert!(max_diff(a.feat.data(), b.feat.data()) < 1e-6);
    }
}
