use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, GradCheckOptions};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Projects an arbitrary output onto a fixed random direction.
fn project(out: &Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, out.shape());
    out.mul_const(&w).sum_all()
}

fn assert_grads(inputs: &[Tensor], f: impl Fn(&[Var]) -> Var) {
    let mut store = ParamStore::new();
    let report = check(&mut store, inputs, GradCheckOptions::default(), |_, v| {
        project(&f(v), 99)
    });
    assert_eq!(
        report.passed, report.checked,
        "gradient check failed: {report:?}"
    );
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let c = rand_tensor(&mut rng, &[2, 1, 4]);
    let pos = Tensor::new(vec![3, 4], (0..12).map(|i| 0.5 + i as f64 * 0.1).collect());
    assert_grads(&[a.clone(), b.clone()], |v| v[0].add(&v[1]));
    assert_grads(&[a.clone(), c.clone()], |v| v[0].sub(&v[1]));
    assert_grads(&[a.clone(), c.clone()], |v| v[0].mul(&v[1]));
    assert_grads(&[a.clone(), pos.clone()], |v| v[0].div(&v[1]));
    assert_grads(&[a.clone()], |v| v[0].gelu().sigmoid().tanh());
    assert_grads(&[pos.clone()], |v| v[0].ln().add(&v[0].sqrt()).add(&v[0].exp()));
    assert_grads(&[a.clone()], |v| v[0].square().scale(0.3).add_scalar(1.0));
}

#[test]
fn reductions_and_movement_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4]);
    assert_grads(&[a.clone()], |v| v[0].sum_axis(1));
    assert_grads(&[a.clone()], |v| v[0].mean_axis(2));
    assert_grads(&[a.clone()], |v| v[0].permute(&[2, 0, 1]));
    assert_grads(&[a.clone()], |v| v[0].narrow(1, 1, 2));
    assert_grads(&[a.clone()], |v| v[0].roll(&[(1, 1), (2, -3)]));
    assert_grads(&[a.clone(), b.clone()], |v| Var::concat(&[v[0].clone(), v[1].clone()], 1));
    assert_grads(&[a.clone()], |v| v[0].reshape(&[6, 4]).mean_all());
}

#[test]
fn matmul_gradients_shared_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let bb = rand_tensor(&mut rng, &[2, 4, 2]);
    assert_grads(&[a.clone(), w], |v| v[0].matmul(&v[1]));
    assert_grads(&[a, bb], |v| v[0].matmul(&v[1]));
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[5, 2]);
    let c = Var::constant(a.clone()).matmul(&Var::constant(b.clone()));
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..5).map(|k| a.data()[i * 5 + k] * b.data()[k * 2 + j]).sum();
            assert!((c.data()[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_masked_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let allowed = Rc::new(vec![
        true, false, true, true, //
        false, false, false, false, //
        true, true, true, true,
    ]);
    let y = Var::constant(x.clone()).softmax_last(Some(allowed.clone()));
    let y = y.data();
    assert!((y[0] + y[2] + y[3] - 1.0).abs() < 1e-12);
    assert_eq!(y[1], 0.0);
    assert!(y[4..8].iter().all(|&v| v == 0.0));
    assert!((y[8..12].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_grads(&[x], move |v| v[0].softmax_last(Some(allowed.clone())));
}

#[test]
fn layer_norm_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let g = rand_tensor(&mut rng, &[5]);
    let b = rand_tensor(&mut rng, &[5]);
    assert_grads(&[x.clone(), g, b], |v| v[0].layer_norm(&v[1], &v[2], 1e-5));
    assert_grads(&[x], |v| v[0].cross_entropy(&[0, 4, 2]));
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_k() {
    let x = Var::constant(Tensor::zeros(&[4, 8]));
    let l = x.cross_entropy(&[0, 1, 2, 7]);
    assert!((l.data()[0] - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn fft_and_complex_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = rand_tensor(&mut rng, &[2, 4, 3, 2]);
    assert_grads(&[z.clone()], |v| v[0].fft2(false));
    assert_grads(&[z.clone()], |v| v[0].fft2(true));
    assert_grads(&[z.clone()], |v| v[0].complex_abs());
    assert_grads(&[z.clone()], |v| v[0].complex_angle());
    let amp = rand_tensor(&mut rng, &[2, 3]);
    let ph = rand_tensor(&mut rng, &[2, 3]);
    assert_grads(&[amp, ph], |v| Var::polar(&v[0], &v[1]));
}

#[test]
fn fft_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w) = (4, 6);
    let z = rand_tensor(&mut rng, &[h, w, 2]);
    let f = Var::constant(z.clone()).fft2(false);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI
                        * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    let (a, b) = (z.data()[(y * w + x) * 2], z.data()[(y * w + x) * 2 + 1]);
                    re += a * ang.cos() - b * ang.sin();
                    im += a * ang.sin() + b * ang.cos();
                }
            }
            let k = (u * w + v) * 2;
            assert!((f.data()[k] - re).abs() < 1e-10);
            assert!((f.data()[k + 1] - im).abs() < 1e-10);
        }
    }
    let back = f.fft2(true);
    assert!(back.value().max_abs_diff(&z) < 1e-12);
}

#[test]
fn im2col_gradient_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[1, 4, 5, 2]);
    assert_grads(&[x.clone()], |v| v[0].im2col(3, 3, 1, 1));
    assert_grads(&[x.clone()], |v| v[0].im2col(2, 2, 2, 0));
    let cols = Var::constant(x.clone()).im2col(3, 3, 1, 1);
    assert_eq!(cols.shape(), &[1, 4, 5, 18]);
    // centre tap of output (1, 2) is input (1, 2)
    let centre = &cols.data()[(5 + 2) * 18 + 8..(5 + 2) * 18 + 10];
    assert_eq!(centre, &x.data()[(5 + 2) * 2..(5 + 2) * 2 + 2]);
    // top-left tap of output (0, 0) lies in the padding
    assert_eq!(&cols.data()[0..2], &[0.0, 0.0]);
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Var::leaf(Tensor::new(vec![1], vec![3.0]));
    let y = x.mul(&x).add(&x);
    y.backward();
    assert_eq!(x.grad().unwrap(), vec![7.0]);
}

#[test]
fn adamw_keeps_f32_representable_state() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]));
    let mut opt = AdamW::new(AdamWConfig::default());
    for _ in 0..3 {
        opt.step(&mut store, &[(id, vec![0.5, -0.25, 1e-3, 2.0])], 1e-2);
    }
    for &v in store.value(id).data() {
        assert_eq!(v, round_f32(v));
    }
    for &v in &opt.m[&id] {
        assert_eq!(v, round_f32(v));
    }
    assert!(store.value(id).data()[0] < 0.1);
}
