//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs under `cargo test` as a harness-free test target.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mast_core::autograd::gradcheck::{check, GradCheckOptions, GradCheckReport};
use mast_core::autograd::{Graph, Init, ParamStore, Tensor, Var};
use mast_core::config::RunConfig;
use mast_core::dataio::{
    make_trial, segment_windows, Database, DatasetManifest, TrialEntry, TrialMeta, CHANNELS, SAMPLE_RATE_HZ,
};
use mast_core::decoder::{amplitude_phase, real_inverse, FrequencyFusion};
use mast_core::encoder::{ModelConfig, PathKind, SgCma};
use mast_core::eval::{
    confusion_matrix, load_windows, majority_vote, run_experiment, ExperimentProtocol, Split, WindowRef,
};
use mast_core::masking::{generate_mask, MaskStrategy, MaskingConfig};
use mast_core::model::{Batch, MastModel};
use mast_core::nn::{PartialConv, SwinBlock, TokenGrid};
use mast_core::synth::{write_dataset, SynthSpec};
use mast_core::training::{contrastive_loss, predict, run_stage, stage1_loss, Checkpoint, RunOptions};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn rand_mask(r: &mut ChaCha8Rng, b: usize, h: usize, w: usize, p_valid: f64) -> Tensor {
    let data = (0..b * h * w).map(|_| if r.random::<f64>() < p_valid { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![b, h, w, 1], data)
}

fn grid(feat: Var, mask: &Tensor) -> TokenGrid {
    TokenGrid { feat, mask: mask.clone() }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn window_count() -> Outcome {
    let meta = TrialMeta {
        db: Database::Dba,
        subject: 1,
        gesture: 1,
        session: 1,
        trial: 1,
        fs: SAMPLE_RATE_HZ,
    };
    let raw: Vec<f64> = (0..CHANNELS * 1000).map(|i| (i % 97) as f64 * 0.01).collect();
    let rec = make_trial(&raw, CHANNELS, meta).map_err(|e| e.to_string())?;
    let windows = segment_windows(&rec).map_err(|e| e.to_string())?;
    ensure(windows.len() == 32, || format!("{} windows", windows.len()))?;
    ensure(windows.iter().all(|w| w.data.len() == 128 * 128), || "window shape".into())?;
    // the last window starts at 31 * 28 = 868 and ends at 996
    let last = &windows[31];
    ensure(last.data[0] == rec.channel(0)[868] && last.data[127] == rec.channel(0)[995], || {
        "window offsets".into()
    })?;
    Ok("32 windows of 128x128".into())
}

/// Nested-loop partial convolution with the renormalised update rule.
fn partial_conv_loop(conv: &PartialConv, store: &ParamStore, x: &Tensor, mask: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (b, h, w, ci) = (s[0], s[1], s[2], s[3]);
    let (k, st, pad, co) = (conv.kernel, conv.stride, conv.pad, conv.c_out);
    let ho = (h + 2 * pad - k) / st + 1;
    let wo = (w + 2 * pad - k) / st + 1;
    let wt = store.value(conv.weight).data();
    let bias = conv.bias.map(|id| store.value(id).data().to_vec());
    let mut out = Vec::new();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = vec![0.0; co];
                let (mut inside, mut valid) = (0.0, 0.0);
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * st + ky) as isize - pad as isize;
                        let xx = (ox * st + kx) as isize - pad as isize;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let (y, xx) = (y as usize, xx as usize);
                        inside += 1.0;
                        let m = mask.data()[(bi * h + y) * w + xx];
                        valid += m;
                        for c in 0..ci {
                            let v = x.data()[((bi * h + y) * w + xx) * ci + c] * m;
                            for (o, a) in acc.iter_mut().enumerate() {
                                *a += v * wt[((ky * k + kx) * ci + c) * co + o];
                            }
                        }
                    }
                }
                for (o, a) in acc.iter().enumerate() {
                    out.push(if valid > 0.0 {
                        a * inside / valid + bias.as_ref().map_or(0.0, |bb| bb[o])
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    out
}

/// Zero-padded dense convolution, independent of any mask logic.
fn dense_conv_loop(conv: &PartialConv, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (b, h, w, ci) = (s[0], s[1], s[2], s[3]);
    let (k, st, pad, co) = (conv.kernel, conv.stride, conv.pad, conv.c_out);
    let ho = (h + 2 * pad - k) / st + 1;
    let wo = (w + 2 * pad - k) / st + 1;
    let wt = store.value(conv.weight).data();
    let bias = conv.bias.map(|id| store.value(id).data().to_vec());
    let mut out = Vec::new();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut acc = bias.as_ref().map_or(0.0, |bb| bb[o]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * st + ky) as isize - pad as isize;
                            let xx = (ox * st + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.data()[((bi * h + y as usize) * w + xx as usize) * ci + c]
                                    * wt[((ky * k + kx) * ci + c) * co + o];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn partial_conv_equivalence() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = [1usize, 2, 3][r.random_range(0..3)];
        let (stride, pad) = match k {
            2 => (2, 0),
            3 => (1, 1),
            _ => (1, 0),
        };
        let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
        let mut store = ParamStore::new();
        let conv = PartialConv::new(&mut Init { store: &mut store, rng: &mut r }, "pc", ci, co, k, stride, pad, true);
        let x = rand_tensor(&mut r, &[1, 8, 8, ci]);
        let p = r.random_range(0.1..0.9);
        let mask = rand_mask(&mut r, 1, 8, 8, p);
        let g = Graph::new(&store, false, rng(0));
        let out = conv.forward(&g, &grid(Var::constant(x.clone()), &mask));
        worst = worst.max(max_diff(out.feat.data(), &partial_conv_loop(&conv, &store, &x, &mask)));
    }
    ensure(worst < 1e-6, || format!("masked max error {worst:e}"))?;

    // all-ones mask against a zero-padded standard convolution
    let mut dense_worst: f64 = 0.0;
    for _ in 0..200 {
        let k = [1usize, 2, 3][r.random_range(0..3)];
        let pad = if k == 3 { 1 } else { 0 };
        let mut store = ParamStore::new();
        let conv = PartialConv::new(&mut Init { store: &mut store, rng: &mut r }, "pc", 2, 3, k, 1, pad, true);
        let x = rand_tensor(&mut r, &[1, 8, 8, 2]);
        let g = Graph::new(&store, false, rng(0));
        let out = conv.forward(&g, &grid(Var::constant(x.clone()), &TokenGrid::full_mask(1, 8, 8)));
        let want = dense_conv_loop(&conv, &store, &x);
        dense_worst = dense_worst.max(max_diff(out.feat.data(), &want));
        let dense = conv.forward_dense(&g, &Var::constant(x));
        dense_worst = dense_worst.max(max_diff(dense.data(), &want));
    }
    ensure(dense_worst < 1e-6, || format!("full-mask max error {dense_worst:e}"))?;
    Ok(format!("masked {worst:.1e}, full mask {dense_worst:.1e}"))
}

fn masked_value_invariance() -> Outcome {
    let cfg = ModelConfig::toy();
    let side = cfg.input_size;
    let (model, store) = MastModel::new(&cfg, 3).map_err(|e| e.to_string())?;
    let g = Graph::new(&store, false, rng(0));
    let masking = MaskingConfig::default().scaled_to(side);
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let strategy = MaskStrategy::ALL[i % 4];
        let mask = mast_core::masking::generate_mask_sized(strategy, &masking, side, &mut r)
            .map_err(|e| e.to_string())?
            .to_f64();
        let window: Vec<f64> = (0..side * side).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut noisy = window.clone();
        for (v, &m) in noisy.iter_mut().zip(&mask) {
            if m == 0.0 {
                *v = r.random_range(-1.0..1.0) * 100.0;
            }
        }
        let batch = |w: Vec<f64>| Batch {
            side,
            windows: vec![w],
            masks: vec![mask.clone()],
            labels: vec![0],
            sample_ids: vec![0],
        };
        let (a, b) = (batch(window), batch(noisy));
        for kind in [PathKind::Time, PathKind::Frequency, PathKind::Magnitude] {
            let oa = model.encode(&g, &a, kind).map_err(|e| e.to_string())?;
            let ob = model.encode(&g, &b, kind).map_err(|e| e.to_string())?;
            for (sa, sb) in oa.skips.iter().chain([&oa.bottleneck]).zip(ob.skips.iter().chain([&ob.bottleneck])) {
                worst = worst.max(sa.feat.value().max_abs_diff(sb.feat.value()));
            }
        }
    }
    ensure(worst < 1e-6, || format!("max change {worst:e}"))?;
    Ok(format!("max change {worst:.1e} over 50 windows x 3 paths"))
}

fn fft_round_trip() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = [r.random_range(1..3), r.random_range(1..9), r.random_range(1..9), r.random_range(1..5)];
        let x = rand_tensor(&mut r, &shape);
        let (amp, phase) = amplitude_phase(&Var::constant(x.clone()));
        worst = worst.max(real_inverse(&amp, &phase).value().max_abs_diff(&x));
    }
    ensure(worst < 1e-6, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn gradient_checks() -> Outcome {
    let opts = GradCheckOptions::default();
    let mut r = rng(6);
    let mut lines = Vec::new();
    let mut verdict = |name: &str, rep: GradCheckReport| -> Result<(), String> {
        lines.push(format!("{name} {}/{}", rep.passed, rep.checked));
        ensure(rep.pass_fraction() >= 0.99, || format!("{name}: {rep:?}"))
    };
    let mask = Tensor::new(vec![1, 4, 4, 1], (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect());

    let x = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let proj = rand_tensor(&mut r, &[1, 4, 4, 3]);
    let mut store = ParamStore::new();
    let conv = PartialConv::new(&mut Init { store: &mut store, rng: &mut r }, "pc", 2, 3, 3, 1, 1, true);
    let rep = check(&mut store, &[x.clone()], opts, |g, v| {
        conv.forward(g, &grid(v[0].clone(), &mask)).feat.mul_const(&proj).sum_all()
    });
    verdict("partial_conv", rep)?;

    let proj = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let mut store = ParamStore::new();
    let blk = SwinBlock::new(&mut Init { store: &mut store, rng: &mut r }, "blk", 2, 2, 8, true);
    let rep = check(&mut store, &[x.clone()], opts, |g, v| {
        blk.forward(g, &grid(v[0].clone(), &mask)).unwrap().feat.mul_const(&proj).sum_all()
    });
    verdict("swin_block", rep)?;

    let q = rand_tensor(&mut r, &[1, 2, 2, 4]);
    let kv = rand_tensor(&mut r, &[1, 2, 2, 4]);
    let kv_mask = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 0.0, 1.0, 1.0]);
    let proj4 = rand_tensor(&mut r, &[1, 2, 2, 4]);
    let mut store = ParamStore::new();
    let cma = SgCma::new(&mut Init { store: &mut store, rng: &mut r }, "cma", 4, 2);
    let rep = check(&mut store, &[q, kv], opts, |g, v| {
        let a = grid(v[0].clone(), &TokenGrid::full_mask(1, 2, 2));
        let b = grid(v[1].clone(), &kv_mask);
        cma.forward(g, &a, &b).unwrap().feat.mul_const(&proj4).sum_all()
    });
    verdict("sg_cma", rep)?;

    let a = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let b = rand_tensor(&mut r, &[1, 4, 4, 2]);
    let mut store = ParamStore::new();
    let fusion = FrequencyFusion::new(&mut Init { store: &mut store, rng: &mut r }, "ff", 2);
    let rep = check(&mut store, &[a, b], opts, |g, v| {
        let s = grid(v[0].clone(), &TokenGrid::full_mask(1, 4, 4));
        let f = grid(v[1].clone(), &mask);
        fusion.forward(g, &s, &f).unwrap().feat.mul_const(&proj).sum_all()
    });
    verdict("frequency_fusion", rep)?;
    Ok(lines.join(", "))
}

/// Pair-enumeration contrastive objective over unit-normalised latents:
/// positives are other paths of the same row, negatives are rows with a
/// different sample id.
fn contrastive_enumeration(latents: &[Vec<Vec<f64>>], ids: &[usize], tau: f64) -> f64 {
    let mut z: Vec<(usize, Vec<f64>)> = Vec::new();
    for path in latents {
        for (i, v) in path.iter().enumerate() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            z.push((i, v.iter().map(|x| x / n).collect()));
        }
    }
    let sim = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau;
    let (mut total, mut count) = (0.0, 0usize);
    for (a, (ia, za)) in z.iter().enumerate() {
        for (p, (ip, zp)) in z.iter().enumerate() {
            if a == p || ia != ip {
                continue;
            }
            let pos = sim(za, zp).exp();
            let neg: f64 = z.iter().filter(|(i, _)| ids[*i] != ids[*ia]).map(|(_, zn)| sim(za, zn).exp()).sum();
            total -= (pos / (pos + neg)).ln();
            count += 1;
        }
    }
    total / count as f64
}

fn loss_values() -> Outcome {
    let target = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]);
    let mask = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
    let mu = Var::constant(Tensor::full(&[1, 3], 1.0));
    let logvar = Var::constant(Tensor::zeros(&[1, 3]));
    let l = stage1_loss(&Var::constant(target.clone()), &target, &mask, &mu, &logvar, 1.0, 0.0);
    let s1 = l.total.data()[0];
    ensure((s1 - 0.5).abs() < 1e-12, || format!("stage1_loss {s1}"))?;

    let logits = Var::constant(Tensor::full(&[6, 8], -0.4));
    let ce = logits.cross_entropy(&[0, 1, 2, 3, 7, 5]).data()[0];
    ensure((ce - 8f64.ln()).abs() < 1e-6, || format!("cross-entropy {ce}"))?;

    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let b = r.random_range(2..=4);
        let d = r.random_range(2..6);
        let ids: Vec<usize> = (0..b).map(|i| if r.random_bool(0.3) { 0 } else { i }).collect();
        if ids.iter().all(|&i| i == ids[0]) {
            continue;
        }
        let lat: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..b).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let vars: Vec<Var> = lat
            .iter()
            .map(|p| Var::constant(Tensor::new(vec![b, d], p.concat())))
            .collect();
        let tau = r.random_range(0.05..1.0);
        let got = contrastive_loss(&vars, &ids, tau).map_err(|e| e.to_string())?.data()[0];
        worst = worst.max((got - contrastive_enumeration(&lat, &ids, tau)).abs());
    }
    ensure(worst < 1e-6, || format!("contrastive max error {worst:e}"))?;
    Ok(format!("stage1 {s1}, ce {ce:.6}, contrastive {worst:.1e}"))
}

fn masking_ratio() -> Outcome {
    let cfg = MaskingConfig::default();
    let mut r = rng(9);
    for _ in 0..20 {
        let t = generate_mask(MaskStrategy::Temporal, &cfg, &mut r).map_err(|e| e.to_string())?;
        let cols = (0..128).filter(|&c| !t.is_valid(0, c)).count();
        let homogeneous = (0..128).all(|c| (0..128).all(|s| t.is_valid(s, c) == t.is_valid(0, c)));
        ensure(cols == 64 && homogeneous, || format!("temporal masked {cols} columns"))?;
        let s = generate_mask(MaskStrategy::SensorWise, &cfg, &mut r).map_err(|e| e.to_string())?;
        let rows = (0..128).filter(|&c| !s.is_valid(c, 0)).count();
        let homogeneous = (0..128).all(|c| (0..128).all(|t| s.is_valid(c, t) == s.is_valid(c, 0)));
        ensure(rows == 64 && homogeneous, || format!("sensor-wise masked {rows} rows"))?;
    }
    let mut extremes = Vec::new();
    for strategy in [MaskStrategy::RandomBlock, MaskStrategy::MultiScale] {
        let (mut lo, mut hi) = (1.0f64, 0.0f64);
        for seed in 0..100 {
            let f = generate_mask(strategy, &cfg, &mut rng(seed)).map_err(|e| e.to_string())?.masked_fraction();
            lo = lo.min(f);
            hi = hi.max(f);
        }
        ensure((lo - 0.5).abs() <= 0.02 && (hi - 0.5).abs() <= 0.02, || {
            format!("{strategy:?} ratio range [{lo}, {hi}]")
        })?;
        extremes.push(format!("{strategy:?} [{lo:.4}, {hi:.4}]"));
    }
    Ok(format!("64/128 exact; {}", extremes.join(", ")))
}

fn toy_config() -> Result<RunConfig, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    RunConfig::load(Some(&path), &[]).map_err(|e| e.to_string())
}

struct ToyRun {
    train_acc: f64,
    frame_acc: f64,
    vote_acc: f64,
}

/// Synthetic data, intra-session split, optional Stage 1 and 2, then Stage 3.
fn toy_run(cfg: &RunConfig, data_seed: u64, pretrain: bool) -> Result<ToyRun, String> {
    let err = |e: mast_core::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = write_dataset(dir.path(), &SynthSpec::new(128, data_seed)).map_err(err)?;
    let split = Split::build(cfg.protocol, &manifest, cfg.seed).map_err(err)?;
    let train = load_windows(&manifest, &split.train, cfg.model.input_size).map_err(err)?;
    ensure(train.len() == 64 && split.test.len() == 64, || {
        format!("{} train / {} test windows", train.len(), split.test.len())
    })?;
    let opts = RunOptions {
        split: Some(split.tag(&manifest)),
        ..Default::default()
    };
    let mut init: Option<Checkpoint> = None;
    if pretrain {
        for stage in [1, 2] {
            let ck = run_stage(cfg.stage(stage), &cfg.masking, &cfg.model, &train, init.as_ref(), &opts).map_err(err)?;
            init = Some(ck);
        }
    }
    let mut s3 = cfg.stage3.clone();
    s3.from_scratch = !pretrain;
    let ck = run_stage(&s3, &cfg.masking, &cfg.model, &train, init.as_ref(), &opts).map_err(err)?;
    let (model, store) = ck.restore().map_err(err)?;
    let preds = predict(&model, &store, &train, 16).map_err(err)?;
    let train_acc = preds.iter().zip(&train).filter(|(p, w)| **p == w.label).count() as f64 / train.len() as f64;
    let report = run_experiment(cfg.protocol, &manifest, &ck, cfg.seed).map_err(err)?;
    Ok(ToyRun {
        train_acc,
        frame_acc: report.frame_accuracy.mean,
        vote_acc: report.vote_accuracy.mean,
    })
}

fn toy_pipeline() -> Outcome {
    let cfg = toy_config()?;
    let run = toy_run(&cfg, cfg.seed, true)?;
    let detail = format!(
        "train {:.3}, test frame {:.3}, test vote {:.3}",
        run.train_acc, run.frame_acc, run.vote_acc
    );
    ensure(run.train_acc >= 0.95 && run.vote_acc >= 0.80, || detail.clone())?;
    Ok(detail)
}

fn pretraining_benefit() -> Outcome {
    let base = toy_config()?;
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let cfg = RunConfig { seed, ..base.clone() }.resolved().map_err(|e| e.to_string())?;
        with.push(toy_run(&cfg, seed, true)?.frame_acc);
        without.push(toy_run(&cfg, seed, false)?.frame_acc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let detail = format!("pretrained {a:.4} vs scratch {b:.4} (per seed {with:.3?} vs {without:.3?})");
    ensure(a >= b, || detail.clone())?;
    Ok(detail)
}

fn manifest_entry(db: Database, subject: u32, session: u32, gesture: u32, trial: u32) -> TrialEntry {
    TrialEntry {
        path: PathBuf::from(format!("{}/s{subject}/g{gesture}/t{trial}_sess{session}.f32", db.dir_name())),
        db,
        subject,
        gesture,
        session,
        trial,
        fs: SAMPLE_RATE_HZ,
        channels: CHANNELS,
        samples: 1000,
    }
}

fn protocol_correctness() -> Outcome {
    let err = |e: mast_core::Error| e.to_string();
    let mut trials = Vec::new();
    for s in 1..=3 {
        for g in 1..=8 {
            for t in 1..=10 {
                trials.push(manifest_entry(Database::Dba, s, 1, g, t));
            }
        }
    }
    let dba = DatasetManifest { root: PathBuf::from("/unused"), trials };
    let split = Split::build(ExperimentProtocol::IntraSessionDba, &dba, 0).map_err(err)?;
    let mut reps: BTreeMap<(u32, u32), [std::collections::BTreeSet<u32>; 2]> = BTreeMap::new();
    for (side, refs) in [&split.train, &split.test].into_iter().enumerate() {
        for w in refs {
            let t = &dba.trials[w.trial];
            reps.entry((t.subject, t.gesture)).or_default()[side].insert(t.trial);
        }
    }
    ensure(reps.len() == 24, || "missing (subject, gesture) groups".into())?;
    for ((s, g), [train, test]) in &reps {
        ensure(train.len() == 5 && test.len() == 5 && train.is_disjoint(test), || {
            format!("subject {s} gesture {g}: {} train / {} test repetitions", train.len(), test.len())
        })?;
    }

    let mut trials = Vec::new();
    for s in 1..=2 {
        for sess in 1..=2 {
            for g in 1..=8 {
                for t in 1..=3 {
                    trials.push(manifest_entry(Database::Dbb, s, sess, g, t));
                }
            }
        }
    }
    let dbb = DatasetManifest { root: PathBuf::from("/unused"), trials };
    let split = Split::build(ExperimentProtocol::AdaptationDbb { fraction: 0.10 }, &dbb, 11).map_err(err)?;
    let mut moved_total = 0usize;
    for s in 1..=2 {
        for g in 1..=8 {
            let in_group = |w: &&WindowRef| {
                let t = &dbb.trials[w.trial];
                t.subject == s && t.gesture == g && t.session == 2
            };
            let moved = split.train.iter().filter(in_group).count();
            let total = moved + split.test.iter().filter(in_group).count();
            ensure((moved as f64 - 0.10 * total as f64).abs() <= 1.0, || {
                format!("subject {s} gesture {g}: moved {moved} of {total}")
            })?;
            moved_total += moved;
        }
    }

    let mut r = rng(12);
    for _ in 0..1000 {
        let k = r.random_range(1..9);
        let n = r.random_range(1..40);
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut counts = vec![0usize; k];
        for &p in &preds {
            counts[p] += 1;
        }
        let top = *counts.iter().max().unwrap();
        let modal = counts.iter().position(|&c| c == top).unwrap();
        let vote = majority_vote(&preds).map_err(err)?;
        ensure(vote == modal, || format!("vote {vote} for {preds:?}"))?;
        let mut oracle = vec![vec![0u64; k]; k];
        for (&l, &p) in labels.iter().zip(&preds) {
            oracle[l][p] += 1;
        }
        let cm = confusion_matrix(&preds, &labels, k).map_err(err)?;
        ensure(cm == oracle, || format!("confusion for {preds:?} / {labels:?}"))?;
    }
    Ok(format!("5/5 repetitions per group; {moved_total} windows moved; 1000 vote/confusion cases"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("window count", Duration::from_secs(1), window_count),
        ("partial convolution oracle", Duration::from_secs(10), partial_conv_equivalence),
        ("masked-value invariance", Duration::from_secs(30), masked_value_invariance),
        ("FFT round trip", Duration::from_secs(5), fft_round_trip),
        ("gradient checks", Duration::from_secs(120), gradient_checks),
        ("loss unit values", Duration::from_secs(10), loss_values),
        ("masking ratio", Duration::from_secs(10), masking_ratio),
        ("toy pipeline", Duration::from_secs(15 * 60), toy_pipeline),
        ("pretraining benefit", Duration::from_secs(3600), pretraining_benefit),
        ("protocol correctness", Duration::from_secs(10), protocol_correctness),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > *budget => Err(format!("{d}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{took:.1?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
