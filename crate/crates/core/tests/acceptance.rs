//! End-to-end acceptance checks. Each test prints one
//! `criterion N: PASS|FAIL ...` line with the measured value and the pinned
//! tolerance, then asserts.

use std::path::Path;
use std::time::{Duration, Instant};

use hcd_core::autograd::{Ops, Tape};
use hcd_core::checkpoint::load_checkpoint;
use hcd_core::data::{index_dataset, load_pairs, HazePair};
use hcd_core::eval::{psnr, ssim, PsnrMode};
use hcd_core::gradcheck::{relative_error, sample_indices, smooth_central_difference};
use hcd_core::haze::{compose_haze, invert_asm, synth_dataset, SynthConfig};
use hcd_core::losses::{
    charbonnier_loss, hcl_loss, hcl_loss_with_grad, total_loss_with_grad, write_random_vgg19, LossConfig,
    PerceptualEncoder,
};
use hcd_core::network::{
    feb_forward, hfb_forward, init_weights, Fab, Feb, Hdn, Hfb, ModelConfig, Standalone, Variant,
};
use hcd_core::train::{lr_at, run_training, RunOptions, TrainConfig, TrainState, Trainer};
use hcd_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

// ---------------------------------------------------------------- oracles

/// Bilinear resize, half-pixel centres, clamped edges; written out
/// independently of the library kernel.
fn oracle_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (oh, ow) {
        return x.clone();
    }
    let src = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, p - lo as f64)
    };
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                let (y0, y1, fy) = src(y, oh, s.h);
                for xx in 0..ow {
                    let (x0, x1, fx) = src(xx, ow, s.w);
                    let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
                    let bot = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
                    out.set(n, c, y, xx, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

fn oracle_mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Literal triple loop over (i, j, k) with features from `embed`.
fn oracle_hcl(
    embed: &dyn Fn(&Tensor) -> Vec<Tensor>,
    coeffs: &[f64],
    a: &[Tensor],
    p: &[Tensor],
    n: &[Tensor],
) -> f64 {
    let mid = p[p.len() / 2].shape();
    let feats = |xs: &[Tensor]| -> Vec<Vec<Tensor>> { xs.iter().map(|x| embed(&oracle_resize(x, mid.h, mid.w))).collect() };
    let (fa, fp, fneg) = (feats(a), feats(p), feats(n));
    let d = |x: &[Tensor], y: &[Tensor]| -> f64 { coeffs.iter().zip(x.iter().zip(y)).map(|(c, (u, v))| c * oracle_mean_l1(u, v)).sum() };
    let mut total = 0.0;
    for ai in &fa {
        for pj in &fp {
            for nk in &fneg {
                total += d(ai, pj) / d(ai, nk).max(1e-7);
            }
        }
    }
    total
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Direct 2-D windowed SSIM on the channel-mean image.
fn oracle_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let s = x.shape();
    let gray = |t: &Tensor, r: usize, c: usize| (0..s.c).map(|ch| t.at(0, ch, r, c)).sum::<f64>() / s.c as f64;
    let mut g = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=s.h - 11 {
        for c in 0..=s.w - 11 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in g.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    let w = w / z;
                    let a = gray(x, r + i, c + j);
                    let b = gray(y, r + i, c + j);
                    mx += w * a;
                    my += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    acc / count as f64
}

fn pyramid(n: usize, c: usize, side: usize, lo: f64, hi: f64, seed: u64) -> [Tensor; 3] {
    [0, 1, 2].map(|k| uniform(Shape::new(n, c, side >> k, side >> k), lo, hi, seed * 10 + k as u64))
}

fn jittered(s: &Standalone<impl Sized>, seed: u64) -> hcd_core::network::NetworkWeights {
    let mut w = s.init(seed);
    let mut r = rng(seed + 1);
    for t in w.tensors_mut() {
        t.add_assign(&Tensor::uniform(t.shape(), -0.2, 0.2, &mut r));
    }
    w
}

/// Worst relative error over a few sampled entries of each input, comparing
/// `grads` against central differences of `f` at step 1e-4.
fn fd_check(xs: &[Tensor], grads: &[Tensor], per_tensor: usize, f: impl Fn(&[Tensor]) -> f64) -> (f64, usize, usize) {
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for k in 0..xs.len() {
        let idx = sample_indices(xs[k].len(), per_tensor, 500 + k as u64);
        let mut cur = xs.to_vec();
        let kept = smooth_central_difference(&xs[k], &idx, 1e-4, |xp| {
            cur[k] = xp.clone();
            f(&cur)
        });
        let a: Vec<f64> = kept.iter().map(|&(i, _)| grads[k].data()[i]).collect();
        let n: Vec<f64> = kept.iter().map(|&(_, d)| d).collect();
        worst = worst.max(relative_error(&a, &n));
        checked += kept.len();
        skipped += idx.len() - kept.len();
    }
    (worst, checked, skipped)
}

// ------------------------------------------------------------- criteria

#[test]
fn criterion_01_zero_weight_identities() {
    let start = Instant::now();
    let hfb = Standalone::build(|b| Hfb::new(b, "hfb", 8));
    let f = [0, 1, 2].map(|k| uniform(Shape::new(2, 8 << k, 16 >> k, 16 >> k), -1.0, 1.0, 1 + k as u64));
    let y = hfb_forward(&hfb.block, &hfb.init(2).zeros_like(), &f).unwrap();
    let dev_hfb = (0..3).map(|k| max_abs(&y[k], &f[k])).fold(0.0, f64::max);

    let feb = Standalone::build(|b| Feb::new(b, "feb", 8, 4, 12));
    let x = uniform(Shape::new(2, 8, 12, 12), -1.0, 1.0, 3);
    let dev_feb = max_abs(&feb_forward(&feb.block, &feb.init(4).zeros_like(), &x), &x);

    let (net, mut w) = init_weights(&ModelConfig::toy(4, 1)).unwrap();
    w.zero_prefix("moirm.head.");
    let img = uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, 5);
    let dev_head = max_abs(&net.dehaze(&w, &img).unwrap()[0], &img);

    let dev = dev_hfb.max(dev_feb).max(dev_head);
    let t = start.elapsed();
    verdict(
        1,
        dev == 0.0 && t < Duration::from_secs(1),
        format!("max abs deviation hfb={dev_hfb:e} feb={dev_feb:e} head={dev_head:e} (tol 0.0), {t:.2?} (limit 1s)"),
    );
}

#[test]
fn criterion_02_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut skipped_total = (0usize, 0usize);
    let mut note = |name: &str, (e, c, s): (f64, usize, usize)| {
        worst.push((name.to_string(), e));
        skipped_total.0 += c;
        skipped_total.1 += s;
    };

    // blocks: weights and inputs
    let block_check = |report: Vec<hcd_core::gradcheck::GradCheck>| {
        let w = hcd_core::gradcheck::worst(&report).unwrap().rel_err;
        let c: usize = report.iter().map(|r| r.checked).sum();
        let s: usize = report.iter().map(|r| r.skipped).sum();
        (w, c, s)
    };
    let hfb = Standalone::build(|b| Hfb::new(b, "hfb", 4));
    let w = jittered(&hfb, 10);
    let f = [
        uniform(Shape::new(1, 4, 16, 16), -1.0, 1.0, 11),
        uniform(Shape::new(1, 8, 8, 8), -1.0, 1.0, 12),
        uniform(Shape::new(1, 16, 4, 4), -1.0, 1.0, 13),
    ];
    let probes = f.clone().map(|t| uniform(t.shape(), -1.0, 1.0, 14 + t.shape().c as u64));
    note(
        "hfb_forward",
        block_check(hcd_core::gradcheck::check_model(&w, &f, 1e-4, 8, |t, p, xs| {
            let y = hfb.block.forward(t, p, &[xs[0], xs[1], xs[2]]).unwrap();
            let parts: Vec<_> = y.iter().zip(&probes).map(|(v, r)| t.weighted_sum(v, r)).collect();
            t.sum(&parts)
        })),
    );
    let feb = Standalone::build(|b| Feb::new(b, "feb", 4, 4, 6));
    let w = jittered(&feb, 20);
    let x = uniform(Shape::new(1, 4, 12, 12), -1.0, 1.0, 21);
    let probe = uniform(x.shape(), -1.0, 1.0, 22);
    note(
        "feb_forward",
        block_check(hcd_core::gradcheck::check_model(&w, &[x], 1e-4, 8, |t, p, xs| {
            let y = feb.block.forward(t, p, &xs[0]);
            t.weighted_sum(&y, &probe)
        })),
    );
    let fab = Standalone::build(|b| Fab::new(b, "fab", 16, 8));
    let w = jittered(&fab, 30);
    let x = uniform(Shape::new(1, 16, 8, 8), -1.0, 1.0, 31);
    let probe = uniform(x.shape(), -1.0, 1.0, 32);
    note(
        "fab_forward",
        block_check(hcd_core::gradcheck::check_model(&w, &[x], 1e-4, 8, |t, p, xs| {
            let y = fab.block.forward(t, p, &xs[0]);
            t.weighted_sum(&y, &probe)
        })),
    );

    // losses: gradient with respect to the three outputs
    let a = pyramid(1, 3, 16, 0.0, 1.0, 40);
    let pos = pyramid(1, 3, 16, 0.0, 1.0, 41);
    let neg = pyramid(1, 3, 16, 0.0, 1.0, 42);
    let char_cfg = LossConfig {
        use_hcl: false,
        ..LossConfig::default()
    };
    let (_, g) = total_loss_with_grad(&a, &pos, &neg, &char_cfg, None).unwrap();
    note(
        "charbonnier_loss",
        fd_check(&a, &g, 16, |xs| charbonnier_loss(&[xs[0].clone(), xs[1].clone(), xs[2].clone()], &pos, 1e-3).unwrap()),
    );

    let dir = tempfile::tempdir().unwrap();
    let vgg_path = dir.path().join("vgg19.safetensors");
    write_random_vgg19(&vgg_path, 16, 43).unwrap();
    // the VGG taps need at least 16 pixels, so every scale is 16x16 here
    let flat = |seed: u64| [0u64, 1, 2].map(|k| uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, seed * 10 + k));
    for (name, enc, a, p, n) in [
        ("hcl_loss/identity", PerceptualEncoder::identity(), a.clone(), pos.clone(), neg.clone()),
        ("hcl_loss/random-tiny", PerceptualEncoder::random_tiny(44), a.clone(), pos.clone(), neg.clone()),
        ("hcl_loss/vgg19", PerceptualEncoder::vgg19(&vgg_path).unwrap(), flat(45), flat(46), flat(47)),
    ] {
        let (_, g) = hcl_loss_with_grad(&enc, &a, &p, &n).unwrap();
        note(name, fd_check(&a, &g, 12, |xs| hcl_loss(&enc, xs, &p, &n).unwrap()));
    }

    let t = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let skip_frac = skipped_total.1 as f64 / (skipped_total.0 + skipped_total.1) as f64;
    let listing: Vec<String> = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    verdict(
        2,
        max <= 1e-4 && skip_frac < 0.1 && t < Duration::from_secs(120),
        format!(
            "worst rel err {max:.2e} (tol 1e-4) [{}], kink-skipped {:.1}%, {t:.1?} (limit 2min)",
            listing.join(", "),
            100.0 * skip_frac
        ),
    );
}

#[test]
fn criterion_03_hcl_matches_brute_force() {
    let mut worst = 0.0f64;
    let tiny = PerceptualEncoder::random_tiny(7);
    for inst in 0..20u64 {
        let side = [4, 8, 12, 16][inst as usize % 4];
        let batch = 1 + inst as usize % 2;
        let a = pyramid(batch, 3, side, 0.0, 1.0, 100 + inst);
        let p = pyramid(batch, 3, side, 0.0, 1.0, 200 + inst);
        let n = pyramid(batch, 3, side, 0.0, 1.0, 300 + inst);
        let (enc, embed): (&PerceptualEncoder, Box<dyn Fn(&Tensor) -> Vec<Tensor>>) = if inst % 2 == 0 {
            (&PerceptualEncoder::identity(), Box::new(|x: &Tensor| vec![x.clone()]))
        } else {
            (&tiny, Box::new(|x: &Tensor| tiny.embed(x).unwrap()))
        };
        let got = hcl_loss(enc, &a, &p, &n).unwrap();
        let want = oracle_hcl(&*embed, enc.coefficients(), &a, &p, &n);
        worst = worst.max((got - want).abs() / want.abs());
    }
    verdict(3, worst <= 1e-6, format!("worst rel err over 20 instances {worst:.2e} (tol 1e-6)"));
}

#[test]
fn criterion_04_charbonnier_anchors() {
    let x = pyramid(1, 3, 8, 0.0, 1.0, 1);
    let same = charbonnier_loss(&x, &x, 1e-3).unwrap();
    let big = x.clone().map(|t| t.map(|v| v + 1000.0));
    let l1 = 1000.0;
    let far = charbonnier_loss(&big, &x, 1e-3).unwrap();
    let rel = (far - l1).abs() / l1;
    verdict(
        4,
        same == 1e-3 && rel <= 1e-6,
        format!("A=P gives {same:e} (want exactly 1e-3); residual 1000 gives rel dev from L1 {rel:.2e} (tol 1e-6)"),
    );
}

#[test]
fn criterion_05_asm_round_trip() {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let j = uniform(Shape::new(1, 3, h, w), 0.0, 1.0, 1000 + inst);
        let t = uniform(Shape::new(1, 1, h, w), 0.01, 1.0, 2000 + inst);
        let a = r.random_range(0.05..=1.0);
        let i = compose_haze(&j, &t, a).unwrap();
        worst = worst.max(max_abs(&invert_asm(&i, &t, a).unwrap(), &j));
    }
    verdict(5, worst <= 1e-6, format!("max abs error {worst:.2e} over 100 instances, t >= 0.01 (tol 1e-6)"));
}

#[test]
fn criterion_06_shape_contract() {
    let cfg = ModelConfig::default();
    let (net, w) = init_weights(&cfg).unwrap();
    let x = uniform(Shape::new(1, 3, 240, 240), 0.0, 1.0, 6);
    let f = net.extract_features(&w, &x).unwrap();
    let a = net.dehaze(&w, &x).unwrap();
    let fs: Vec<[usize; 3]> = f.iter().map(|t| [t.shape().c, t.shape().h, t.shape().w]).collect();
    let os: Vec<[usize; 3]> = a.iter().map(|t| [t.shape().c, t.shape().h, t.shape().w]).collect();
    let want_f = vec![[32, 240, 240], [64, 120, 120], [128, 60, 60]];
    let want_o = vec![[3, 240, 240], [3, 120, 120], [3, 60, 60]];
    verdict(
        6,
        fs == want_f && os == want_o,
        format!("features {fs:?}, outputs {os:?} (exact)"),
    );
}

/// Training recipe for the desk-scale smoke run. The full objective is kept
/// but with a far smaller contrastive weight: at 0.1 the contrastive term
/// drags a 200-step toy run below the hazy input.
fn desk_configs() -> (SynthConfig, ModelConfig, TrainConfig) {
    let synth = SynthConfig {
        n: 200,
        seed: 1,
        scene_size: 64,
        ..SynthConfig::default()
    };
    let model = ModelConfig::toy(8, 1);
    let train = TrainConfig {
        crop: 64,
        batch: 8,
        lr_init: 2e-3,
        lambda: 1e-3,
        total_steps: 200,
        seed: 0,
        val_every: 0,
        val_count: 20,
        ..TrainConfig::default()
    };
    (synth, model, train)
}

#[test]
fn criterion_07_desk_scale_training() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, model, train) = desk_configs();
    let data = dir.path().join("data");
    synth_dataset(&synth, &data).unwrap();
    let enc = PerceptualEncoder::random_tiny(0);
    let start = Instant::now();
    let out = run_training(
        &model,
        &train,
        model.use_hcl.then_some(&enc),
        &data,
        &dir.path().join("run"),
        &RunOptions::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let totals: Vec<f64> = out.state.history.iter().filter_map(|r| r.total).collect();
    let first = totals[..10].iter().sum::<f64>() / 10.0;
    let last = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
    let ratio = last / first;

    let pairs = load_pairs(&index_dataset(&data).unwrap()).unwrap();
    let held = &pairs[pairs.len() - train.val_count..];
    let net = Hdn::new(model.clone()).unwrap();
    let (mut hazy_db, mut out_db) = (0.0, 0.0);
    for (_, p) in held {
        hazy_db += psnr(&p.hazy, &p.clear, PsnrMode::Rgb).unwrap();
        let a1 = net.dehaze(&out.state.weights, &p.hazy).unwrap()[0].clamp(0.0, 1.0);
        out_db += psnr(&a1, &p.clear, PsnrMode::Rgb).unwrap();
    }
    let k = held.len() as f64;
    let gain = (out_db - hazy_db) / k;
    verdict(
        7,
        ratio <= 0.5 && gain >= 1.0 && elapsed < Duration::from_secs(600),
        format!(
            "(a) loss last10/first10 = {ratio:.3} (limit 0.5); (b) held-out PSNR {:.2} dB vs hazy {:.2} dB, gain {gain:.2} dB (min 1.0); {elapsed:.0?} (limit 10min)",
            out_db / k,
            hazy_db / k
        ),
    );
}

#[test]
fn criterion_08_ablation_mechanics() {
    let counts: Vec<(Variant, usize)> = Variant::ALL
        .iter()
        .map(|&v| (v, Hdn::new(ModelConfig::default().with_variant(v)).unwrap().param_count()))
        .collect();
    let c = |v| counts.iter().find(|(x, _)| *x == v).unwrap().1;
    let ordered = c(Variant::Variant1) < c(Variant::Variant2)
        && c(Variant::Variant2) < c(Variant::Variant3)
        && c(Variant::Variant3) == c(Variant::Hcd);
    let table = [
        (Variant::Variant1, 2.34e6),
        (Variant::Variant2, 4.04e6),
        (Variant::Variant3, 5.58e6),
        (Variant::Hcd, 5.58e6),
    ];
    let devs: Vec<f64> = table.iter().map(|&(v, p)| (c(v) as f64 - p) / p).collect();
    let within = devs.iter().all(|d| d.abs() <= 0.4);

    // one training step per variant, configured only through the flags
    let mut steps_ok = true;
    let pair = HazePair::new(
        uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, 81),
        uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, 82),
    )
    .unwrap();
    let enc = PerceptualEncoder::random_tiny(0);
    for &v in &Variant::ALL {
        let model = ModelConfig::default().with_variant(v);
        let net = Hdn::new(model.clone()).unwrap();
        let cfg = TrainConfig {
            crop: 16,
            batch: 1,
            total_steps: 1,
            ..TrainConfig::default()
        };
        let trainer = Trainer {
            net: &net,
            cfg: &cfg,
            encoder: model.use_hcl.then_some(&enc),
        };
        let mut state = TrainState::new(net.init_weights(), 0);
        let row = trainer.step(&mut state, std::slice::from_ref(&pair)).unwrap();
        steps_ok &= state.step == 1 && row.hcl.is_some() == model.use_hcl && row.total.unwrap().is_finite();
    }
    verdict(
        8,
        ordered && within && steps_ok,
        format!(
            "params {:?}; rel dev from table {:?} (tol ±40%); one step each ok={steps_ok}",
            counts.iter().map(|(v, n)| format!("{v:?}={n}")).collect::<Vec<_>>(),
            devs.iter().map(|d| format!("{:+.1}%", 100.0 * d)).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_09_schedule_anchors() {
    let cfg = TrainConfig {
        total_steps: 1000,
        ..TrainConfig::default()
    };
    let (a, b, c) = (lr_at(0, &cfg).unwrap(), lr_at(1000, &cfg).unwrap(), lr_at(500, &cfg).unwrap());
    verdict(
        9,
        a == 2e-4 && b == 1e-6 && c == 1.005e-4,
        format!("lr(0)={a:e} lr(T)={b:e} lr(T/2)={c:e} (exact)"),
    );
}

fn small_run(data: &Path, out: &Path, cfg: &TrainConfig, opts: &RunOptions) -> TrainState {
    let model = ModelConfig::toy(4, 1);
    let enc = PerceptualEncoder::random_tiny(3);
    run_training(&model, cfg, Some(&enc), data, out, opts).unwrap().state
}

#[test]
fn criterion_10_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    synth_dataset(
        &SynthConfig {
            n: 6,
            scene_size: 24,
            seed: 9,
            ..SynthConfig::default()
        },
        &data,
    )
    .unwrap();
    let cfg = TrainConfig {
        crop: 16,
        batch: 2,
        total_steps: 8,
        lr_init: 1e-3,
        seed: 4,
        val_every: 4,
        val_count: 1,
        ..TrainConfig::default()
    };
    let a = small_run(&data, &d.join("a"), &cfg, &RunOptions::default());
    let b = small_run(&data, &d.join("b"), &cfg, &RunOptions::default());
    let loss_diff = a
        .history
        .iter()
        .zip(&b.history)
        .filter_map(|(x, y)| Some((x.total? - y.total?).abs()))
        .fold(0.0, f64::max);

    let stop = RunOptions {
        stop_at: Some(3),
        ..RunOptions::default()
    };
    let part = small_run(&data, &d.join("c"), &cfg, &stop);
    let ck = d.join("c/final.ckpt");
    let restored = load_checkpoint(&ck).unwrap().state;
    let roundtrip = restored == part;
    let resumed = small_run(
        &data,
        &d.join("c2"),
        &cfg,
        &RunOptions {
            resume: Some(ck),
            ..RunOptions::default()
        },
    );
    let weight_diff = a
        .weights
        .tensors()
        .zip(resumed.weights.tensors())
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    // wall time is the only field allowed to differ
    let timeless = |s: &TrainState| {
        s.history
            .iter()
            .cloned()
            .map(|mut r| {
                r.wall_ms = 0;
                r
            })
            .collect::<Vec<_>>()
    };
    let same_history = timeless(&resumed) == timeless(&a);

    // a tampered checkpoint must not load
    let mut bytes = std::fs::read(d.join("a/final.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let tampered = d.join("tampered.ckpt");
    std::fs::write(&tampered, &bytes).unwrap();
    let rejected = load_checkpoint(&tampered).is_err();

    verdict(
        10,
        a.history.len() == b.history.len()
            && loss_diff <= 1e-6
            && weight_diff <= 1e-6
            && roundtrip
            && same_history
            && rejected,
        format!(
            "per-step loss diff {loss_diff:e} (tol 1e-6); resume-vs-straight weight diff {weight_diff:e} (tol 1e-6); \
             checkpoint round trip exact={roundtrip}; histories match={same_history}; tamper rejected={rejected}"
        ),
    );
}

#[test]
fn criterion_11_metric_anchors() {
    let x = Tensor::full(Shape::new(1, 3, 16, 16), 0.5);
    let y = x.map(|v| v + 0.01);
    let p = psnr(&x, &y, PsnrMode::Rgb).unwrap();
    let img = uniform(Shape::new(1, 3, 24, 24), 0.0, 1.0, 11);
    let ident = ssim(&img, &img).unwrap();
    let mut worst = 0.0f64;
    for k in 0..10 {
        let side = 11 + 3 * k as usize;
        let a = uniform(Shape::new(1, 3, side, side + 2), 0.0, 1.0, 1100 + k);
        // partially correlated second image so SSIM is far from both 0 and 1
        let noise = uniform(a.shape(), -0.3, 0.3, 1200 + k);
        let b = a.zip_map(&noise, |u, v| (u + v).clamp(0.0, 1.0)).unwrap();
        worst = worst.max((ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs());
    }
    verdict(
        11,
        (p - 40.0).abs() <= 1e-9 && ident == 1.0 && worst <= 1e-6,
        format!("psnr(mse 1e-4)={p:.12} (tol 1e-9); ssim(x,x)={ident} (exact); ssim vs direct oracle worst {worst:.2e} (tol 1e-6)"),
    );
}

/// A tiny multi-scale "dehazer" that knows nothing about the network types:
/// a learned gain and offset applied to box-downsampled copies.
struct StubModel {
    gain: f64,
    offset: f64,
}

impl StubModel {
    fn run(&self, x: &Tensor) -> Vec<Tensor> {
        (0..3)
            .map(|k| {
                let f = 1usize << k;
                let s = x.shape();
                Tensor::from_fn(Shape::new(s.n, s.c, s.h / f, s.w / f), |n, c, yy, xx| {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += x.at(n, c, yy * f + dy, xx * f + dx);
                        }
                    }
                    self.gain * acc / (f * f) as f64 + self.offset
                })
            })
            .collect()
    }
}

#[test]
fn criterion_12_plugin_property() {
    let enc = PerceptualEncoder::random_tiny(12);
    let hazy = uniform(Shape::new(2, 3, 16, 16), 0.2, 0.9, 120);
    let clear = uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, 121);
    let down = |x: &Tensor| StubModel { gain: 1.0, offset: 0.0 }.run(x);
    let (pos, neg) = (down(&clear), down(&hazy));
    let stub = StubModel { gain: 0.8, offset: -0.05 };
    let outs = stub.run(&hazy);
    let got = hcl_loss(&enc, &outs, &pos, &neg).unwrap();
    let want = oracle_hcl(&|x| enc.embed(x).unwrap(), enc.coefficients(), &outs, &pos, &neg);
    let rel = (got - want).abs() / want;

    // the loss gradient flows back into the stub's own parameter
    let (_, g) = hcl_loss_with_grad(&enc, &outs, &pos, &neg).unwrap();
    let dgain: f64 = g
        .iter()
        .zip(neg.iter())
        .map(|(gk, nk)| gk.data().iter().zip(nk.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let h = 1e-5;
    let at = |gain| hcl_loss(&enc, &StubModel { gain, offset: -0.05 }.run(&hazy), &pos, &neg).unwrap();
    let fd = (at(0.8 + h) - at(0.8 - h)) / (2.0 * h);
    let grad_rel = (dgain - fd).abs() / fd.abs().max(1e-12);

    // the tape ops accept any caller-built graph as well
    let mut t = Tape::new();
    let vars: Vec<_> = outs.iter().map(|x| t.variable(x.clone())).collect();
    let ps: Vec<_> = pos.iter().map(|x| t.constant(x.clone())).collect();
    let ns: Vec<_> = neg.iter().map(|x| t.constant(x.clone())).collect();
    let l = hcd_core::losses::hcl_op(&mut t, &enc, &vars, &ps, &ns).unwrap();
    let taped = t.value(&l).data()[0];

    verdict(
        12,
        rel <= 1e-6 && grad_rel <= 1e-4 && taped == got,
        format!("stub-model hcl vs oracle rel err {rel:.2e} (tol 1e-6); d/dgain vs finite difference rel err {grad_rel:.2e} (tol 1e-4)"),
    );
}
