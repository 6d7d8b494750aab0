//! Fixtures, helpers and property checks shared by the integration tests and
//! the acceptance runner. Every property returns `Err(description)` on failure.

#![allow(dead_code)]

use std::fmt::Display;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rseed::autodiff::{Graph, Var};
use rseed::config::EnhanceConfig;
use rseed::decoder::{decode, Arch, DecoderWeights, Seed};
use rseed::format::{self, RunMaps};
use rseed::image_io::{load_image, quantize};
use rseed::losses::{
    all_losses, illumination_target, loss_illumination_consistency, loss_illumination_control,
    loss_reconstruction, loss_smoothness, LossWeights,
};
use rseed::metrics::{psnr, ssim};
use rseed::optimizer::{build_decoders, run, Adam, InitSetting, OptimizationMode, OptimizerKind, Param};
use rseed::retinex::{self, GammaParam, RetinexState};
use rseed::tensor::Tensor;

pub const TEST_IMAGES: [&str; 5] = ["astronaut", "chelsea", "coffee", "flower", "china"];

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural")
}

pub fn train_dir() -> PathBuf {
    data_dir().join("train")
}

pub fn test_image(name: &str) -> Tensor {
    load_image(&data_dir().join("test").join(format!("{name}.png"))).expect("fixture loads")
}

/// Multiplies `gt` by a smooth field with values in [0.1, 0.3] (the `k`-th of a
/// family of sinusoidal fields) and quantizes to 8 bits.
pub fn darken(gt: &Tensor, k: usize) -> Tensor {
    let (_, h, w) = gt.chw().expect("rgb image");
    let k = k as f64;
    let (a, b, p, q) = (0.4 + 0.13 * k, 0.9 - 0.1 * k, 0.7 * k, 1.3 * k);
    let tau = std::f64::consts::TAU;
    Tensor::from_fn(gt.shape(), |i| {
        let (y, x) = ((i / w) % h, i % w);
        let field = 0.2 + 0.1 * (tau * a * x as f64 / w as f64 + p).sin() * (tau * b * y as f64 / h as f64 + q).cos();
        quantize((gt.data()[i] as f64 * field) as f32) as f32 / 255.0
    })
}

/// `(ground truth, darkened)` pairs, optionally box-downsampled to `size`.
pub fn darkened_set(size: Option<usize>) -> Vec<(String, Tensor, Tensor)> {
    TEST_IMAGES
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let mut gt = test_image(n);
            if let Some(s) = size {
                gt = downsample(&gt, s);
            }
            let low = darken(&gt, k);
            (n.to_string(), gt, low)
        })
        .collect()
}

/// Box-filter downsampling of a square image to `size × size`.
pub fn downsample(t: &Tensor, size: usize) -> Tensor {
    let (c, h, w) = t.chw().unwrap();
    assert!(h % size == 0 && w % size == 0);
    let (fy, fx) = (h / size, w / size);
    Tensor::from_fn(&[c, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        let mut s = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                s += t.data()[ch * h * w + (y * fy + dy) * w + x * fx + dx] as f64;
            }
        }
        (s / (fy * fx) as f64) as f32
    })
}

/// A deterministic smooth test pattern in (0, 1).
pub fn pattern(shape: &[usize], phase: f32) -> Tensor {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Tensor::from_fn(shape, |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        0.5 + 0.35 * ((x as f32 * 0.37 + phase) * (c as f32 + 1.0) * 0.7 + y as f32 * 0.23).sin()
    })
}

/// Small two-stage architecture for fast pipeline tests.
pub fn tiny_arch() -> Arch {
    Arch::new(4, vec![8, 8], 3).unwrap()
}

/// RandomAll run on the tiny architecture.
pub fn tiny_config(iterations: usize) -> EnhanceConfig {
    let arch = tiny_arch();
    EnhanceConfig {
        iterations,
        init: InitSetting::RandomAll,
        seed_channels: arch.seed_channels,
        stage_channels: arch.stage_channels,
        ..EnhanceConfig::default()
    }
}

/// Fits `target` by optimizing only the seed of the frozen decoder `weights`
/// (Adam, lr 1e-2, MSE) and returns the reconstruction PSNR.
pub fn seed_fit_psnr(weights: &DecoderWeights, target: &Tensor, iterations: usize, rng_seed: u64) -> f64 {
    let (_, h, w) = target.chw().unwrap();
    let mut frozen = weights.clone();
    frozen.set_learnable(false);
    let mut seed = Seed::from_rng_seed(frozen.arch(), h, w, rng_seed).unwrap();
    let mut adam = Adam::new(1e-2);
    let mut g = Graph::<f32>::new();
    for t in 0..iterations {
        g.reset();
        let vars = frozen.register(&mut g);
        let z = g.leaf(&seed.tensor);
        let out = vars.decode(&mut g, z).unwrap();
        let target_var = g.constant(target.clone());
        let d = g.sub(out, target_var).unwrap();
        let sq = g.mul(d, d).unwrap();
        let mse = g.mean(sq);
        let grads = g.backward(mse).unwrap();
        seed.tensor.zero_grad();
        grads.accumulate_into(z, &mut seed.tensor).unwrap();
        adam.step(&mut [Param::new("seed", &mut seed.tensor)], t).unwrap();
    }
    psnr(&decode(&seed, &frozen, true).unwrap(), target).unwrap()
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn ok<T, E: Display>(r: Result<T, E>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Result<Tensor, TestCaseError> {
    ok(Tensor::new(shape, data))
}

/// Values bounded away from 0 and 1, as decoder outputs are.
fn unit_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.001f32..0.999, n)
}

/// `(R, L, γ)` on an `h × w` grid.
fn maps(h: usize, w: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>, f32)> {
    (unit_values(3 * h * w), unit_values(h * w), 0.01f32..10.0)
}

pub fn prop_composition_identity() -> Result<(), String> {
    check(64, maps(6, 5), |(r, l, _)| {
        let state = ok(RetinexState::new(tensor(&[3, 6, 5], r)?, tensor(&[1, 6, 5], l)?, ok(GammaParam::new(1.0))?))?;
        let composed = ok(state.enhance_compose())?;
        let recon = ok(state.reconstruct())?;
        prop_assert_eq!(composed.data(), recon.data());
        Ok(())
    })
}

pub fn prop_brightening_monotone_and_in_range() -> Result<(), String> {
    check(64, (maps(5, 4), 0.01f32..10.0), |((r, l, g1), g2)| {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let r = tensor(&[3, 5, 4], r)?;
        let l = tensor(&[1, 5, 4], l)?;
        let at = |gamma| ok(RetinexState::new(r.clone(), l.clone(), ok(GammaParam::new(gamma))?)?.enhance_compose());
        let (bright, dark) = (at(lo)?, at(hi)?);
        for (i, (&b, &d)) in bright.data().iter().zip(dark.data()).enumerate() {
            prop_assert!(b >= d, "element {i}: γ={lo} gives {b} < γ={hi} gives {d}");
            prop_assert!(b > 0.0 && b < 1.0 && d > 0.0 && d < 1.0, "element {i} out of (0, 1): {b}, {d}");
        }
        Ok(())
    })
}

/// Builds all four terms on fresh leaves and returns `(graph, [re, e, s, i, total], leaves)`.
fn loss_graph(
    i_low: &Tensor,
    r: &Tensor,
    l: &Tensor,
    gamma: f32,
    w: &LossWeights,
) -> Result<(Graph<f32>, [Var; 5], [Var; 3]), TestCaseError> {
    let mut g = Graph::<f32>::new();
    let target = ok(illumination_target(i_low))?;
    let iv = g.constant(i_low.clone());
    let tv = g.constant(target);
    let rv = g.leaf(&r.clone().with_requires_grad(true));
    let lv = g.leaf(&l.clone().with_requires_grad(true));
    let gv = g.leaf(&Tensor::scalar(gamma).with_requires_grad(true));
    let v = ok(all_losses(&mut g, iv, tv, rv, lv, gv, w))?;
    Ok((g, [v.reconstruction, v.consistency, v.smoothness, v.control, v.total], [rv, lv, gv]))
}

pub fn prop_losses_non_negative() -> Result<(), String> {
    check(48, (maps(8, 7), unit_values(3 * 8 * 7), 0.0f64..1.0), |((r, l, gamma), i, tau)| {
        let w = LossWeights { tau, ..LossWeights::paired() };
        let (g, vars, _) = loss_graph(&tensor(&[3, 8, 7], i)?, &tensor(&[3, 8, 7], r)?, &tensor(&[1, 8, 7], l)?, gamma, &w)?;
        for (name, v) in ["reconstruction", "consistency", "smoothness", "control", "total"].iter().zip(vars) {
            let x = g.item(v);
            prop_assert!(x >= 0.0 && x.is_finite(), "{name} = {x}");
        }
        Ok(())
    })
}

pub fn prop_losses_zero_at_optimum() -> Result<(), String> {
    check(48, (maps(8, 8), 0usize..64, 0.01f32..0.2), |((r, l, gamma), pixel, delta)| {
        let r_t = tensor(&[3, 8, 8], r)?;
        let l_t = tensor(&[1, 8, 8], l)?;
        // I built as exactly R⊙L.
        let i_low = Tensor::from_fn(&[3, 8, 8], |k| r_t.data()[k] * l_t.data()[k % 64]);
        let target = ok(illumination_target(&i_low))?;
        let w = LossWeights::paired();
        let (g, vars, _) = loss_graph(&i_low, &r_t, &target, gamma, &w)?;
        let mut g2 = Graph::<f32>::new();
        let iv = g2.constant(i_low.clone());
        let rv = g2.constant(r_t.clone());
        let lv = g2.constant(l_t.clone());
        let recon = ok(retinex::reconstruct(&mut g2, rv, lv))?;
        let re = ok(loss_reconstruction(&mut g2, iv, recon))?;
        prop_assert_eq!(g2.item(re), 0.0, "reconstruction loss at I = R⊙L");
        prop_assert_eq!(g.item(vars[1]), 0.0, "consistency loss at L = T");

        // Moving one value away from the optimum makes each term positive.
        let mut moved = i_low.clone();
        moved.data_mut()[pixel] += delta;
        let mv = g2.constant(moved);
        let re_moved = ok(loss_reconstruction(&mut g2, mv, recon))?;
        prop_assert!(g2.item(re_moved) > 0.0);
        let mut l_moved = ok(illumination_target(&i_low))?;
        l_moved.data_mut()[pixel] += delta;
        let tv = g2.constant(ok(illumination_target(&i_low))?);
        let lm = g2.constant(l_moved);
        let e_moved = ok(loss_illumination_consistency(&mut g2, tv, lm))?;
        prop_assert!(g2.item(e_moved) > 0.0);
        Ok(())
    })
}

/// Gradients of the total with respect to (R, L, γ).
fn leaf_grads(g: &Graph<f32>, total: Var, leaves: [Var; 3]) -> Result<Vec<Vec<f32>>, TestCaseError> {
    let grads = ok(g.backward(total))?;
    Ok(leaves
        .iter()
        .map(|&v| grads.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect())
}

fn close(a: &[f32], b: &[f32], tol: f32) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        prop_assert!((x - y).abs() <= tol * y.abs().max(1.0), "index {i}: {x} vs {y}");
    }
    Ok(())
}

pub fn prop_ablation_matches_removed_term() -> Result<(), String> {
    check(24, (maps(8, 8), unit_values(3 * 64), 0usize..4), |((r, l, gamma), i, removed)| {
        let (i_low, r, l) = (tensor(&[3, 8, 8], i)?, tensor(&[3, 8, 8], r)?, tensor(&[1, 8, 8], l)?);
        let mut w = LossWeights::paired();
        match removed {
            0 => w.lambda_re = 0.0,
            1 => w.lambda_e = 0.0,
            2 => w.lambda_s = 0.0,
            _ => w.lambda_i = 0.0,
        }
        let (g, vars, leaves) = loss_graph(&i_low, &r, &l, gamma, &w)?;
        let ablated = leaf_grads(&g, vars[4], leaves)?;

        // Reference: the total assembled by hand from the three kept terms only.
        let full = LossWeights::paired();
        let mut h = Graph::<f32>::new();
        let iv = h.constant(i_low.clone());
        let tv = h.constant(ok(illumination_target(&i_low))?);
        let rv = h.leaf(&r.clone().with_requires_grad(true));
        let lv = h.leaf(&l.clone().with_requires_grad(true));
        let gv = h.leaf(&Tensor::scalar(gamma).with_requires_grad(true));
        let mut kept = Vec::new();
        if removed != 0 {
            let recon = ok(retinex::reconstruct(&mut h, rv, lv))?;
            kept.push((ok(loss_reconstruction(&mut h, iv, recon))?, full.lambda_re));
        }
        if removed != 1 {
            kept.push((ok(loss_illumination_consistency(&mut h, tv, lv))?, full.lambda_e));
        }
        if removed != 2 {
            kept.push((ok(loss_smoothness(&mut h, lv, rv, full.tau))?, full.lambda_s));
        }
        if removed != 3 {
            kept.push((ok(loss_illumination_control(&mut h, rv, lv, gv, full.exposure))?, full.lambda_i));
        }
        let mut total = h.scale(kept[0].0, kept[0].1);
        for &(term, lambda) in &kept[1..] {
            let t = h.scale(term, lambda);
            total = ok(h.add(total, t))?;
        }
        let reference = leaf_grads(&h, total, [rv, lv, gv])?;
        for (a, b) in ablated.iter().zip(&reference) {
            close(a, b, 1e-6)?;
        }
        Ok(())
    })
}

pub fn prop_smoothness_edges_in_r_license_edges_in_l() -> Result<(), String> {
    check(64, (unit_values(3 * 36), unit_values(36), 1.0f32..4.0), |(r, l, c)| {
        let l = tensor(&[1, 6, 6], l)?;
        let r = tensor(&[3, 6, 6], r)?;
        // Scaling R by c ≥ 1 scales every |∇R| by c.
        let r_edges = Tensor::from_fn(&[3, 6, 6], |k| r.data()[k] * c);
        let first_term = |r: &Tensor| -> Result<f32, TestCaseError> {
            let mut g = Graph::<f32>::new();
            let lv = g.constant(l.clone());
            let rv = g.constant(r.clone());
            let s = ok(loss_smoothness(&mut g, lv, rv, 0.0))?;
            Ok(g.item(s))
        };
        let (before, after) = (first_term(&r)?, first_term(&r_edges)?);
        prop_assert!(after <= before, "c = {c}: {before} -> {after}");
        Ok(())
    })
}

pub fn prop_weights_round_trip() -> Result<(), String> {
    let arch = (1usize..6, prop::collection::vec(1usize..9, 1..4), prop::sample::select(vec![1usize, 3]));
    check(32, (arch, any::<u64>()), |((seed_c, stages, out_c), rng_seed)| {
        let arch = ok(Arch::new(seed_c, stages, out_c))?;
        let w = ok(DecoderWeights::init_random(&arch, rng_seed))?;
        let bytes = format::encode_weights(&w);
        let back = ok(format::decode_weights(&bytes))?;
        prop_assert_eq!(&back, &w);
        prop_assert_eq!(format::encode_weights(&back), bytes);
        Ok(())
    })
}

pub fn prop_maps_round_trip() -> Result<(), String> {
    check(32, (1usize..9, 1usize..9, any::<u64>(), 0.01f32..10.0), |(h, w, s, gamma)| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut next = || rand::Rng::random::<f32>(&mut rng);
        let maps = RunMaps {
            reflectance: Tensor::from_fn(&[3, h, w], |_| next()),
            illumination: Tensor::from_fn(&[1, h, w], |_| next()),
            gamma,
        };
        let bytes = format::encode_maps(&maps);
        prop_assert_eq!(&ok(format::decode_maps(&bytes))?, &maps);
        Ok(())
    })
}

pub fn prop_run_deterministic() -> Result<(), String> {
    check(4, (any::<u64>(), 1usize..4), |(seed, iterations)| {
        let cfg = EnhanceConfig { seed, ..tiny_config(iterations) };
        let input = pattern(&[3, 8, 12], seed as f32 % 7.0);
        let once = || -> Result<_, TestCaseError> {
            let (wr, wl) = ok(build_decoders(&cfg))?;
            ok(run(&input, &wr, &wl, &cfg))
        };
        let (a, b) = (once()?, once()?);
        prop_assert_eq!(a.enhanced.data(), b.enhanced.data());
        prop_assert_eq!(&a.trace, &b.trace);
        prop_assert_eq!(a.gamma.to_bits(), b.gamma.to_bits());
        Ok(())
    })
}

pub fn prop_graph_deterministic() -> Result<(), String> {
    check(24, (maps(8, 8), unit_values(3 * 64)), |((r, l, gamma), i)| {
        let (i_low, r, l) = (tensor(&[3, 8, 8], i)?, tensor(&[3, 8, 8], r)?, tensor(&[1, 8, 8], l)?);
        let w = LossWeights::paired();
        let (g1, v1, leaves1) = loss_graph(&i_low, &r, &l, gamma, &w)?;
        let (g2, v2, leaves2) = loss_graph(&i_low, &r, &l, gamma, &w)?;
        prop_assert_eq!(g1.item(v1[4]).to_bits(), g2.item(v2[4]).to_bits());
        let bits = |v: Vec<Vec<f32>>| v.into_iter().flatten().map(f32::to_bits).collect::<Vec<_>>();
        prop_assert_eq!(bits(leaf_grads(&g1, v1[4], leaves1)?), bits(leaf_grads(&g2, v2[4], leaves2)?));
        // A second backward on the same tape gives the same result.
        prop_assert_eq!(bits(leaf_grads(&g1, v1[4], leaves1)?), bits(leaf_grads(&g2, v2[4], leaves2)?));
        Ok(())
    })
}

/// One plain gradient step on the seeds equals `z − lr·∂L/∂z`, with the
/// gradient taken from an independently assembled graph.
pub fn prop_single_step_exact() -> Result<(), String> {
    check(6, (any::<u64>(), 1e-3f64..0.1), |(seed, lr)| {
        let cfg = EnhanceConfig { seed, lr, optimizer: OptimizerKind::Gd, ..tiny_config(1) };
        let input = pattern(&[3, 8, 8], (seed % 5) as f32);
        let (wr, wl) = ok(build_decoders(&cfg))?;
        let result = ok(run(&input, &wr, &wl, &cfg))?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zr0 = ok(Seed::sample(wr.arch(), 8, 8, &mut rng, seed))?;
        let zl0 = ok(Seed::sample(wl.arch(), 8, 8, &mut rng, seed))?;
        let mut g = Graph::<f32>::new();
        let iv = g.constant(input.clone());
        let tv = g.constant(ok(illumination_target(&input))?);
        let zr = g.leaf(&zr0.tensor);
        let zl = g.leaf(&zl0.tensor);
        let (mut fr, mut fl) = (wr.clone(), wl.clone());
        fr.set_learnable(false);
        fl.set_learnable(false);
        let vr = fr.register(&mut g);
        let vl = fl.register(&mut g);
        let r = ok(vr.decode(&mut g, zr))?;
        let l = ok(vl.decode(&mut g, zl))?;
        let gv = g.leaf(&Tensor::scalar(cfg.gamma_init as f32).with_requires_grad(true));
        let lv = ok(all_losses(&mut g, iv, tv, r, l, gv, &cfg.loss))?;
        let grads = ok(g.backward(lv.total))?;
        let lr32 = lr as f32;
        for (name, var, before, after) in
            [("seed_r", zr, &zr0.tensor, &result.seed_r.tensor), ("seed_l", zl, &zl0.tensor, &result.seed_l.tensor)]
        {
            let grad = grads.get(var).ok_or_else(|| TestCaseError::fail(format!("{name} has no gradient")))?;
            let expected: Vec<f32> = before.data().iter().zip(grad).map(|(&z, &d)| z - lr32 * d).collect();
            prop_assert_eq!(after.data(), expected.as_slice(), "{}", name);
        }
        prop_assert_eq!(result.hashes_before, result.hashes_after);
        Ok(())
    })
}

/// Textbook bias-corrected Adam in 64-bit, storing parameters as f32.
struct ReferenceAdam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, x: &mut [f32], g: &[f32]) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        for i in 0..x.len() {
            let gi = g[i] as f64;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
            let m_hat = self.m[i] / (1.0 - b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.t));
            x[i] = (x[i] as f64 - self.lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
}

pub fn prop_adam_matches_reference() -> Result<(), String> {
    let grads = prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 7), 3);
    check(64, (prop::collection::vec(-2.0f32..2.0, 7), grads, 1e-4f64..1e-1), |(init, grads, lr)| {
        let (a_len, b_len) = (4, 3);
        let mut a = tensor(&[a_len], init[..a_len].to_vec())?.with_requires_grad(true);
        let mut b = tensor(&[b_len], init[a_len..].to_vec())?.with_requires_grad(true);
        let mut adam = Adam::new(lr);
        let mut reference = ReferenceAdam { lr, m: vec![0.0; 7], v: vec![0.0; 7], t: 0 };
        let mut x = init.clone();
        for (step, g) in grads.iter().enumerate() {
            a.zero_grad();
            b.zero_grad();
            ok(a.accumulate_grad(&g[..a_len]))?;
            ok(b.accumulate_grad(&g[a_len..]))?;
            ok(adam.step(&mut [Param::new("a", &mut a), Param::new("b", &mut b)], step))?;
            reference.step(&mut x, g);
            let got: Vec<f32> = a.data().iter().chain(b.data()).copied().collect();
            for (i, (&p, &q)) in got.iter().zip(&x).enumerate() {
                prop_assert!((p as f64 - q as f64).abs() <= 1e-7, "step {step} index {i}: {p} vs {q}");
            }
        }
        Ok(())
    })
}

pub fn prop_backward_linear() -> Result<(), String> {
    check(48, (maps(6, 6), -2.0f64..2.0, -2.0f64..2.0), |((r, l, gamma), a, b)| {
        let (r, l) = (tensor(&[3, 6, 6], r)?, tensor(&[1, 6, 6], l)?);
        // f = control term, h = smoothness term, on shared leaves.
        let build = |ca: f64, cb: f64| -> Result<Vec<Vec<f32>>, TestCaseError> {
            let mut g = Graph::<f32>::new();
            let rv = g.leaf(&r.clone().with_requires_grad(true));
            let lv = g.leaf(&l.clone().with_requires_grad(true));
            let gv = g.leaf(&Tensor::scalar(gamma).with_requires_grad(true));
            let f = ok(loss_illumination_control(&mut g, rv, lv, gv, 0.6))?;
            let h = ok(loss_smoothness(&mut g, lv, rv, 0.6))?;
            let f = g.scale(f, ca);
            let h = g.scale(h, cb);
            let total = ok(g.add(f, h))?;
            leaf_grads(&g, total, [rv, lv, gv])
        };
        let combined = build(a, b)?;
        let gf = build(1.0, 0.0)?;
        let gh = build(0.0, 1.0)?;
        for (k, comb) in combined.iter().enumerate() {
            let expected: Vec<f32> =
                gf[k].iter().zip(&gh[k]).map(|(&x, &y)| (a * x as f64 + b * y as f64) as f32).collect();
            close(comb, &expected, 1e-6)?;
        }
        Ok(())
    })
}

pub fn prop_frozen_leaves_untouched() -> Result<(), String> {
    check(32, (maps(6, 6), 1usize..4), |((r, l, gamma), repeats)| {
        let frozen_r = tensor(&[3, 6, 6], r)?;
        let before = frozen_r.clone();
        let l = tensor(&[1, 6, 6], l)?.with_requires_grad(true);
        let mut g = Graph::<f32>::new();
        let rv = g.leaf(&frozen_r);
        let lv = g.leaf(&l);
        let gv = g.leaf(&Tensor::scalar(gamma).with_requires_grad(true));
        let loss = ok(loss_illumination_control(&mut g, rv, lv, gv, 0.6))?;
        let mut target = frozen_r.clone();
        for _ in 0..repeats {
            let grads = ok(g.backward(loss))?;
            prop_assert!(grads.get(rv).is_none(), "frozen leaf received a gradient");
            ok(grads.accumulate_into(rv, &mut target))?;
        }
        prop_assert_eq!(&target, &before);
        prop_assert_eq!(g.value(rv), before.data());
        Ok(())
    })
}

pub fn prop_mode_partition() -> Result<(), String> {
    check(4, (any::<u64>(), 1usize..4), |(seed, iterations)| {
        let input = pattern(&[3, 8, 8], 0.3);
        let seed_only = EnhanceConfig { seed, mode: OptimizationMode::SeedOnly, ..tiny_config(iterations) };
        let (wr, wl) = ok(build_decoders(&seed_only))?;
        let a = ok(run(&input, &wr, &wl, &seed_only))?;
        prop_assert_eq!(&a.hashes_before, &a.hashes_after);

        let params_only = EnhanceConfig { mode: OptimizationMode::ParamsOnly, ..seed_only.clone() };
        let b = ok(run(&input, &wr, &wl, &params_only))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zr = ok(Seed::sample(wr.arch(), 8, 8, &mut rng, seed))?;
        let zl = ok(Seed::sample(wl.arch(), 8, 8, &mut rng, seed))?;
        prop_assert_eq!(b.seed_r.tensor.data(), zr.tensor.data());
        prop_assert_eq!(b.seed_l.tensor.data(), zl.tensor.data());
        prop_assert_ne!(&b.hashes_before, &b.hashes_after);
        Ok(())
    })
}

pub fn prop_decoder_shape_and_range() -> Result<(), String> {
    let arch = (1usize..5, prop::collection::vec(1usize..7, 1..4), prop::sample::select(vec![1usize, 3]));
    check(32, (arch, 1usize..4, 1usize..4, any::<u64>()), |((seed_c, stages, out_c), sh, sw, s)| {
        let arch = ok(Arch::new(seed_c, stages, out_c))?;
        let w = ok(DecoderWeights::init_random(&arch, s))?;
        let scale = arch.scale();
        let seed = ok(Seed::from_rng_seed(&arch, sh * scale, sw * scale, s))?;
        prop_assert_eq!(seed.tensor.shape(), &[seed_c, sh, sw][..]);
        let out = ok(decode(&seed, &w, true))?;
        prop_assert_eq!(out.shape(), &[out_c, sh * scale, sw * scale][..]);
        prop_assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0), "decoded value outside (0, 1)");
        Ok(())
    })
}

pub fn prop_metrics_symmetric() -> Result<(), String> {
    check(32, (unit_values(3 * 12 * 13), unit_values(3 * 12 * 13)), |(a, b)| {
        let (a, b) = (tensor(&[3, 12, 13], a)?, tensor(&[3, 12, 13], b)?);
        prop_assert_eq!(ok(psnr(&a, &b))?, ok(psnr(&b, &a))?);
        let (s1, s2) = (ok(ssim(&a, &b))?, ok(ssim(&b, &a))?);
        prop_assert!((s1 - s2).abs() <= 1e-12, "{s1} vs {s2}");
        Ok(())
    })
}

pub fn prop_psnr_decreases_with_noise() -> Result<(), String> {
    let n = 3 * 8 * 8;
    let base = prop::collection::vec(0.25f32..0.75, n);
    let noise = prop::collection::vec(-1.0f32..1.0, n);
    check(48, (base, noise, 0.001f32..0.2, 0.001f32..0.2), |(base, noise, a1, a2)| {
        prop_assume!((a1 - a2).abs() > 1e-3);
        prop_assume!(noise.iter().any(|&u| u.abs() > 0.01));
        let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let clean = tensor(&[3, 8, 8], base.clone())?;
        let noisy = |amp: f32| tensor(&[3, 8, 8], base.iter().zip(&noise).map(|(&x, &u)| x + amp * u).collect());
        let (p_lo, p_hi) = (ok(psnr(&clean, &noisy(lo)?))?, ok(psnr(&clean, &noisy(hi)?))?);
        prop_assert!(p_hi < p_lo, "amplitude {lo} -> {p_lo} dB, {hi} -> {p_hi} dB");
        Ok(())
    })
}

pub type Property = (&'static str, fn() -> Result<(), String>);

/// Every invariant property, by name.
pub const PROPERTIES: &[Property] = &[
    ("composition_identity", prop_composition_identity),
    ("brightening_monotone_and_in_range", prop_brightening_monotone_and_in_range),
    ("losses_non_negative", prop_losses_non_negative),
    ("losses_zero_at_optimum", prop_losses_zero_at_optimum),
    ("ablation_matches_removed_term", prop_ablation_matches_removed_term),
    ("smoothness_edges_in_r_license_edges_in_l", prop_smoothness_edges_in_r_license_edges_in_l),
    ("weights_round_trip", prop_weights_round_trip),
    ("maps_round_trip", prop_maps_round_trip),
    ("run_deterministic", prop_run_deterministic),
    ("graph_deterministic", prop_graph_deterministic),
    ("single_step_exact", prop_single_step_exact),
    ("adam_matches_reference", prop_adam_matches_reference),
    ("backward_linear", prop_backward_linear),
    ("frozen_leaves_untouched", prop_frozen_leaves_untouched),
    ("mode_partition", prop_mode_partition),
    ("decoder_shape_and_range", prop_decoder_shape_and_range),
    ("metrics_symmetric", prop_metrics_symmetric),
    ("psnr_decreases_with_noise", prop_psnr_decreases_with_noise),
];
