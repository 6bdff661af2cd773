//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 3 5`.

use std::error::Error as StdError;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use hg3d::data::SynthHandSpec;
use hg3d::decode::{decode, default_thresholds, discretization_bound, evaluate, DecodeConfig};
use hg3d::heatmap::{joint_targets, Pose, Skeleton};
use hg3d::hourglass::{FlatNetwork, HourglassConfig, HourglassModel, Outputs};
use hg3d::pipeline::{decode_all, evaluate_model, predict_poses, prepare_all, prepare_inputs};
use hg3d::sample::{prepare, PreprocessConfig, RawSample};
use hg3d::tensor::layers::{BatchNorm3d, Conv3d, MaxPool3d, Relu, Upsample3d};
use hg3d::tensor::{conv3d_forward, gradcheck, LayerParams, Real, Tensor};
use hg3d::train::{augment, total_loss, train, AugmentConfig, AugmentDraw, LossRecord, RmsState, TrainConfig, TrainSetup};
use hg3d::voxel::{voxelize, CubeCrop, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, Box<dyn StdError>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(r.random_range(-1.0..1.0))).collect()).unwrap()
}

fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn within(limit: Duration, t: Instant) -> Result<(), Box<dyn StdError>> {
    let e = t.elapsed();
    ensure!(e <= limit, "took {:.1}s, limit {:.0}s", e.as_secs_f64(), limit.as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------- 1

fn gradients() -> Check {
    let t = Instant::now();
    let cfg = HourglassConfig::miniature();
    let want = HourglassConfig {
        input_res: 8,
        output_res: 4,
        stacks: 2,
        channels: 4,
        hg_depth: 1,
        joints: 2,
        bones: 1,
        bone_heads_enabled: true,
        batchnorm: false,
    };
    ensure!(cfg == want, "miniature config is {cfg:?}");
    let mut m = HourglassModel::<f64>::build(&cfg, 11)?;
    m.jitter(0.05, 11);
    let net = m.network().clone();
    let full = gradcheck(&FlatNetwork { network: &net }, m.params_mut(), &binary(&[2, 1, 8, 8, 8], 3), 1e-5)?;
    ensure!(full.max_rel_error < 1e-4, "full model: {full:?}");

    let mut worst = (0.0f64, String::new());
    let mut record = |name: &str, err: f64| {
        if err >= worst.0 {
            worst = (err, name.to_string());
        }
    };
    for (name, k, stride) in [("conv3x3", 3, 1), ("conv3x3/2", 3, 2), ("conv1x1", 1, 1)] {
        let mut p = LayerParams::<f64>::new();
        let conv = Conv3d::register(&mut p, name, 2, 3, k, stride, 5)?;
        let r = gradcheck(&conv, &mut p, &uniform(&[2, 2, 5, 5, 5], 6), 1e-5)?;
        record(name, r.max_rel_error);
    }
    let mut p = LayerParams::<f64>::new();
    let bn = BatchNorm3d::register(&mut p, "bn", 3)?;
    for v in p.get_mut(p.id("bn.gamma").unwrap()).values_mut() {
        *v = 1.3;
    }
    record("batchnorm", gradcheck(&bn, &mut p, &uniform(&[3, 3, 4, 4, 4], 7), 1e-5)?.max_rel_error);
    let x = uniform::<f64>(&[2, 2, 4, 4, 4], 8);
    let mut empty = LayerParams::<f64>::new();
    record("relu", gradcheck(&Relu, &mut empty, &x, 1e-5)?.max_rel_error);
    record("maxpool", gradcheck(&MaxPool3d, &mut empty, &x, 1e-5)?.max_rel_error);
    record("upsample", gradcheck(&Upsample3d, &mut empty, &x, 1e-5)?.max_rel_error);
    ensure!(worst.0 < 1e-4, "layer {} rel error {:e}", worst.1, worst.0);
    within(Duration::from_secs(120), t)?;
    Ok(format!(
        "full model {:.2e} over {} entries, worst layer {} {:.2e}",
        full.max_rel_error, full.entries_checked, worst.1, worst.0
    ))
}

// ---------------------------------------------------------------- 2

/// Direct loop: bias, then `+= w·x` over `(c_in, kd, kh, kw)`, padding read as zero.
#[allow(clippy::too_many_arguments)]
fn conv_oracle<T: Real>(x: &[T], dims: [usize; 5], w: &[T], b: &[T], c_out: usize, k: usize, s: usize, p: usize) -> Vec<T> {
    let [n, c_in, d, h, wd] = dims;
    let o = |len: usize| (len + 2 * p - k) / s + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = Vec::with_capacity(n * c_out * od * oh * ow);
    for bn in 0..n {
        for co in 0..c_out {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let iz = (z * s + kd) as isize - p as isize;
                                        let iy = (y * s + kh) as isize - p as isize;
                                        let ix = (xx * s + kw) as isize - p as isize;
                                        let inside = iz >= 0
                                            && iy >= 0
                                            && ix >= 0
                                            && (iz as usize) < d
                                            && (iy as usize) < h
                                            && (ix as usize) < wd;
                                        let v = if inside {
                                            x[(((bn * c_in + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize]
                                        } else {
                                            T::zero()
                                        };
                                        let wv = w[(((co * c_in + ci) * k + kd) * k + kh) * k + kw];
                                        acc += wv * v;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

fn conv_case<T: Real>(r: &mut ChaCha8Rng, seed: u64) -> Result<(), Box<dyn StdError>> {
    let k = [1, 3, 5][r.random_range(0..3)];
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=(k - 1) / 2 + 1);
    let (n, c_in, c_out) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let side = |r: &mut ChaCha8Rng| r.random_range(k.max(2)..=7);
    let (d, h, w) = (side(r), side(r), side(r));
    let x = uniform::<T>(&[n, c_in, d, h, w], seed);
    let wt = uniform::<T>(&[c_out, c_in, k, k, k], seed + 1);
    let b = uniform::<T>(&[c_out], seed + 2);
    let rank4 = n == 1 && r.random_bool(0.5);
    let input = if rank4 { x.clone().reshape(&[c_in, d, h, w])? } else { x.clone() };
    let (y, _) = conv3d_forward(&input, &wt, &b, stride, pad)?;
    let want = conv_oracle(x.values(), [n, c_in, d, h, w], wt.values(), b.values(), c_out, k, stride, pad);
    ensure!(y.len() == want.len(), "case {seed}: {} outputs vs {}", y.len(), want.len());
    for (i, (a, e)) in y.values().iter().zip(&want).enumerate() {
        ensure!(
            a.wide().to_bits() == e.wide().to_bits(),
            "case {seed} ({} k={k} s={stride} p={pad} {:?}) entry {i}: {a:?} vs {e:?}",
            T::NAME,
            [n, c_in, c_out, d, h, w]
        );
    }
    Ok(())
}

fn conv_oracle_check() -> Check {
    let t = Instant::now();
    let mut r = rng(2024);
    let cases = 32;
    for c in 0..cases {
        if c % 2 == 0 {
            conv_case::<f64>(&mut r, 100 + c)?;
        } else {
            conv_case::<f32>(&mut r, 100 + c)?;
        }
    }
    within(Duration::from_secs(60), t)?;
    Ok(format!("{cases} randomized cases bitwise equal (f64 and f32)"))
}

// ---------------------------------------------------------------- 3

fn geometry() -> Check {
    let mut r = rng(33);
    let res = 32;
    let center = [r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(250.0..500.0)];
    let side = r.random_range(100.0..300.0);
    let cube = CubeCrop::new(center, side)?;
    let lo = center.map(|c| c - side / 2.0);
    let pts: Vec<[f64; 3]> = (0..1000)
        .map(|_| [0, 1, 2].map(|a| lo[a] + r.random_range(0.001..0.999) * side))
        .collect();
    let vox = voxelize(&PointCloud::new(pts.clone()), &cube, res)?;

    // Per-point binning by interval search.
    let step = side / res as f64;
    let mut want = vec![0u8; res * res * res];
    for p in &pts {
        let bin = |a: usize| (0..res).find(|&i| p[a] >= lo[a] + i as f64 * step && p[a] < lo[a] + (i + 1) as f64 * step);
        let (i, j, k) = (bin(0).unwrap(), bin(1).unwrap(), bin(2).unwrap());
        want[(i * res + j) * res + k] = 1;
    }
    ensure!(vox.occupancy == want, "occupancy differs from the binning oracle");

    let g = vox.grid;
    let bound = g.voxel_size * 3f64.sqrt() / 2.0;
    let mut worst = 0.0f64;
    for &p in &pts {
        let c = g.voxel_center(g.index_of(p));
        let d = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt();
        worst = worst.max(d);
        let back = g.voxel_to_world(g.world_to_voxel(p));
        ensure!((0..3).all(|a| (back[a] - p[a]).abs() < 1e-9), "continuous round trip of {p:?} gave {back:?}");
    }
    ensure!(worst <= bound, "quantized round trip {worst} exceeds {bound}");
    let eight = CubeCrop::new([0.0, 0.0, 300.0], 256.0)?.grid(32).voxel_size;
    ensure!(eight == 8.0, "256 mm at R=32 gives {eight} mm voxels");
    Ok(format!(
        "1000 points match the oracle ({} voxels), round trip {worst:.3} <= {bound:.3} mm, 256/32 = 8 mm",
        vox.occupied_count()
    ))
}

// ---------------------------------------------------------------- 4

fn corner_bound() -> Check {
    let grid = CubeCrop::new([0.0, 0.0, 300.0], 256.0)?.grid(32);
    let v = grid.voxel_size;
    let expected = (3.0 * (v / 2.0) * (v / 2.0)).sqrt();
    ensure!((discretization_bound(v) - expected).abs() <= 1e-12, "bound helper disagrees");
    let mut r = rng(44);
    let mut errs = Vec::new();
    for _ in 0..20 {
        let corner = [0, 1, 2].map(|_| r.random_range(2..30) as f64);
        let p = grid.voxel_to_world(corner);
        let vol = joint_targets(&Pose::new(vec![p]), &grid)?;
        let d = decode(vol.channel(0), &grid, &DecodeConfig { k: 1 })?;
        errs.push(((d.point[0] - p[0]).powi(2) + (d.point[1] - p[1]).powi(2) + (d.point[2] - p[2]).powi(2)).sqrt());
    }
    for e in &errs {
        ensure!((e - expected).abs() <= 1e-6, "corner error {e} vs {expected}");
    }
    let truncated = (expected * 100.0).floor() / 100.0;
    ensure!(truncated == 6.92, "bound {expected} does not round down to 6.92");
    // Anywhere else the K=1 error stays below the corner value.
    for _ in 0..200 {
        let p = grid.voxel_to_world([0, 1, 2].map(|_| r.random_range(2.0..30.0)));
        let vol = joint_targets(&Pose::new(vec![p]), &grid)?;
        let d = decode(vol.channel(0), &grid, &DecodeConfig { k: 1 })?;
        let e = ((d.point[0] - p[0]).powi(2) + (d.point[1] - p[1]).powi(2) + (d.point[2] - p[2]).powi(2)).sqrt();
        ensure!(e <= expected + 1e-9, "interior error {e} exceeds the bound");
    }
    Ok(format!("K=1 corner error {:.6} mm = sqrt(3)*v/2 for 20 corners (quoted 6.92)", errs[0]))
}

// ---------------------------------------------------------------- 5

fn decode_fidelity() -> Check {
    let skeleton = Skeleton::msra();
    let data = SynthHandSpec::msra_hand(55).generate(100)?;
    let pre = PreprocessConfig::default();
    let prepared = prepare_all(&data, &skeleton, &pre)?;
    let vols: Vec<_> = prepared.iter().map(|p| p.joints.clone()).collect();
    let in_voxels = |k: usize| -> Result<f64, Box<dyn StdError>> {
        let (poses, _) = decode_all(&vols, &prepared, &DecodeConfig { k })?;
        let mut sum = 0.0;
        let mut n = 0;
        for ((pred, s), p) in poses.iter().zip(&data).zip(&prepared) {
            for (a, b) in pred.joints.iter().zip(&s.pose.joints) {
                sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt() / p.output_grid.voxel_size;
                n += 1;
            }
        }
        Ok(sum / n as f64)
    };
    let k9 = in_voxels(9)?;
    let k1 = in_voxels(1)?;
    ensure!(k9 < 0.25, "K=9 mean error {k9:.4} voxels");
    ensure!(k9 < k1, "K=9 {k9:.4} does not beat K=1 {k1:.4}");
    Ok(format!("mean error K=9 {k9:.4} voxels, K=1 {k1:.4} voxels over 100 poses"))
}

// ---------------------------------------------------------------- 6

fn flat_loss(preds: &[Tensor<f64>], target: &Tensor<f64>) -> f64 {
    let n = target.shape()[0] as f64;
    let mut s = 0.0;
    for p in preds {
        for i in 0..p.len() {
            let d = p.values()[i] - target.values()[i];
            s += d * d;
        }
    }
    s / n
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn small_hand_config() -> HourglassConfig {
    HourglassConfig {
        input_res: 8,
        output_res: 4,
        stacks: 2,
        channels: 4,
        hg_depth: 1,
        joints: 21,
        bones: 20,
        bone_heads_enabled: true,
        batchnorm: false,
    }
}

fn setup_for(mc: &HourglassConfig) -> TrainSetup {
    TrainSetup {
        skeleton: Skeleton::msra(),
        preprocess: PreprocessConfig {
            input_res: mc.input_res,
            output_res: mc.output_res,
            ..Default::default()
        },
        augment: AugmentConfig {
            enabled: false,
            ..Default::default()
        },
    }
}

fn run_training<T: Real>(
    mc: &HourglassConfig,
    data: &Vec<RawSample>,
    cfg: &TrainConfig,
    setup: &TrainSetup,
    model_seed: u64,
) -> Result<(HourglassModel<T>, Vec<LossRecord>), Box<dyn StdError>> {
    let mut model = HourglassModel::<T>::build(mc, model_seed)?;
    let mut state = RmsState::new(model.params());
    let log = train(&mut model, data, setup, cfg, &mut state, &mut |_| Ok(()))?;
    Ok((model, log))
}

fn loss_structure() -> Check {
    let (n, j, b, r) = (2, 3, 2, 4);
    let joints = vec![uniform::<f64>(&[n, j, r, r, r], 1), uniform(&[n, j, r, r, r], 2)];
    let bones = vec![uniform::<f64>(&[n, b, r, r, r], 3)];
    let jt = uniform::<f64>(&[n, j, r, r, r], 4);
    let bt = uniform::<f64>(&[n, b, r, r, r], 5);
    let out = Outputs { joints: joints.clone(), bones: bones.clone() };
    let (loss, grads) = total_loss(&out, &jt, Some(&bt))?;
    let (lj, lb) = (flat_loss(&joints, &jt), flat_loss(&bones, &bt));
    ensure!(rel(loss.joints, lj) <= 1e-12, "joint loss {} vs {lj}", loss.joints);
    ensure!(rel(loss.bones, lb) <= 1e-12, "bone loss {} vs {lb}", loss.bones);
    ensure!(rel(loss.total, lj + lb) <= 1e-12, "total {} vs {}", loss.total, lj + lb);
    for (s, g) in grads.joints.iter().enumerate() {
        let g = g.as_ref().ok_or("missing joint grad")?;
        for i in 0..g.len() {
            let want = 2.0 * (joints[s].values()[i] - jt.values()[i]) / n as f64;
            ensure!(rel(g.values()[i], want) <= 1e-12, "joint grad stack {s} entry {i}");
        }
    }
    ensure!(grads.bones.len() == 1, "bone grads for {} stacks", grads.bones.len());
    let (off, off_grads) = total_loss(&out, &jt, None)?;
    ensure!(off.bones == 0.0 && off.total == off.joints && off_grads.bones.iter().all(Option::is_none), "bone-off loss");

    // Models carry bone heads on stacks 1..S-1 only.
    for stacks in [2, 3] {
        let mc = HourglassConfig { stacks, ..HourglassConfig::miniature() };
        let m = HourglassModel::<f64>::build(&mc, 1)?;
        let o = m.predict(&binary(&[1, 1, 8, 8, 8], 9))?;
        ensure!(o.joints.len() == stacks && o.bones.len() == stacks - 1, "S={stacks}: {} bone outputs", o.bones.len());
    }

    // Bone loss off == bone heads removed, for the shared parameters, bitwise.
    let steps = 50;
    let data = SynthHandSpec::msra_hand(66).generate(6)?;
    let mc = small_hand_config();
    let setup = setup_for(&mc);
    let cfg = TrainConfig {
        lr_init: 1e-3,
        batch_size: 2,
        epochs: 1000,
        max_steps: Some(steps),
        bone_loss_enabled: false,
        seed: 6,
        ..Default::default()
    };
    let (with, log_with) = run_training::<f64>(&mc, &data, &cfg, &setup, 6)?;
    let headless = HourglassConfig { bone_heads_enabled: false, ..mc.clone() };
    let (without, log_without) = run_training::<f64>(&headless, &data, &cfg, &setup, 6)?;
    let init = HourglassModel::<f64>::build(&mc, 6)?;
    ensure!(log_with.len() as u64 == steps, "{} steps ran", log_with.len());
    for (a, b) in log_with.iter().zip(&log_without) {
        ensure!(a.loss.total.to_bits() == b.loss.total.to_bits(), "step {} loss differs", a.step);
    }
    let mut shared = 0;
    let mut frozen = 0;
    for (_, name, t) in with.params().iter() {
        match without.params().by_name(name) {
            Some(other) => {
                ensure!(other == t, "`{name}` diverged");
                shared += 1;
            }
            None => {
                let start = init.params().by_name(name).ok_or("missing init param")?;
                ensure!(start == t, "bone-head `{name}` moved with bone loss off");
                frozen += 1;
            }
        }
    }
    ensure!(frozen > 0, "no bone-head parameters found");
    Ok(format!(
        "oracles within 1e-12, bone term from stack 1 only, {steps}-step trajectories identical ({shared} shared, {frozen} frozen tensors)"
    ))
}

// ---------------------------------------------------------------- 7

fn overfit_config() -> HourglassConfig {
    HourglassConfig {
        input_res: 16,
        output_res: 8,
        stacks: 2,
        channels: 16,
        hg_depth: 2,
        joints: 21,
        bones: 20,
        bone_heads_enabled: true,
        batchnorm: false,
    }
}

fn mean_error_voxels<T: Real>(model: &HourglassModel<T>, data: &Vec<RawSample>, setup: &TrainSetup) -> Result<(f64, f64), Box<dyn StdError>> {
    let prepared = prepare_inputs(data, &setup.preprocess)?;
    let (pred, _) = predict_poses(model, &prepared, &DecodeConfig::default(), 8)?;
    let truth: Vec<Pose> = data.iter().map(|s| s.pose.clone()).collect();
    let report = evaluate(&pred, &truth, &default_thresholds())?;
    let voxel = prepared.iter().map(|p| p.output_grid.voxel_size).sum::<f64>() / prepared.len() as f64;
    Ok((report.mean_error_mm, voxel))
}

fn overfit() -> Check {
    let t = Instant::now();
    let data = SynthHandSpec::msra_hand(7).generate(8)?;
    let mc = overfit_config();
    let setup = setup_for(&mc);
    let cfg = TrainConfig {
        lr_init: 1e-3,
        batch_size: 8,
        epochs: 500,
        lr_decay_every_epochs: 1000,
        max_steps: Some(500),
        ..Default::default()
    };
    let (model, log) = run_training::<f32>(&mc, &data, &cfg, &setup, 1)?;
    let (err, voxel) = mean_error_voxels(&model, &data, &setup)?;
    let ratio = err / voxel;
    ensure!(ratio < 1.5, "mean error {err:.2} mm = {ratio:.3} voxels after {} steps", log.len());
    within(Duration::from_secs(15 * 60), t)?;
    Ok(format!(
        "{} steps, loss {:.1} -> {:.1}, mean error {err:.2} mm = {ratio:.3} voxels ({voxel:.2} mm)",
        log.len(),
        log[0].loss.total,
        log.last().unwrap().loss.total
    ))
}

// ---------------------------------------------------------------- 8

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_EPOCHS: usize = 30;

fn ablation() -> Check {
    let mut all = SynthHandSpec::msra_hand(8).generate(200)?;
    let test = all.split_off(160);
    let mc = overfit_config();
    let setup = setup_for(&mc);
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for seed in ABLATION_SEEDS {
        for bone in [true, false] {
            let cfg = TrainConfig {
                lr_init: 1e-3,
                batch_size: 8,
                epochs: ABLATION_EPOCHS,
                lr_decay_every_epochs: 1000,
                bone_loss_enabled: bone,
                seed,
                ..Default::default()
            };
            let (model, _) = run_training::<f32>(&mc, &all, &cfg, &setup, seed)?;
            let (report, _) = evaluate_model(
                &model,
                &test,
                &setup.preprocess,
                &DecodeConfig::default(),
                &default_thresholds(),
            )?;
            let bucket = if bone { &mut on } else { &mut off };
            bucket.push(report.mean_error_mm);
        }
    }
    let (m_on, m_off) = (median(on.clone()), median(off.clone()));
    let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>().join("/");
    let detail = format!("median test error bone-on {m_on:.2} mm vs off {m_off:.2} mm (on {}, off {})", fmt(&on), fmt(&off));
    ensure!(m_on <= m_off, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn persistence() -> Check {
    let data = SynthHandSpec::msra_hand(99).generate(6)?;
    let mc = HourglassConfig { batchnorm: true, ..small_hand_config() };
    let setup = setup_for(&mc);
    let cfg = TrainConfig {
        lr_init: 1e-3,
        batch_size: 2,
        epochs: 4,
        seed: 9,
        ..Default::default()
    };
    let (a, log_a) = run_training::<f32>(&mc, &data, &cfg, &setup, 9)?;
    let (b, log_b) = run_training::<f32>(&mc, &data, &cfg, &setup, 9)?;
    ensure!(log_a == log_b, "loss logs differ between identical runs");
    ensure!(a.params() == b.params(), "parameters differ between identical runs");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    a.save(&path)?;
    let back = HourglassModel::<f32>::load(&path)?;
    ensure!(back.params() == a.params() && back.config() == a.config(), "checkpoint round trip is not bitwise");
    let x = binary(&[2, 1, 8, 8, 8], 12).cast::<f32>();
    ensure!(a.predict(&x)? == back.predict(&x)?, "eval forward differs after reload");

    let (ra, pa) = evaluate_model(&a, &data, &setup.preprocess, &DecodeConfig::default(), &default_thresholds())?;
    let (rb, pb) = evaluate_model(&back, &data, &setup.preprocess, &DecodeConfig::default(), &default_thresholds())?;
    ensure!(ra == rb && pa == pb, "evaluation differs after reload");

    // Stopping and resuming lands on the same parameters.
    let mut m = HourglassModel::<f32>::build(&mc, 9)?;
    let mut st = RmsState::new(m.params());
    let half = TrainConfig { max_steps: Some(log_a.len() as u64 / 2), ..cfg.clone() };
    train(&mut m, &data, &setup, &half, &mut st, &mut |_| Ok(()))?;
    let spath = dir.path().join("optim.state");
    m.save(&path)?;
    st.save(&spath)?;
    let mut m2 = HourglassModel::<f32>::load(&path)?;
    let mut st2 = RmsState::load(&spath, m2.params())?;
    ensure!(st2 == st, "optimizer state round trip is not bitwise");
    train(&mut m2, &data, &setup, &cfg, &mut st2, &mut |_| Ok(()))?;
    ensure!(m2.params() == a.params(), "resumed run differs from the uninterrupted run");
    Ok(format!("{} steps reproduced bitwise, checkpoint/eval/resume identical", log_a.len()))
}

// ---------------------------------------------------------------- 10

fn augmentation() -> Check {
    let cfg = AugmentConfig::default();
    ensure!(
        cfg.rotation_range_deg == 30.0 && cfg.aspect_range == (0.8, 1.2) && cfg.enabled,
        "defaults are {cfg:?}"
    );
    let mut r = rng(10);
    let limit = 30f64.to_radians();
    let (mut tmin, mut tmax, mut smin, mut smax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for _ in 0..10_000 {
        let d = AugmentDraw::sample(&cfg, &mut r);
        ensure!(d.theta_rad.abs() <= limit, "rotation {} rad", d.theta_rad);
        for s in [d.scale_x, d.scale_y] {
            ensure!((0.8..=1.2).contains(&s), "aspect factor {s}");
            smin = smin.min(s);
            smax = smax.max(s);
        }
        tmin = tmin.min(d.theta_rad);
        tmax = tmax.max(d.theta_rad);
    }

    let sample = &SynthHandSpec::msra_hand(101).generate(1)?[0];
    let pts = &sample.cloud.points;
    let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let rot = AugmentDraw {
            theta_rad: r.random_range(-limit..=limit),
            scale_x: 1.0,
            scale_y: 1.0,
        };
        let (c, _) = rot.apply(&sample.cloud, &sample.pose);
        for _ in 0..500 {
            let (i, j) = (r.random_range(0..pts.len()), r.random_range(0..pts.len()));
            worst = worst.max((dist(pts[i], pts[j]) - dist(c.points[i], c.points[j])).abs());
        }
    }
    ensure!(worst <= 1e-9, "rotation changed a pairwise distance by {worst}");

    let (c, p) = AugmentDraw::IDENTITY.apply(&sample.cloud, &sample.pose);
    ensure!(c == sample.cloud && p == sample.pose, "identity draw moved points");
    let pre = PreprocessConfig::default();
    let before = prepare(sample, &Skeleton::msra(), &pre, false)?;
    let after = prepare(&RawSample { cloud: c, pose: p }, &Skeleton::msra(), &pre, false)?;
    ensure!(before.voxels.occupancy == after.voxels.occupancy, "identity draw changed occupancy");
    let (c2, p2, d) = augment(&sample.cloud, &sample.pose, &AugmentConfig { enabled: false, ..cfg }, &mut r);
    ensure!(d == AugmentDraw::IDENTITY && c2 == sample.cloud && p2 == sample.pose, "disabled augmentation is not the identity");
    Ok(format!(
        "10000 draws: rotation [{:.2}, {:.2}] deg, aspect [{smin:.3}, {smax:.3}]; distances kept to {worst:.1e}; identity bitwise",
        tmin.to_degrees(),
        tmax.to_degrees()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", gradients),
        ("convolution oracle", conv_oracle_check),
        ("voxel geometry", geometry),
        ("discretization bound", corner_bound),
        ("decode fidelity", decode_fidelity),
        ("loss structure", loss_structure),
        ("end-to-end overfit", overfit),
        ("skeleton-constraint ablation", ablation),
        ("determinism and persistence", persistence),
        ("augmentation contracts", augmentation),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}").into())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {e} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
