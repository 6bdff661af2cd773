use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use hg3d::config::{load_intrinsics, Precision, RunConfig};
use hg3d::data::msra::format_pose_file;
use hg3d::data::read_msra_frame;
use hg3d::decode::{default_thresholds, evaluate, read_predictions, write_predictions, DecodeConfig, EvalReport};
use hg3d::heatmap::{Pose, Skeleton};
use hg3d::hourglass::checkpoint::read_meta;
use hg3d::hourglass::{FlatNetwork, HourglassConfig, HourglassModel};
use hg3d::pipeline::{decode_all, evaluate_model, prepare_all, prepare_inputs, predict_volumes};
use hg3d::sample::{crop, prepare, stack_voxels, PreprocessConfig, SampleSource};
use hg3d::tensor::{gradcheck, Real};
use hg3d::train::{train, LossRecord, RmsState, TrainSetup};
use hg3d::voxel::{reproject, voxelize};

use crate::sources::{self, synth_samples};
use crate::{Command, Global};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Weight noise so zero-initialized branches are exercised.
const GRADCHECK_JITTER: f64 = 0.05;
/// Input offsets so empty regions do not tie inside pooling windows.
const GRADCHECK_INPUT_OFFSET: f64 = 0.1;
const EVAL_BATCH: usize = 8;

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::Wide => $f::<f64>($($arg),*),
            Precision::Narrow => $f::<f32>($($arg),*),
        }
    };
}

pub fn run(cmd: &Command, g: &Global, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Voxelize { frame, intrinsics } => voxelize_frame(g, cfg, frame, intrinsics),
        Command::Synth => write_synth(g, cfg),
        Command::Train { resume } => dispatch!(cfg.precision, train_run(g, cfg, *resume)),
        Command::Eval { checkpoint: Some(c), .. } => dispatch!(checkpoint_precision(c)?, eval_checkpoint(g, cfg, c)),
        Command::Eval { predictions: Some(p), truth: Some(t), .. } => eval_files(g, cfg, p, t),
        Command::Eval { .. } => bail!("eval needs --checkpoint or both --predictions and --truth"),
        Command::Predict { checkpoint } => dispatch!(checkpoint_precision(checkpoint)?, predict_run(g, cfg, checkpoint)),
        Command::Gradcheck => gradcheck_run(cfg),
        Command::SweepK { checkpoint, ks } => sweep_k(g, cfg, checkpoint.as_deref(), ks),
    }
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let meta = read_meta(path).with_context(|| format!("reading {}", path.display()))?;
    let p = meta.get("precision").context("checkpoint does not record its precision")?;
    Ok(p.parse()?)
}

fn write_out(g: &Global, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(&g.out)?;
    let path = g.out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn voxelize_frame(g: &Global, cfg: &RunConfig, frame: &Path, intrinsics: &Path) -> Result<()> {
    let camera = load_intrinsics(intrinsics)?;
    let cloud = reproject(&read_msra_frame(frame)?, &camera)?;
    let cube = crop(&cloud, &cfg.crop)?;
    let vox = voxelize(&cloud, &cube, cfg.model.input_res)?;
    let c = cube.center;
    let mut s = format!(
        "# center {} {} {}\n# side {}\n# resolution {}\n# points {}\n# occupied {}\n",
        c[0],
        c[1],
        c[2],
        cube.side,
        cfg.model.input_res,
        cloud.len(),
        vox.occupied_count()
    );
    for [i, j, k] in vox.occupied() {
        let _ = writeln!(s, "{i} {j} {k}");
    }
    write_out(g, "voxels.txt", &s)?;
    println!(
        "{} points, cube side {:.1} mm, {} of {} voxels occupied",
        cloud.len(),
        cube.side,
        vox.occupied_count(),
        cfg.model.input_res.pow(3)
    );
    Ok(())
}

fn write_synth(g: &Global, cfg: &RunConfig) -> Result<()> {
    let samples = synth_samples(cfg, &cfg.load_skeleton()?)?;
    let dir = g.out.join("synth");
    fs::create_dir_all(&dir)?;
    let poses: Vec<Pose> = samples.iter().map(|s| s.pose.clone()).collect();
    fs::write(dir.join("joint.txt"), format_pose_file(&poses))?;
    for (i, s) in samples.iter().enumerate() {
        let mut text = String::new();
        for p in &s.cloud.points {
            let _ = writeln!(text, "{} {} {}", p[0], p[1], p[2]);
        }
        fs::write(dir.join(format!("{i:06}.xyz")), text)?;
    }
    println!("{} samples written to {}", samples.len(), dir.display());
    Ok(())
}

fn train_run<T: Real>(g: &Global, cfg: &RunConfig, resume: bool) -> Result<()> {
    let skeleton = cfg.load_skeleton()?;
    let data = sources::split(g, cfg, &skeleton)?;
    fs::create_dir_all(&g.out)?;
    let ckpt = g.out.join("model.ckpt");
    let optim = g.out.join("optim.state");
    let (mut model, mut state) = if resume {
        let m = HourglassModel::<T>::load_expecting(&ckpt, skeleton.joints(), skeleton.bone_count())
            .with_context(|| format!("resuming from {}", ckpt.display()))?;
        if m.config() != &cfg.model {
            bail!("{} was trained with a different architecture than the configuration", ckpt.display());
        }
        let s = RmsState::load(&optim, m.params()).with_context(|| format!("resuming from {}", optim.display()))?;
        (m, s)
    } else {
        let m = HourglassModel::<T>::build(&cfg.model, cfg.seed)?;
        let s = RmsState::new(m.params());
        (m, s)
    };
    fs::write(g.out.join("config.txt"), cfg.to_text())?;
    let log_path = g.out.join("loss.log");
    let mut log = if resume {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        fs::File::create(&log_path)?
    };
    let setup = TrainSetup {
        skeleton,
        preprocess: cfg.crop.clone(),
        augment: cfg.augment.clone(),
    };
    let mut on_step = |r: &LossRecord| -> hg3d::Result<()> {
        writeln!(log, "{r}")?;
        if r.step % 10 == 0 {
            eprintln!("epoch {} step {} lr {:.3e} loss {:.4}", r.epoch, r.step, r.lr, r.loss.total);
        }
        Ok(())
    };
    let first = state.step;
    let records = train(&mut model, data.train.as_ref(), &setup, &cfg.train, &mut state, &mut on_step)?;
    model.save(&ckpt)?;
    state.save(&optim)?;
    match records.last() {
        Some(r) => println!("steps {}..{} done, final loss {}", first, state.step, r.loss.total),
        None => println!("no steps run; wrote the model at step {}", state.step),
    }
    Ok(())
}

fn joint_names(skeleton: &Skeleton, joints: usize) -> Vec<String> {
    if skeleton.joints() == joints {
        skeleton.joint_names.clone()
    } else {
        (0..joints).map(|j| format!("joint{j}")).collect()
    }
}

fn report_out(g: &Global, report: &EvalReport, names: &[String]) -> Result<()> {
    let text = report.to_text(names);
    write_out(g, "report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn eval_files(g: &Global, cfg: &RunConfig, predictions: &Path, truth: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<(Vec<String>, Vec<Pose>)> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        read_predictions(&text).with_context(|| format!("parsing {}", p.display()))
    };
    let (pid, pred) = read(predictions)?;
    let (tid, truth) = read(truth)?;
    if pid != tid {
        bail!("prediction and ground-truth files list different frame ids");
    }
    let report = evaluate(&pred, &truth, &default_thresholds())?;
    let joints = truth.first().map_or(0, Pose::len);
    report_out(g, &report, &joint_names(&cfg.load_skeleton()?, joints))
}

fn load_checkpoint<T: Real>(path: &Path, skeleton: &Skeleton) -> Result<HourglassModel<T>> {
    HourglassModel::<T>::load_expecting(path, skeleton.joints(), skeleton.bone_count())
        .with_context(|| format!("loading {}", path.display()))
}

/// Crop settings from the config with resolutions taken from the model.
fn preprocess_for(cfg: &RunConfig, model: &HourglassConfig) -> PreprocessConfig {
    PreprocessConfig {
        input_res: model.input_res,
        output_res: model.output_res,
        ..cfg.crop.clone()
    }
}

fn ground_truth(source: &dyn SampleSource) -> Result<Vec<Pose>> {
    Ok((0..source.len()).map(|i| source.get(i).map(|s| s.pose)).collect::<hg3d::Result<_>>()?)
}

fn eval_checkpoint<T: Real>(g: &Global, cfg: &RunConfig, path: &Path) -> Result<()> {
    let skeleton = cfg.load_skeleton()?;
    let model = load_checkpoint::<T>(path, &skeleton)?;
    let data = sources::split(g, cfg, &skeleton)?;
    let pre = preprocess_for(cfg, model.config());
    let (report, pred) = evaluate_model(&model, data.test.as_ref(), &pre, &cfg.decode, &default_thresholds())?;
    write_out(g, "predictions.txt", &write_predictions(&data.test_ids, &pred))?;
    write_out(g, "truth.txt", &write_predictions(&data.test_ids, &ground_truth(data.test.as_ref())?))?;
    report_out(g, &report, &skeleton.joint_names)
}

fn predict_run<T: Real>(g: &Global, cfg: &RunConfig, path: &Path) -> Result<()> {
    let skeleton = cfg.load_skeleton()?;
    let model = load_checkpoint::<T>(path, &skeleton)?;
    let data = sources::split(g, cfg, &skeleton)?;
    let prepared = prepare_inputs(data.test.as_ref(), &preprocess_for(cfg, model.config()))?;
    let vols = predict_volumes(&model, &prepared, EVAL_BATCH)?;
    let (poses, fallbacks) = decode_all(&vols, &prepared, &cfg.decode)?;
    write_out(g, "predictions.txt", &write_predictions(&data.test_ids, &poses))?;
    println!("{} frames predicted, {} joints fell back to the cube centre", poses.len(), fallbacks);
    Ok(())
}

fn gradcheck_run(cfg: &RunConfig) -> Result<()> {
    let mc = HourglassConfig::miniature();
    let pre = PreprocessConfig {
        input_res: mc.input_res,
        output_res: mc.output_res,
        ..cfg.crop.clone()
    };
    let skeleton = Skeleton::msra();
    let samples = cfg.synth.spec().generate(2)?;
    let prepared = samples
        .iter()
        .map(|s| prepare(s, &skeleton, &pre, false))
        .collect::<hg3d::Result<Vec<_>>>()?;
    let mut x = stack_voxels::<f64>(&prepared.iter().map(|p| &p.voxels).collect::<Vec<_>>())?;
    // Weyl sequence: distinct, reproducible offsets in [0, 0.1).
    for (i, v) in x.values_mut().iter_mut().enumerate() {
        *v += GRADCHECK_INPUT_OFFSET * (i as f64 * 0.618_033_988_749_895).fract();
    }
    let mut model = HourglassModel::<f64>::build(&mc, cfg.seed)?;
    model.jitter(GRADCHECK_JITTER, cfg.seed);
    let net = model.network().clone();
    let r = gradcheck(&FlatNetwork { network: &net }, model.params_mut(), &x, 1e-5)?;
    println!(
        "max relative error {:.3e} at {}[{}] over {} entries",
        r.max_rel_error, r.worst.0, r.worst.1, r.entries_checked
    );
    if !(r.max_rel_error < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", r.max_rel_error);
    }
    println!("PASS");
    Ok(())
}

fn sweep_k(g: &Global, cfg: &RunConfig, checkpoint: Option<&Path>, ks: &[usize]) -> Result<()> {
    let skeleton = cfg.load_skeleton()?;
    let data = sources::split(g, cfg, &skeleton)?;
    let (prepared, vols) = match checkpoint {
        Some(c) => dispatch!(checkpoint_precision(c)?, model_volumes(cfg, c, &skeleton, data.test.as_ref()))?,
        None => {
            let prepared = prepare_all(data.test.as_ref(), &skeleton, &cfg.crop)?;
            let vols = prepared.iter().map(|p| p.joints.clone()).collect();
            (prepared, vols)
        }
    };
    let truth = ground_truth(data.test.as_ref())?;
    let mut table = String::from("# k mean_error_mm max_frame_error_mm fallback_joints\n");
    for &k in ks {
        let (pred, fallbacks) = decode_all(&vols, &prepared, &DecodeConfig { k })?;
        let r = evaluate(&pred, &truth, &[])?;
        let _ = writeln!(table, "{k} {:.4} {:.4} {fallbacks}", r.mean_error_mm, r.max_frame_error_mm);
    }
    write_out(g, "sweep_k.txt", &table)?;
    print!("{table}");
    Ok(())
}

type Volumes = (Vec<hg3d::sample::Prepared>, Vec<hg3d::heatmap::HeatmapVolume>);

fn model_volumes<T: Real>(cfg: &RunConfig, path: &Path, skeleton: &Skeleton, test: &dyn SampleSource) -> Result<Volumes> {
    let model = load_checkpoint::<T>(path, skeleton)?;
    let prepared = prepare_inputs(test, &preprocess_for(cfg, model.config()))?;
    let vols = predict_volumes(&model, &prepared, EVAL_BATCH)?;
    Ok((prepared, vols))
}
