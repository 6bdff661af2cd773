//! Train/test sample sources for the manifest and synthetic datasets.

use anyhow::{bail, Result};
use hg3d::config::RunConfig;
use hg3d::data::{DatasetManifest, MsraSource};
use hg3d::heatmap::Skeleton;
use hg3d::sample::{RawSample, SampleSource};

use crate::Global;

pub struct Split {
    pub train: Box<dyn SampleSource>,
    pub test: Box<dyn SampleSource>,
    pub test_ids: Vec<String>,
}

/// Share of synthetic samples used for training; the rest, in order, is the test set.
const SYNTH_TRAIN_FRACTION: f64 = 0.8;

pub fn synth_samples(cfg: &RunConfig, skeleton: &Skeleton) -> Result<Vec<RawSample>> {
    let spec = cfg.synth.spec();
    if &spec.skeleton != skeleton {
        bail!("synthetic hands use the msra skeleton, config selects `{}`", cfg.skeleton);
    }
    Ok(spec.generate(cfg.synth.count)?)
}

pub fn split(g: &Global, cfg: &RunConfig, skeleton: &Skeleton) -> Result<Split> {
    match &g.manifest {
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            let holdout = g.subject_holdout.unwrap_or(m.holdout);
            let camera = m.camera()?;
            let (train, test) = m.split(m.frames(skeleton.joints())?, holdout)?;
            let test_ids = test.iter().map(|f| f.id(&m)).collect();
            Ok(Split {
                train: Box::new(MsraSource { frames: train, camera }),
                test: Box::new(MsraSource { frames: test, camera }),
                test_ids,
            })
        }
        None => {
            if g.subject_holdout.is_some() {
                bail!("--subject-holdout needs --manifest");
            }
            let mut all = synth_samples(cfg, skeleton)?;
            let cut = (all.len() as f64 * SYNTH_TRAIN_FRACTION).round() as usize;
            let test = all.split_off(cut);
            let test_ids = (cut..cut + test.len()).map(|i| format!("synth/{i:06}")).collect();
            Ok(Split {
                train: Box::new(all),
                test: Box::new(test),
                test_ids,
            })
        }
    }
}
