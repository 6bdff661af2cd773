//! Dataset manifest and the leave-one-subject-out split.
//!
//! ```text
//! root = /data/msra           # relative paths resolve against the manifest's directory
//! intrinsics = msra_intrinsics.cfg
//! pose_signs = 1 -1 -1        # per-axis sign bringing pose files into the camera frame
//! holdout = 0
//! subject = P0 1 2 3 4 5 6 7 8 9 I IP L MP RP T TIP Y
//! subject = P1 1 2 3 ...
//! ```
//!
//! Each `<root>/<subject>/<gesture>/` holds `joint.txt` and
//! `NNNNNN_depth.bin` for every frame it declares.

use std::fs;
use std::path::{Path, PathBuf};

use super::msra::{read_msra_frame, read_pose_file};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::heatmap::Pose;
use crate::sample::{RawSample, SampleSource};
use crate::voxel::{reproject, CameraIntrinsics};

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectLayout {
    pub name: String,
    pub gestures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub intrinsics: PathBuf,
    pub pose_signs: [f64; 3],
    pub subjects: Vec<SubjectLayout>,
    pub holdout: usize,
}

/// One frame with its ground truth, already sign-corrected.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRef {
    pub subject: usize,
    pub gesture: String,
    pub index: usize,
    pub depth_path: PathBuf,
    pub pose: Pose,
}

impl FrameRef {
    pub fn id(&self, manifest: &DatasetManifest) -> String {
        format!("{}/{}/{:06}", manifest.subjects[self.subject].name, self.gesture, self.index)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let mut subjects = Vec::new();
        let (mut root, mut intrinsics, mut signs, mut holdout) = (None, None, [1.0; 3], 0usize);
        for (key, value) in kv.entries() {
            match key {
                "root" => root = Some(resolve(base, value)),
                "intrinsics" => intrinsics = Some(resolve(base, value)),
                "pose_signs" => {
                    let v: Vec<f64> = value
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::config("pose_signs must be three numbers"))?;
                    if v.len() != 3 || v.iter().any(|s| s.abs() != 1.0) {
                        return Err(Error::config("pose_signs must be three values of 1 or -1"));
                    }
                    signs = [v[0], v[1], v[2]];
                }
                "holdout" => {
                    holdout = value
                        .parse()
                        .map_err(|_| Error::config(format!("holdout `{value}` is not an index")))?
                }
                "subject" => {
                    let mut it = value.split_whitespace();
                    let name = it.next().ok_or_else(|| Error::config("subject line needs a name"))?;
                    subjects.push(SubjectLayout {
                        name: name.to_string(),
                        gestures: it.map(str::to_string).collect(),
                    });
                }
                other => return Err(Error::config(format!("unknown manifest key `{other}`"))),
            }
        }
        let m = DatasetManifest {
            root: root.ok_or_else(|| Error::config("manifest is missing `root`"))?,
            intrinsics: intrinsics.ok_or_else(|| Error::config("manifest is missing `intrinsics`"))?,
            pose_signs: signs,
            subjects,
            holdout,
        };
        if m.subjects.is_empty() {
            return Err(Error::config("manifest lists no subjects"));
        }
        m.check_holdout(m.holdout)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&fs::read_to_string(path)?, base)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "root = {}\nintrinsics = {}\npose_signs = {} {} {}\nholdout = {}\n",
            self.root.display(),
            self.intrinsics.display(),
            self.pose_signs[0],
            self.pose_signs[1],
            self.pose_signs[2],
            self.holdout
        );
        for sub in &self.subjects {
            s.push_str(&format!("subject = {} {}\n", sub.name, sub.gestures.join(" ")));
        }
        s
    }

    fn check_holdout(&self, h: usize) -> Result<()> {
        if h >= self.subjects.len() {
            return Err(Error::config(format!("holdout {h} but only {} subjects", self.subjects.len())));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        crate::config::load_intrinsics(&self.intrinsics)
    }

    /// Resolves every frame, checking that each declared depth file exists.
    pub fn frames(&self, joints: usize) -> Result<Vec<FrameRef>> {
        let mut out = Vec::new();
        for (si, sub) in self.subjects.iter().enumerate() {
            for g in &sub.gestures {
                let dir = self.root.join(&sub.name).join(g);
                let poses = read_pose_file(&dir.join("joint.txt"), joints)?;
                for (index, pose) in poses.into_iter().enumerate() {
                    let depth_path = dir.join(format!("{index:06}_depth.bin"));
                    if !depth_path.is_file() {
                        return Err(Error::Parse {
                            path: depth_path,
                            offset: 0,
                            message: "declared frame has no depth file".into(),
                        });
                    }
                    let pose = Pose::new(
                        pose.joints
                            .iter()
                            .map(|j| [0, 1, 2].map(|a| j[a] * self.pose_signs[a]))
                            .collect(),
                    );
                    out.push(FrameRef {
                        subject: si,
                        gesture: g.clone(),
                        index,
                        depth_path,
                        pose,
                    });
                }
            }
        }
        Ok(out)
    }

    /// `(train, test)`: test is every frame of subject `holdout`, train is everything else.
    pub fn split(&self, frames: Vec<FrameRef>, holdout: usize) -> Result<(Vec<FrameRef>, Vec<FrameRef>)> {
        self.check_holdout(holdout)?;
        Ok(frames.into_iter().partition(|f| f.subject != holdout))
    }
}

/// Lazily reads and reprojects manifest frames.
pub struct MsraSource {
    pub frames: Vec<FrameRef>,
    pub camera: CameraIntrinsics,
}

impl SampleSource for MsraSource {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn get(&self, index: usize) -> Result<RawSample> {
        let f = self
            .frames
            .get(index)
            .ok_or_else(|| Error::dim(format!("frame {index} out of range")))?;
        let frame = read_msra_frame(&f.depth_path)?;
        Ok(RawSample {
            cloud: reproject(&frame, &self.camera)?,
            pose: f.pose.clone(),
        })
    }
}
