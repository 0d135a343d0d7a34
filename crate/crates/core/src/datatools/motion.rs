use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DataError;

pub const TRANSLATION_THRESHOLD_M: f64 = 0.05;
pub const ROTATION_THRESHOLD_DEG: f64 = 15.0;

/// End-effector pose: position followed by the 6D rotation (two basis
/// vectors of the rotation matrix). Serialized as a flat 9-array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 9]", into = "[f64; 9]")]
pub struct Pose {
    pub position: [f64; 3],
    pub rotation_6d: [f64; 6],
}

impl From<[f64; 9]> for Pose {
    fn from(a: [f64; 9]) -> Self {
        Pose {
            position: [a[0], a[1], a[2]],
            rotation_6d: [a[3], a[4], a[5], a[6], a[7], a[8]],
        }
    }
}

impl From<Pose> for [f64; 9] {
    fn from(p: Pose) -> Self {
        let [x, y, z] = p.position;
        let [a, b, c, d, e, f] = p.rotation_6d;
        [x, y, z, a, b, c, d, e, f]
    }
}

type Mat3 = [[f64; 3]; 3];

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Pose {
    pub fn identity_at(position: [f64; 3]) -> Self {
        Pose {
            position,
            rotation_6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// Rotation matrix rows after Gram–Schmidt on the two stored vectors.
    pub fn rotation_matrix(&self) -> Result<Mat3, DataError> {
        let r = self.rotation_6d;
        let a1 = [r[0], r[1], r[2]];
        let a2 = [r[3], r[4], r[5]];
        const EPS: f64 = 1e-9;
        let n1 = dot(a1, a1).sqrt();
        if !n1.is_finite() || n1 < EPS {
            return Err(DataError::MalformedRotation);
        }
        let b1 = scale(a1, 1.0 / n1);
        let u2 = sub(a2, scale(b1, dot(b1, a2)));
        let n2 = dot(u2, u2).sqrt();
        if !n2.is_finite() || n2 < EPS * dot(a2, a2).sqrt().max(1.0) {
            return Err(DataError::MalformedRotation);
        }
        let b2 = scale(u2, 1.0 / n2);
        Ok([b1, b2, cross(b1, b2)])
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn geodesic_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    // trace(Aᵀ B) is the elementwise dot product
    let tr: f64 = (0..3).map(|i| dot(a[i], b[i])).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    pub left: Pose,
    pub right: Pose,
    pub gripper_widths: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTrajectory {
    pub demo_id: String,
    pub source_id: String,
    pub frames: Vec<Frame>,
}

impl DemoTrajectory {
    pub fn check(&self) -> Result<(), DataError> {
        if self.frames.is_empty() {
            return Err(DataError::EmptyDemo(self.demo_id.clone()));
        }
        if let Some(i) = self.frames.windows(2).position(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(DataError::NonIncreasingTime {
                demo_id: self.demo_id.clone(),
                frame: i + 1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionThresholds {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

impl Default for MotionThresholds {
    fn default() -> Self {
        MotionThresholds {
            translation_m: TRANSLATION_THRESHOLD_M,
            rotation_deg: ROTATION_THRESHOLD_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredDemo {
    pub demo: DemoTrajectory,
    /// Index in the input of the first kept frame.
    pub first_kept: usize,
    pub never_moved: bool,
}

impl FilteredDemo {
    pub fn removed(&self) -> usize {
        self.first_kept
    }
}

/// Drops the frames before the first one where either gripper has moved
/// more than the translation or rotation threshold from its frame-0 pose.
pub fn filter_low_motion(demo: &DemoTrajectory, th: MotionThresholds) -> Result<FilteredDemo, DataError> {
    demo.check()?;
    let f0 = &demo.frames[0];
    let start = [(f0.left, f0.left.rotation_matrix()?), (f0.right, f0.right.rotation_matrix()?)];
    let mut crossing = None;
    for (i, f) in demo.frames.iter().enumerate().skip(1) {
        let mut moved = false;
        for (pose, (p0, r0)) in [f.left, f.right].iter().zip(&start) {
            let d = sub(pose.position, p0.position);
            let r = pose.rotation_matrix()?;
            if dot(d, d).sqrt() > th.translation_m || geodesic_angle_deg(r0, &r) > th.rotation_deg {
                moved = true;
            }
        }
        if moved {
            crossing = Some(i);
            break;
        }
    }
    Ok(match crossing {
        Some(i) => FilteredDemo {
            demo: DemoTrajectory {
                demo_id: demo.demo_id.clone(),
                source_id: demo.source_id.clone(),
                frames: demo.frames[i..].to_vec(),
            },
            first_kept: i,
            never_moved: false,
        },
        None => FilteredDemo {
            demo: demo.clone(),
            first_kept: 0,
            never_moved: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusFilterSummary {
    pub demos: usize,
    pub total_frames: usize,
    pub removed_frames: usize,
    pub never_moved: usize,
    pub removed_fraction: f64,
}

/// Filters every demo in parallel, preserving input order.
pub fn filter_corpus(
    demos: &[DemoTrajectory],
    th: MotionThresholds,
) -> Result<(Vec<FilteredDemo>, CorpusFilterSummary), DataError> {
    let out = demos
        .par_iter()
        .map(|d| filter_low_motion(d, th))
        .collect::<Result<Vec<_>, _>>()?;
    let total_frames: usize = demos.iter().map(|d| d.frames.len()).sum();
    let removed_frames: usize = out.iter().map(FilteredDemo::removed).sum();
    let summary = CorpusFilterSummary {
        demos: demos.len(),
        total_frames,
        removed_frames,
        never_moved: out.iter().filter(|f| f.never_moved).count(),
        removed_fraction: if total_frames == 0 {
            0.0
        } else {
            removed_frames as f64 / total_frames as f64
        },
    };
    Ok((out, summary))
}

/// One demo per line.
pub fn parse_demo_jsonl(text: &str) -> Result<Vec<DemoTrajectory>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let d: DemoTrajectory = serde_json::from_str(l).map_err(|e| DataError::BadDemoLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
            d.check()?;
            Ok(d)
        })
        .collect()
}
