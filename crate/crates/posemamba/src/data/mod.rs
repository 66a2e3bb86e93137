//! Keypoint sequences: on-disk format, normalization, augmentation,
//! clipping and a synthetic kinematic dataset.

mod clips;
mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::model::flip_horizontal;
use crate::numerics::Tensor;
use crate::scan_orders::Skeleton;

pub use clips::{make_clips, shuffled_indices, Clip};
pub use synth::{h36m_bone_lengths, h36m_rest_directions, synth_generate, Camera, SyntheticConfig};

/// Identifies the dataset file format in its header line.
pub const FORMAT_NAME: &str = "posemamba-sequences";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on the root joint of stored 3D poses, in millimetres.
pub const ROOT_TOLERANCE_MM: f64 = 1e-6;

/// One keypoint sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub action: Option<String>,
    pub fps: f64,
    /// `[T×J×2]`, normalized image coordinates in `[-1, 1]`.
    pub keypoints_2d: Tensor<f64>,
    /// `[T×J×3]` millimetres, root joint at the origin.
    pub poses_3d: Option<Tensor<f64>>,
    /// `[T×J]`
    pub confidence: Option<Tensor<f64>>,
}

impl SequenceRecord {
    pub fn frames(&self) -> usize {
        self.keypoints_2d.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.keypoints_2d.shape()[1]
    }

    /// Checks shapes, finiteness, normalization bounds and root alignment.
    /// `record` is only used for error locations.
    pub fn validate(&self, record: usize) -> Result<()> {
        let bad = |field: &str, index: usize, message: String| PoseError::Validation {
            record,
            field: field.into(),
            index,
            message,
        };
        let s = self.keypoints_2d.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(bad("keypoints_2d", 0, format!("shape {s:?} is not [T, J, 2]")));
        }
        let (t, j) = (s[0], s[1]);
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(bad("fps", 0, format!("{} is not a positive frame rate", self.fps)));
        }
        for (i, v) in self.keypoints_2d.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(bad("keypoints_2d", i, format!("non-finite value {v}")));
            }
            if v.abs() > 1.0 {
                return Err(bad("keypoints_2d", i, format!("{v} is outside [-1, 1]")));
            }
        }
        if let Some(p) = &self.poses_3d {
            if p.shape() != [t, j, 3] {
                return Err(bad(
                    "poses_3d",
                    0,
                    format!("shape {:?} is not [{t}, {j}, 3]", p.shape()),
                ));
            }
            for (i, v) in p.data().iter().enumerate() {
                if !v.is_finite() {
                    return Err(bad("poses_3d", i, format!("non-finite value {v}")));
                }
            }
            for f in 0..t {
                let root = &p.data()[f * j * 3..f * j * 3 + 3];
                if root.iter().any(|v| v.abs() > ROOT_TOLERANCE_MM) {
                    return Err(bad(
                        "poses_3d",
                        f * j * 3,
                        format!("root joint of frame {f} is not at the origin"),
                    ));
                }
            }
        }
        if let Some(c) = &self.confidence {
            if c.shape() != [t, j] {
                return Err(bad("confidence", 0, format!("shape {:?} is not [{t}, {j}]", c.shape())));
            }
            for (i, v) in c.data().iter().enumerate() {
                if !v.is_finite() {
                    return Err(bad("confidence", i, format!("non-finite value {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    #[serde(default)]
    action: Option<String>,
    fps: f64,
    frames: usize,
    joints: usize,
    keypoints_2d: Vec<f64>,
    #[serde(default)]
    poses_3d: Option<Vec<f64>>,
    #[serde(default)]
    confidence: Option<Vec<f64>>,
}

impl RecordLine {
    fn from_record(r: &SequenceRecord) -> Self {
        Self {
            id: r.id.clone(),
            action: r.action.clone(),
            fps: r.fps,
            frames: r.frames(),
            joints: r.joints(),
            keypoints_2d: r.keypoints_2d.data().to_vec(),
            poses_3d: r.poses_3d.as_ref().map(|p| p.data().to_vec()),
            confidence: r.confidence.as_ref().map(|c| c.data().to_vec()),
        }
    }

    fn into_record(self) -> std::result::Result<SequenceRecord, String> {
        let (t, j) = (self.frames, self.joints);
        let tensor =
            |name: &str, data: Vec<f64>, shape: &[usize]| Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"));
        Ok(SequenceRecord {
            id: self.id,
            action: self.action,
            fps: self.fps,
            keypoints_2d: tensor("keypoints_2d", self.keypoints_2d, &[t, j, 2])?,
            poses_3d: self.poses_3d.map(|d| tensor("poses_3d", d, &[t, j, 3])).transpose()?,
            confidence: self.confidence.map(|d| tensor("confidence", d, &[t, j])).transpose()?,
        })
    }
}

/// Reads a dataset: one header line naming format and version, then one
/// JSON object per record. An empty file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let parse = |record: usize, message: String| PoseError::Parse {
        path: path.to_path_buf(),
        record,
        message,
    };
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: Header = serde_json::from_str(&header).map_err(|e| parse(0, format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(parse(0, format!("unknown format {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(parse(0, format!("unsupported version {}", header.version)));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = out.len();
        // non-finite numbers are not valid JSON; report them as validation errors
        if let Some(field) = non_finite_field(&line) {
            return Err(PoseError::Validation {
                record: index,
                field,
                index: 0,
                message: "non-finite value".into(),
            });
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| parse(index, e.to_string()))?;
        let rec = raw.into_record().map_err(|m| parse(index, m))?;
        rec.validate(index)?;
        out.push(rec);
    }
    Ok(out)
}

fn non_finite_field(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let obj = v.as_object()?;
    for (k, val) in obj {
        if let Some(arr) = val.as_array() {
            if arr.iter().any(|x| x.is_null()) {
                return Some(k.clone());
            }
        }
    }
    None
}

/// Writes records atomically (temporary file, then rename).
pub fn save_dataset(records: &[SequenceRecord], path: &Path) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let header = Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for r in records {
            let line = serde_json::to_string(&RecordLine::from_record(r)).expect("finite record serializes");
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Maps pixel coordinates `[..×2]` into normalized coordinates: the longer
/// image side spans `[-1, 1]` and the image centre maps to the origin.
pub fn normalize_pixels(px: &Tensor<f64>, width: f64, height: f64) -> Result<Tensor<f64>> {
    pixel_map(px, width, height, |v, size, side| 2.0 * v / side - size / side)
}

/// Inverse of [`normalize_pixels`].
pub fn denormalize_pixels(x: &Tensor<f64>, width: f64, height: f64) -> Result<Tensor<f64>> {
    pixel_map(x, width, height, |v, size, side| (v + size / side) * side / 2.0)
}

fn pixel_map(x: &Tensor<f64>, width: f64, height: f64, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f64>> {
    if !(width > 0.0 && height > 0.0) {
        return Err(PoseError::Parameter(format!(
            "image size {width}×{height} must be positive"
        )));
    }
    if x.shape().last() != Some(&2) {
        return Err(PoseError::Dimension(format!(
            "expected trailing dimension 2, got {:?}",
            x.shape()
        )));
    }
    let side = width.max(height);
    let data = x
        .data()
        .chunks(2)
        .flat_map(|p| [f(p[0], width, side), f(p[1], height, side)])
        .collect();
    Tensor::new(x.shape(), data)
}

/// Mirrors a record horizontally: negates x in 2D and 3D and swaps paired
/// joints. Applying it twice is the identity.
pub fn flip_augment(r: &SequenceRecord, skeleton: &Skeleton) -> Result<SequenceRecord> {
    if skeleton.left_right_pairs.is_empty() {
        return Err(PoseError::Config("skeleton has no left/right pairs to mirror".into()));
    }
    let mirror = skeleton.mirror_map()?;
    if mirror.len() != r.joints() {
        return Err(PoseError::Dimension(format!(
            "record has {} joints, skeleton has {}",
            r.joints(),
            mirror.len()
        )));
    }
    let confidence = r
        .confidence
        .as_ref()
        .map(|c| {
            let (t, j) = (c.shape()[0], c.shape()[1]);
            let data = (0..t * j).map(|i| c.data()[i / j * j + mirror[i % j]]).collect();
            Tensor::new(c.shape(), data)
        })
        .transpose()?;
    Ok(SequenceRecord {
        id: r.id.clone(),
        action: r.action.clone(),
        fps: r.fps,
        keypoints_2d: flip_horizontal(&r.keypoints_2d, &mirror)?,
        poses_3d: r.poses_3d.as_ref().map(|p| flip_horizontal(p, &mirror)).transpose()?,
        confidence,
    })
}
