use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SequenceRecord;
use crate::error::{PoseError, Result};
use crate::losses::FrameMask;
use crate::numerics::Tensor;

/// A fixed-length training window cut from one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// Index of the source record.
    pub record: usize,
    /// First source frame.
    pub start: usize,
    /// `[T×J×2]`
    pub keypoints_2d: Tensor<f64>,
    /// `[T×J×3]`
    pub poses_3d: Option<Tensor<f64>>,
    /// Frames past the end of the record repeat its last frame and are
    /// marked invalid here.
    pub mask: FrameMask,
}

/// Windows of `len` frames starting every `stride` frames. A window that
/// runs past the end is edge-padded with the last frame.
pub fn make_clips(records: &[SequenceRecord], len: usize, stride: usize) -> Result<Vec<Clip>> {
    if len == 0 || stride == 0 {
        return Err(PoseError::Parameter(format!(
            "clip length {len} and stride {stride} must be at least 1"
        )));
    }
    let mut out = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        let (t, j) = (r.frames(), r.joints());
        for start in (0..t).step_by(stride) {
            let frames: Vec<usize> = (start..start + len).map(|f| f.min(t - 1)).collect();
            let valid = (start..start + len).map(|f| f < t).collect();
            out.push(Clip {
                record: ri,
                start,
                keypoints_2d: gather_frames(&r.keypoints_2d, &frames),
                poses_3d: r.poses_3d.as_ref().map(|p| gather_frames(p, &frames)),
                mask: FrameMask::new(j, valid),
            });
        }
    }
    Ok(out)
}

fn gather_frames(x: &Tensor<f64>, frames: &[usize]) -> Tensor<f64> {
    let s = x.shape();
    let per = s[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(frames.len() * per);
    for &f in frames {
        data.extend_from_slice(&x.data()[f * per..(f + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = frames.len();
    Tensor::new(&shape, data).expect("gathered frames")
}

/// A seed-determined permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
