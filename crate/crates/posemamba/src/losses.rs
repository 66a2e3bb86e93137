//! Training objective: position, velocity, smoothness and 2D re-projection
//! terms, all built on the graph so they can be differentiated.
//!
//! Poses are flattened `[T·J × 3]` in frame-major order. A per-frame
//! validity mask removes padded frames from every term.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::numerics::{CustomOp, Graph, Scalar, Tensor, Var};

/// Coefficients of the auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_m: f64,
    pub lambda_2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 20.0,
            lambda_m: 1.0,
            lambda_2d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_t: 0.0,
            lambda_m: 0.0,
            lambda_2d: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_m", self.lambda_m),
            ("lambda_2d", self.lambda_2d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PoseError::Parameter(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Token grid shape plus which frames count.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMask {
    pub frames: usize,
    pub joints: usize,
    valid: Vec<bool>,
}

impl FrameMask {
    pub fn all(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            valid: vec![true; frames],
        }
    }

    pub fn new(joints: usize, valid: Vec<bool>) -> Self {
        Self {
            frames: valid.len(),
            joints,
            valid,
        }
    }

    pub fn is_valid(&self, frame: usize) -> bool {
        self.valid[frame]
    }

    pub fn valid_frames(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn tokens(&self, frames: impl Iterator<Item = usize>) -> Arc<[usize]> {
        let j = self.joints;
        frames.flat_map(|f| (0..j).map(move |jj| f * j + jj)).collect()
    }

    fn frame_tokens(&self) -> Arc<[usize]> {
        self.tokens((0..self.frames).filter(|&f| self.valid[f]))
    }

    /// Token indices of `(later, earlier)` for every consecutive valid pair.
    fn pair_tokens(&self) -> (Arc<[usize]>, Arc<[usize]>) {
        let pairs: Vec<usize> = (1..self.frames)
            .filter(|&f| self.valid[f] && self.valid[f - 1])
            .collect();
        (
            self.tokens(pairs.iter().copied()),
            self.tokens(pairs.iter().map(|f| f - 1)),
        )
    }
}

fn check<T: Scalar>(g: &Graph<T>, v: Var, m: &FrameMask, c: usize, what: &str) -> Result<()> {
    if g.shape(v) != [m.frames * m.joints, c] {
        return Err(PoseError::Dimension(format!(
            "{what} has shape {:?}, expected [{}, {c}]",
            g.shape(v),
            m.frames * m.joints
        )));
    }
    Ok(())
}

/// Euclidean norm of every row.
fn row_norms<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let s = g.sum_last(sq)?;
    g.sqrt(s)
}

fn velocities<T: Scalar>(g: &mut Graph<T>, x: Var, m: &FrameMask) -> Result<Option<Var>> {
    let (later, earlier) = m.pair_tokens();
    if later.is_empty() {
        return Ok(None);
    }
    let a = g.gather_rows(x, later)?;
    let b = g.gather_rows(x, earlier)?;
    Ok(Some(g.sub(a, b)?))
}

fn need_two_frames(m: &FrameMask, what: &str) -> Result<()> {
    if m.frames < 2 {
        return Err(PoseError::DegenerateInput(format!("{what} needs at least 2 frames")));
    }
    Ok(())
}

/// Mean joint distance over valid frames.
pub fn mpjpe_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var, m: &FrameMask) -> Result<Var> {
    check(g, pred, m, 3, "prediction")?;
    check(g, gt, m, 3, "ground truth")?;
    if m.valid_frames() == 0 {
        return Err(PoseError::DegenerateInput("no valid frames".into()));
    }
    let idx = m.frame_tokens();
    let p = g.gather_rows(pred, idx.clone())?;
    let t = g.gather_rows(gt, idx)?;
    let d = g.sub(p, t)?;
    let n = row_norms(g, d)?;
    g.mean(n)
}

/// Mean distance between predicted and true per-frame velocities.
pub fn mpjve_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var, m: &FrameMask) -> Result<Var> {
    need_two_frames(m, "velocity loss")?;
    check(g, pred, m, 3, "prediction")?;
    check(g, gt, m, 3, "ground truth")?;
    let (Some(vp), Some(vt)) = (velocities(g, pred, m)?, velocities(g, gt, m)?) else {
        return Err(PoseError::DegenerateInput("no consecutive valid frames".into()));
    };
    let d = g.sub(vp, vt)?;
    let n = row_norms(g, d)?;
    g.mean(n)
}

/// Mean squared norm of consecutive prediction differences.
pub fn tc_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, m: &FrameMask) -> Result<Var> {
    need_two_frames(m, "smoothness loss")?;
    check(g, pred, m, 3, "prediction")?;
    let Some(v) = velocities(g, pred, m)? else {
        return Err(PoseError::DegenerateInput("no consecutive valid frames".into()));
    };
    let sq = g.mul(v, v)?;
    let s = g.sum_last(sq)?;
    g.mean(s)
}

/// Subtracts from every row the mean of its group of `group` consecutive
/// rows (one group per frame).
struct CentreGroups {
    group: usize,
}

fn centre_rows<T: Scalar>(x: &[T], d: usize, group: usize) -> Vec<T> {
    let mut out = x.to_vec();
    let n = T::of(group as f64);
    for block in out.chunks_mut(group * d) {
        for c in 0..d {
            let mu = block.iter().skip(c).step_by(d).copied().sum::<T>() / n;
            for v in block.iter_mut().skip(c).step_by(d) {
                *v -= mu;
            }
        }
    }
    out
}

impl<T: Scalar> CustomOp<T> for CentreGroups {
    fn name(&self) -> &'static str {
        "centre_groups"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        // centring is a symmetric projection
        vec![Some(centre_rows(grad_out, inputs[0].last_dim(), self.group))]
    }
}

fn centre_groups<T: Scalar>(g: &mut Graph<T>, x: Var, group: usize) -> Result<Var> {
    let v = g.value(x);
    let out = Tensor::new(v.shape(), centre_rows(v.data(), v.last_dim(), group))?;
    g.custom(Box::new(CentreGroups { group }), &[x], out)
}

/// Mean 2D distance between the input keypoints and the orthographic
/// projection of the prediction after a least-squares fit of one scale per
/// sequence and one translation per frame (the 3D poses are root-relative
/// while the 2D keypoints carry the global trajectory).
pub fn reproj_2d_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, input2d: Var, m: &FrameMask) -> Result<Var> {
    check(g, pred, m, 3, "prediction")?;
    check(g, input2d, m, 2, "2D input")?;
    if m.valid_frames() == 0 {
        return Err(PoseError::DegenerateInput("no valid frames".into()));
    }
    let idx = m.frame_tokens();
    let p = g.gather_rows(pred, idx.clone())?;
    let p = g.slice_cols(p, 0, 2)?;
    let x = g.gather_rows(input2d, idx)?;

    let pc = centre_groups(g, p, m.joints)?;
    let xc = centre_groups(g, x, m.joints)?;
    let pp = {
        let sq = g.mul(pc, pc)?;
        g.sum(sq)?
    };
    let xx: T = g.value(xc).data().iter().map(|&v| v * v).sum();
    if g.value(pp).item() == T::zero() || xx == T::zero() {
        return Err(PoseError::Alignment(
            "re-projection fit is degenerate: a point set has no spread".into(),
        ));
    }
    let px = {
        let prod = g.mul(pc, xc)?;
        g.sum(prod)?
    };
    let inv = g.recip(pp)?;
    let s = g.mul(px, inv)?;
    let fitted = g.scale_by(pc, s)?;
    let r = g.sub(fitted, xc)?;
    let n = row_norms(g, r)?;
    g.mean(n)
}

/// Graph handles of every term of the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mpjpe: Var,
    pub mpjve: Var,
    pub tc: Var,
    pub reproj: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub mpjpe: f64,
    pub mpjve: f64,
    pub tc: f64,
    pub reproj: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(self.total),
            mpjpe: v(self.mpjpe),
            mpjve: v(self.mpjve),
            tc: v(self.tc),
            reproj: v(self.reproj),
        }
    }
}

/// `L = L_3D + λ_t·L_t + λ_m·L_m + λ_2D·L_2D`. The velocity and smoothness
/// terms are zero for single-frame clips.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    input2d: Var,
    m: &FrameMask,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let mpjpe = mpjpe_loss(g, pred, gt, m)?;
    let temporal = m.frames >= 2 && !m.pair_tokens().0.is_empty();
    let (mpjve, tc) = if temporal {
        (mpjve_loss(g, pred, gt, m)?, tc_loss(g, pred, m)?)
    } else {
        let z = g.constant(Tensor::scalar(T::zero()));
        (z, z)
    };
    let reproj = reproj_2d_loss(g, pred, input2d, m)?;
    let mut parts = vec![mpjpe];
    for (term, lambda) in [(tc, w.lambda_t), (mpjve, w.lambda_m), (reproj, w.lambda_2d)] {
        if lambda != 0.0 {
            parts.push(g.scale(term, T::of(lambda))?);
        }
    }
    let total = if parts.len() == 1 { mpjpe } else { g.add_all(&parts)? };
    Ok(LossTerms {
        total,
        mpjpe,
        mpjve,
        tc,
        reproj,
    })
}

/// Evaluates [`total_loss`] on plain tensors (`[T×J×3]`, `[T×J×3]`, `[T×J×2]`).
pub fn loss_values<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    input2d: &Tensor<T>,
    m: &FrameMask,
    w: &LossWeights,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let tokens = m.frames * m.joints;
    let p = g.constant(pred.reshape(&[tokens, 3])?);
    let t = g.constant(gt.reshape(&[tokens, 3])?);
    let x = g.constant(input2d.reshape(&[tokens, 2])?);
    Ok(total_loss(&mut g, p, t, x, m, w)?.values(&g))
}
