//! Evaluation metrics: MPJPE (protocol 1), Procrustes-aligned P-MPJPE
//! (protocol 2) and MPJVE, plus per-action reports.
//!
//! All metrics take `[T×J×3]` tensors and are computed in `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{PoseError, Result};
use crate::numerics::{Scalar, Tensor};

type Mat3 = [[f64; 3]; 3];

fn frames<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(PoseError::Dimension(format!("expected [T, J, 3], got {s:?}")));
    }
    let pts = x
        .data()
        .chunks(3)
        .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
        .collect();
    Ok((s[0], s[1], pts))
}

fn pair<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(usize, usize, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let (t, j, p) = frames(pred)?;
    let (t2, j2, g) = frames(gt)?;
    if (t, j) != (t2, j2) {
        return Err(PoseError::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok((t, j, p, g))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Protocol 1: mean joint distance after translating both poses so that
/// joint 0 sits at the origin in every frame.
pub fn metric_mpjpe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (t, j, p, g) = pair(pred, gt)?;
    let mut total = 0.0;
    for f in 0..t {
        let (rp, rg) = (p[f * j], g[f * j]);
        for k in 0..j {
            total += dist(sub(p[f * j + k], rp), sub(g[f * j + k], rg));
        }
    }
    Ok(total / (t * j) as f64)
}

/// Mean distance between predicted and true velocities.
pub fn metric_mpjve<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (t, j, p, g) = pair(pred, gt)?;
    if t < 2 {
        return Err(PoseError::DegenerateInput(
            "velocity error needs at least 2 frames".into(),
        ));
    }
    let mut total = 0.0;
    for f in 1..t {
        for k in 0..j {
            let (a, b) = (f * j + k, (f - 1) * j + k);
            total += dist(sub(p[a], p[b]), sub(g[a], g[b]));
        }
    }
    Ok(total / ((t - 1) * j) as f64)
}

/// Protocol-2 result: the aligned error over the frames that could be
/// aligned, and how many frames were skipped as rank-deficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PMpjpe {
    pub value: f64,
    pub skipped_frames: usize,
}

/// Protocol 2: per frame, align `pred` to `gt` with the optimal similarity
/// transform (rotation, uniform scale, translation) and average the joint
/// distances. Frames where either pose has collinear joints are skipped.
pub fn metric_p_mpjpe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<PMpjpe> {
    let (t, j, p, g) = pair(pred, gt)?;
    if j < 3 {
        return Err(PoseError::Alignment(format!(
            "alignment needs at least 3 joints, got {j}"
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for f in 0..t {
        let pf = &p[f * j..(f + 1) * j];
        let gf = &g[f * j..(f + 1) * j];
        if let Some(aligned) = procrustes_align(pf, gf) {
            total += aligned.iter().zip(gf).map(|(a, b)| dist(*a, *b)).sum::<f64>();
            used += 1;
        }
    }
    if used == 0 {
        return Err(PoseError::Alignment("every frame is rank-deficient".into()));
    }
    Ok(PMpjpe {
        value: total / (used * j) as f64,
        skipped_frames: t - used,
    })
}

fn centred(x: &[[f64; 3]]) -> ([f64; 3], Vec<[f64; 3]>) {
    let n = x.len() as f64;
    let mut mu = [0.0; 3];
    for p in x {
        for k in 0..3 {
            mu[k] += p[k] / n;
        }
    }
    (mu, x.iter().map(|p| sub(*p, mu)).collect())
}

fn cross_cov(a: &[[f64; 3]], b: &[[f64; 3]]) -> Mat3 {
    let mut h = [[0.0; 3]; 3];
    for (p, q) in a.iter().zip(b) {
        for r in 0..3 {
            for c in 0..3 {
                h[r][c] += p[r] * q[c];
            }
        }
    }
    h
}

/// Points that span less than a plane (all on a line or a single point).
fn is_collinear(x: &[[f64; 3]]) -> bool {
    let (_, c) = centred(x);
    let s = svd3(cross_cov(&c, &c)).1;
    s[0] == 0.0 || s[1] <= 1e-12 * s[0]
}

/// Similarity-aligns `pred` onto `gt`; `None` if the frame is degenerate.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Option<Vec<[f64; 3]>> {
    if is_collinear(pred) || is_collinear(gt) {
        return None;
    }
    let (_, p0) = centred(pred);
    let (mu_g, g0) = centred(gt);
    let norm_p: f64 = p0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    // maximise tr(R·H) over proper rotations, H = Σ p gᵀ
    let h = cross_cov(&p0, &g0);
    let (u, mut s, mut v) = svd3(h);
    let r0 = mat_mul_t(&v, &u);
    if det3(&r0) < 0.0 {
        for row in v.iter_mut() {
            row[2] = -row[2];
        }
        s[2] = -s[2];
    }
    // R maps pred into gt's frame: R = V·Uᵀ
    let r = mat_mul_t(&v, &u);
    let scale = (s[0] + s[1] + s[2]) / (norm_p * norm_p);
    Some(
        p0.iter()
            .map(|p| {
                let rp = mat_vec(&r, *p);
                [
                    scale * rp[0] + mu_g[0],
                    scale * rp[1] + mu_g[1],
                    scale * rp[2] + mu_g[2],
                ]
            })
            .collect(),
    )
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// `a · bᵀ`
fn mat_mul_t(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[c][k]).sum();
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-300).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

const JACOBI_SWEEPS: usize = 30;
const JACOBI_TOL: f64 = 1e-12;

/// One-sided Jacobi SVD of a 3×3 matrix: `a = U·diag(s)·Vᵀ` with
/// `s` descending and non-negative, `U` and `V` orthogonal.
pub fn svd3(a: Mat3) -> (Mat3, [f64; 3], Mat3) {
    // work on columns of `w`, accumulating the right rotations in `v`
    let mut w = a;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for row in &w {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for row in m.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..3)
        .map(|c| (0..3).map(|r| w[r][c] * w[r][c]).sum::<f64>().sqrt())
        .collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let mut s = [0.0; 3];
    let mut u_cols: Vec<Option<[f64; 3]>> = Vec::with_capacity(3);
    let mut vv = [[0.0; 3]; 3];
    for (k, &c) in order.iter().enumerate() {
        s[k] = norms[c];
        for r in 0..3 {
            vv[r][k] = v[r][c];
        }
        let col = [w[0][c], w[1][c], w[2][c]];
        u_cols.push(if s[k] > 1e-300 && s[k] > 1e-15 * s[0] {
            normalize(col)
        } else {
            None
        });
    }
    // complete U where singular values vanish
    let u0 = u_cols[0].unwrap_or([1.0, 0.0, 0.0]);
    let u1 = u_cols[1].unwrap_or_else(|| {
        let trial = if u0[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        normalize(cross(u0, trial)).expect("non-parallel trial vector")
    });
    let u2 = match u_cols[2] {
        Some(c) => c,
        None => cross(u0, u1),
    };
    let mut u = [[0.0; 3]; 3];
    for r in 0..3 {
        u[r] = [u0[r], u1[r], u2[r]];
    }
    (u, s, vv)
}

/// Metrics for one action (or the aggregate row).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionMetrics {
    pub action: String,
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub mpjve_mm: f64,
    pub skipped_frames: usize,
}

/// Per-action and averaged metrics, as in the usual benchmark tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub actions: Vec<ActionMetrics>,
    /// Unweighted mean over actions.
    pub average: ActionMetrics,
    pub flip: bool,
}

/// One evaluated sequence.
pub struct EvalSequence<'a, T: Scalar> {
    pub action: &'a str,
    pub pred: &'a Tensor<T>,
    pub gt: &'a Tensor<T>,
}

impl EvalReport {
    /// Frame-weighted per-action metrics; the average row is the plain mean
    /// of the action rows.
    pub fn build<T: Scalar>(sequences: &[EvalSequence<'_, T>], flip: bool) -> Result<Self> {
        #[derive(Default)]
        struct Acc {
            frames: usize,
            mpjpe: f64,
            pm_frames: usize,
            pm: f64,
            vel_frames: usize,
            vel: f64,
            skipped: usize,
        }
        let mut by_action: BTreeMap<&str, Acc> = BTreeMap::new();
        for s in sequences {
            let t = s.gt.shape().first().copied().unwrap_or(0);
            let a = by_action.entry(s.action).or_default();
            a.frames += t;
            a.mpjpe += metric_mpjpe(s.pred, s.gt)? * t as f64;
            match metric_p_mpjpe(s.pred, s.gt) {
                Ok(p) => {
                    let used = t - p.skipped_frames;
                    a.pm += p.value * used as f64;
                    a.pm_frames += used;
                    a.skipped += p.skipped_frames;
                }
                Err(PoseError::Alignment(_)) => a.skipped += t,
                Err(e) => return Err(e),
            }
            if t >= 2 {
                a.vel += metric_mpjve(s.pred, s.gt)? * (t - 1) as f64;
                a.vel_frames += t - 1;
            }
        }
        if by_action.is_empty() {
            return Err(PoseError::DegenerateInput("no sequences to evaluate".into()));
        }
        let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
        let actions: Vec<ActionMetrics> = by_action
            .into_iter()
            .map(|(name, a)| ActionMetrics {
                action: name.to_string(),
                frames: a.frames,
                mpjpe_mm: ratio(a.mpjpe, a.frames),
                p_mpjpe_mm: ratio(a.pm, a.pm_frames),
                mpjve_mm: ratio(a.vel, a.vel_frames),
                skipped_frames: a.skipped,
            })
            .collect();
        let n = actions.len() as f64;
        let average = ActionMetrics {
            action: "Avg".into(),
            frames: actions.iter().map(|a| a.frames).sum(),
            mpjpe_mm: actions.iter().map(|a| a.mpjpe_mm).sum::<f64>() / n,
            p_mpjpe_mm: actions.iter().map(|a| a.p_mpjpe_mm).sum::<f64>() / n,
            mpjve_mm: actions.iter().map(|a| a.mpjve_mm).sum::<f64>() / n,
            skipped_frames: actions.iter().map(|a| a.skipped_frames).sum(),
        };
        Ok(Self { actions, average, flip })
    }

    /// Metrics as rows and actions as columns, ending with `Avg`.
    pub fn to_table(&self, delimiter: char) -> String {
        self.to_table_for(delimiter, Protocol::All)
    }

    /// Like [`to_table`](Self::to_table) restricted to the rows of
    /// `protocol`; MPJVE is reported with every protocol.
    pub fn to_table_for(&self, delimiter: char, protocol: Protocol) -> String {
        let mut out = String::new();
        let cols: Vec<&ActionMetrics> = self.actions.iter().chain([&self.average]).collect();
        out.push_str("metric");
        for c in &cols {
            let _ = write!(out, "{delimiter}{}", c.action);
        }
        out.push('\n');
        let rows: [(&str, bool, fn(&ActionMetrics) -> f64); 3] = [
            ("MPJPE", protocol != Protocol::P2, |a| a.mpjpe_mm),
            ("P-MPJPE", protocol != Protocol::P1, |a| a.p_mpjpe_mm),
            ("MPJVE", true, |a| a.mpjve_mm),
        ];
        for (name, _, get) in rows.into_iter().filter(|r| r.1) {
            out.push_str(name);
            for c in &cols {
                let _ = write!(out, "{delimiter}{:.2}", get(c));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluation protocol selection for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Protocol {
    /// MPJPE after root alignment.
    P1,
    /// MPJPE after similarity alignment.
    P2,
    #[default]
    All,
}

impl std::str::FromStr for Protocol {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Protocol::P1),
            "p2" => Ok(Protocol::P2),
            "all" => Ok(Protocol::All),
            other => Err(PoseError::Config(format!("unknown protocol `{other}` (p1, p2, all)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, t: usize, j: usize) -> Tensor<f64> {
        Tensor::new(&[t, j, 3], (0..t * j * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        // unit quaternion
        let mut q = [0.0f64; 4];
        loop {
            for v in &mut q {
                *v = rng.gen_range(-1.0..1.0);
            }
            let n: f64 = q.iter().map(|v| v * v).sum::<f64>();
            if n > 1e-3 && n <= 1.0 {
                let n = n.sqrt();
                for v in &mut q {
                    *v /= n;
                }
                break;
            }
        }
        let [w, x, y, z] = q;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    fn transform(x: &Tensor<f64>, r: &Mat3, s: f64, t: [f64; 3]) -> Tensor<f64> {
        let d = x
            .data()
            .chunks(3)
            .flat_map(|p| {
                let q = mat_vec(r, [p[0], p[1], p[2]]);
                [s * q[0] + t[0], s * q[1] + t[1], s * q[2] + t[2]]
            })
            .collect();
        Tensor::new(x.shape(), d).unwrap()
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut a = [[0.0; 3]; 3];
            for row in &mut a {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
            let (u, s, v) = svd3(a);
            assert!(s[0] >= s[1] && s[1] >= s[2] && s[2] >= 0.0);
            for r in 0..3 {
                for c in 0..3 {
                    let rec: f64 = (0..3).map(|k| u[r][k] * s[k] * v[c][k]).sum();
                    assert!((rec - a[r][c]).abs() < 1e-10);
                }
            }
        }
        // rank one
        let (_, s, _) = svd3([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0]]);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
    }

    #[test]
    fn mpjpe_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng, 4, 5);
        let b = random_pose(&mut rng, 4, 5);
        assert_eq!(metric_mpjpe(&a, &a).unwrap(), 0.0);
        assert!((metric_mpjpe(&a, &b).unwrap() - metric_mpjpe(&b, &a).unwrap()).abs() < 1e-15);
        assert!(metric_mpjpe(&a, &random_pose(&mut rng, 3, 5)).is_err());
    }

    #[test]
    fn p_mpjpe_removes_similarity_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut rng, 3, 17);
        let r = random_rotation(&mut rng);
        let moved = transform(&gt, &r, 1.0, [0.3, -2.0, 5.0]);
        assert!(metric_p_mpjpe(&moved, &gt).unwrap().value < 1e-9);
        let tripled = transform(&gt, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 3.0, [0.0; 3]);
        assert!(metric_p_mpjpe(&tripled, &gt).unwrap().value < 1e-9);
    }

    /// Sum of squared residuals after the best scale and translation for a
    /// fixed rotation.
    fn residual_for_rotation(pred: &[[f64; 3]], gt: &[[f64; 3]], r: &Mat3) -> f64 {
        let (_, p0) = centred(pred);
        let (_, g0) = centred(gt);
        let rp: Vec<[f64; 3]> = p0.iter().map(|p| mat_vec(r, *p)).collect();
        let num: f64 = rp
            .iter()
            .zip(&g0)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum();
        let den: f64 = rp.iter().flatten().map(|v| v * v).sum();
        let s = (num / den).max(0.0);
        rp.iter()
            .zip(&g0)
            .map(|(a, b)| (0..3).map(|k| (s * a[k] - b[k]).powi(2)).sum::<f64>())
            .sum()
    }

    fn euler(a: f64, b: f64, c: f64) -> Mat3 {
        let rz = |t: f64| [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
        let ry = |t: f64| [[t.cos(), 0.0, t.sin()], [0.0, 1.0, 0.0], [-t.sin(), 0.0, t.cos()]];
        let mul = |x: Mat3, y: Mat3| {
            let mut o = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    o[r][c] = (0..3).map(|k| x[r][k] * y[k][c]).sum();
                }
            }
            o
        };
        mul(mul(rz(a), ry(b)), rz(c))
    }

    #[test]
    fn reflection_is_not_absorbed() {
        // four non-coplanar joints; three points could be mirrored by a rotation
        let gt = [[0.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.1, 1.3, 0.2], [0.3, 0.1, 0.9]];
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let aligned = procrustes_align(&pred, &gt).unwrap();
        let ours: f64 = aligned
            .iter()
            .zip(&gt)
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
            .sum();
        let mut best = f64::INFINITY;
        let steps = 72;
        for i in 0..steps {
            for k in 0..=steps / 2 {
                for l in 0..steps {
                    let tau = std::f64::consts::TAU;
                    let r = euler(
                        tau * i as f64 / steps as f64,
                        tau * k as f64 / steps as f64,
                        tau * l as f64 / steps as f64,
                    );
                    best = best.min(residual_for_rotation(&pred, &gt, &r));
                }
            }
        }
        assert!(best > 1e-3, "grid optimum {best}");
        assert!(ours <= best + 1e-9, "{ours} vs {best}");
        assert!(ours > 0.5 * best);
        let p = Tensor::new(&[1, 4, 3], pred.iter().flatten().copied().collect()).unwrap();
        let g = Tensor::new(&[1, 4, 3], gt.iter().flatten().copied().collect()).unwrap();
        assert!(metric_p_mpjpe(&p, &g).unwrap().value > 0.0);
    }

    #[test]
    fn collinear_frames_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gt = random_pose(&mut rng, 2, 5);
        for k in 0..5 {
            let v = k as f64;
            gt.data_mut()[k * 3..k * 3 + 3].copy_from_slice(&[v, 2.0 * v, -v]);
        }
        let pred = random_pose(&mut rng, 2, 5);
        let r = metric_p_mpjpe(&pred, &gt).unwrap();
        assert_eq!(r.skipped_frames, 1);
        let single = Tensor::new(&[1, 5, 3], gt.data()[..15].to_vec()).unwrap();
        assert!(matches!(metric_p_mpjpe(&single, &single), Err(PoseError::Alignment(_))));
    }

    #[test]
    fn mpjve_metric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_pose(&mut rng, 5, 4);
        let shifted = transform(
            &gt,
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            1.0,
            [1.0, 2.0, 3.0],
        );
        assert!(metric_mpjve(&shifted, &gt).unwrap() < 1e-12);
        assert!(metric_mpjve(&Tensor::<f64>::zeros(&[1, 4, 3]), &Tensor::zeros(&[1, 4, 3])).is_err());
    }

    #[test]
    fn report_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_pose(&mut rng, 4, 17);
        let b = random_pose(&mut rng, 4, 17);
        let c = random_pose(&mut rng, 6, 17);
        let seqs = [
            EvalSequence {
                action: "Walk",
                pred: &a,
                gt: &b,
            },
            EvalSequence {
                action: "Eat",
                pred: &c,
                gt: &c,
            },
        ];
        let rep = EvalReport::build(&seqs, true).unwrap();
        assert_eq!(rep.actions.len(), 2);
        let eat = rep.actions.iter().find(|x| x.action == "Eat").unwrap();
        assert_eq!((eat.mpjpe_mm, eat.mpjve_mm), (0.0, 0.0));
        assert!(eat.p_mpjpe_mm < 1e-9);
        for row in rep.actions.iter().chain([&rep.average]) {
            assert!(row.p_mpjpe_mm <= row.mpjpe_mm + 1e-9);
        }
        let table = rep.to_table(',');
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "metric,Eat,Walk,Avg");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("MPJPE,0.00,"));
        let p2 = rep.to_table_for(';', "P2".parse().unwrap());
        assert_eq!(
            p2.lines().map(|l| l.split(';').next().unwrap()).collect::<Vec<_>>(),
            ["metric", "P-MPJPE", "MPJVE"]
        );
        assert!("p3".parse::<Protocol>().is_err());
    }

    proptest! {
        #[test]
        fn p_mpjpe_invariances(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_pose(&mut rng, 2, 17);
            let pred = random_pose(&mut rng, 2, 17);
            let base = metric_p_mpjpe(&pred, &gt).unwrap().value;
            let r = random_rotation(&mut rng);
            let s = rng.gen_range(0.2..5.0);
            let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let moved = transform(&pred, &r, s, t);
            prop_assert!((metric_p_mpjpe(&moved, &gt).unwrap().value - base).abs() < 1e-9);
            // common rigid motion of both
            let both = metric_p_mpjpe(&transform(&pred, &r, 1.0, t), &transform(&gt, &r, 1.0, t)).unwrap().value;
            prop_assert!((both - base).abs() < 1e-9);
            // alignment can only help on root-aligned data
            prop_assert!(base <= metric_mpjpe(&pred, &gt).unwrap() + 1e-9);
        }
    }
}
