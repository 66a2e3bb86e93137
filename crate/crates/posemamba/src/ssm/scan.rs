//! Discretization and the two scan evaluators for `h ← Ā h + B̄x`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::numerics::Scalar;

/// How the linear recurrence is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

impl FromStr for ScanMode {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" | "seq" => Ok(ScanMode::Sequential),
            "parallel" | "par" => Ok(ScanMode::Parallel),
            other => Err(PoseError::Parameter(format!("unknown scan mode `{other}`"))),
        }
    }
}

/// One element of the scan monoid: the affine map `h ↦ a·h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPair<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> ScanPair<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// `self ∘ earlier`: apply `earlier` first, then `self`.
    pub fn compose(self, earlier: Self) -> Self {
        Self {
            a: self.a * earlier.a,
            b: self.a * earlier.b + self.b,
        }
    }

    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

/// Per-step decay `Ā` and driven input `B̄x`, laid out `[len][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedStep<T> {
    pub len: usize,
    pub width: usize,
    pub a_bar: Vec<T>,
    pub bx: Vec<T>,
}

impl<T: Scalar> DiscretizedStep<T> {
    pub fn new(len: usize, width: usize, a_bar: Vec<T>, bx: Vec<T>) -> Result<Self> {
        if len == 0 || width == 0 || a_bar.len() != len * width || bx.len() != len * width {
            return Err(PoseError::Dimension(format!(
                "discretized step expects {len}×{width} buffers, got {} and {}",
                a_bar.len(),
                bx.len()
            )));
        }
        Ok(Self { len, width, a_bar, bx })
    }
}

/// All states `h_1..h_L` (row `a` holds the state after consuming step `a`)
/// plus the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanStates<T> {
    pub states: Vec<T>,
    pub last: Vec<T>,
}

/// Zero-order-hold discretization with the first-order input term:
/// `Ā = exp(A·Δ)`, `B̄ = B·Δ`.
///
/// Shapes: `a` is `[d×n]` (diagonal A per channel and state), `delta` and
/// `x` are `[len×d]`, `b` is `[len×n]`. The result has width `d·n` with
/// lane `c·n + s`.
pub fn discretize_zoh<T: Scalar>(
    a: &[T],
    delta: &[T],
    b: &[T],
    x: &[T],
    d: usize,
    n: usize,
) -> Result<DiscretizedStep<T>> {
    if d == 0 || n == 0 || a.len() != d * n || delta.len() % d != 0 {
        return Err(PoseError::Dimension(format!(
            "discretize_zoh: A has {} entries for d={d}, n={n}",
            a.len()
        )));
    }
    let len = delta.len() / d;
    if len == 0 || x.len() != len * d || b.len() != len * n {
        return Err(PoseError::Dimension(format!(
            "discretize_zoh: inconsistent lengths delta={}, x={}, B={}",
            delta.len(),
            x.len(),
            b.len()
        )));
    }
    if let Some(pos) = delta.iter().position(|&v| !(v > T::zero())) {
        return Err(PoseError::Parameter(format!(
            "step size must be positive, delta[{pos}] = {:?}",
            delta[pos]
        )));
    }
    let width = d * n;
    let mut a_bar = vec![T::zero(); len * width];
    let mut bx = vec![T::zero(); len * width];
    for t in 0..len {
        for c in 0..d {
            let dt = delta[t * d + c];
            let xv = x[t * d + c];
            for s in 0..n {
                let lane = t * width + c * n + s;
                a_bar[lane] = (a[c * n + s] * dt).exp();
                bx[lane] = b[t * n + s] * dt * xv;
            }
        }
    }
    DiscretizedStep::new(len, width, a_bar, bx)
}

fn check_h0<T>(steps: &DiscretizedStep<T>, h0: &[T]) -> Result<()> {
    if h0.len() != steps.width {
        return Err(PoseError::Dimension(format!(
            "initial state has {} lanes, steps have {}",
            h0.len(),
            steps.width
        )));
    }
    Ok(())
}

/// Left-to-right recurrence `h_{a+1} = Ā_a h_a + B̄_a x_a`.
pub fn scan_sequential<T: Scalar>(steps: &DiscretizedStep<T>, h0: &[T]) -> Result<ScanStates<T>> {
    check_h0(steps, h0)?;
    let w = steps.width;
    let mut states = vec![T::zero(); steps.len * w];
    let mut h = h0.to_vec();
    for t in 0..steps.len {
        let row = t * w..(t + 1) * w;
        let (a, b) = (&steps.a_bar[row.clone()], &steps.bx[row.clone()]);
        for i in 0..w {
            h[i] = a[i] * h[i] + b[i];
        }
        states[row].copy_from_slice(&h);
    }
    Ok(ScanStates { states, last: h })
}

/// Same states via an inclusive Brent–Kung prefix composition of
/// [`ScanPair`]s (up-sweep then down-sweep, `O(L)` combines). Lengths that
/// are not a power of two are padded with identity pairs.
pub fn scan_parallel<T: Scalar>(steps: &DiscretizedStep<T>, h0: &[T]) -> Result<ScanStates<T>> {
    check_h0(steps, h0)?;
    let (len, w) = (steps.len, steps.width);
    let padded = len.next_power_of_two();
    let mut pa = Vec::with_capacity(padded * w);
    pa.extend_from_slice(&steps.a_bar);
    pa.resize(padded * w, T::one());
    let mut pb = Vec::with_capacity(padded * w);
    pb.extend_from_slice(&steps.bx);
    pb.resize(padded * w, T::zero());

    prefix_compose(&mut pa, &mut pb, padded, w);

    pb.truncate(len * w);
    if h0.iter().any(|&v| v != T::zero()) {
        for t in 0..len {
            for i in 0..w {
                let lane = t * w + i;
                pb[lane] += pa[lane] * h0[i];
            }
        }
    }
    let last = pb[(len - 1) * w..].to_vec();
    Ok(ScanStates { states: pb, last })
}

/// In-place inclusive scan; element `i` ends as `e_i ∘ … ∘ e_0`.
fn prefix_compose<T: Scalar>(a: &mut [T], b: &mut [T], count: usize, w: usize) {
    let combine = |a: &mut [T], b: &mut [T], later: usize, earlier: usize| {
        let (a_lo, a_hi) = a.split_at_mut(later * w);
        let (b_lo, b_hi) = b.split_at_mut(later * w);
        let ea = &a_lo[earlier * w..(earlier + 1) * w];
        let eb = &b_lo[earlier * w..(earlier + 1) * w];
        let la = &mut a_hi[..w];
        let lb = &mut b_hi[..w];
        for i in 0..w {
            lb[i] = la[i] * eb[i] + lb[i];
            la[i] = la[i] * ea[i];
        }
    };

    let mut stride = 2;
    while stride <= count {
        let half = stride / 2;
        let mut i = stride - 1;
        while i < count {
            combine(a, b, i, i - half);
            i += stride;
        }
        stride *= 2;
    }
    stride = count / 2;
    while stride >= 2 {
        let half = stride / 2;
        let mut i = stride + half - 1;
        while i < count {
            combine(a, b, i, i - half);
            i += stride;
        }
        stride /= 2;
    }
}

/// Dispatches on `mode`.
pub fn scan<T: Scalar>(steps: &DiscretizedStep<T>, h0: &[T], mode: ScanMode) -> Result<ScanStates<T>> {
    match mode {
        ScanMode::Sequential => scan_sequential(steps, h0),
        ScanMode::Parallel => scan_parallel(steps, h0),
    }
}
