//! Wall-clock measurements of the scans and of the model forward pass.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{PoseError, Result};
use crate::model::{ModelConfig, PoseMamba};
use crate::numerics::{Scalar, Tensor};
use crate::scan_orders::Skeleton;
use crate::ssm::{scan, scan_parallel, scan_sequential, DiscretizedStep, ScanMode};

/// Largest allowed per-step cost growth between the shortest and longest
/// benchmarked length.
pub const LINEAR_SCALING_LIMIT: f64 = 2.5;

/// Tolerance of the pre-benchmark check that both scans agree.
pub fn scan_agreement_tolerance<T: Scalar>() -> f64 {
    match T::PRECISION {
        crate::numerics::Precision::F64 => 1e-10,
        crate::numerics::Precision::F32 => 1e-4,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanTiming {
    pub len: usize,
    pub mode: ScanMode,
    pub median_s: f64,
    /// Median seconds per step divided by that of the shortest length.
    pub per_step_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanBenchReport {
    pub width: usize,
    pub max_abs_diff: f64,
    pub timings: Vec<ScanTiming>,
}

impl ScanBenchReport {
    /// Per-step cost of the longest length relative to the shortest stays
    /// below [`LINEAR_SCALING_LIMIT`] for every mode.
    pub fn is_linear(&self) -> bool {
        self.timings.iter().all(|t| t.per_step_ratio < LINEAR_SCALING_LIMIT)
    }

    pub fn to_table(&self, delimiter: char) -> String {
        let d = delimiter;
        let mut out = format!("len{d}mode{d}median_s{d}per_step_ratio\n");
        for t in &self.timings {
            let mode = match t.mode {
                ScanMode::Sequential => "sequential",
                ScanMode::Parallel => "parallel",
            };
            let _ = writeln!(out, "{}{d}{mode}{d}{:.6e}{d}{:.3}", t.len, t.median_s, t.per_step_ratio);
        }
        out
    }
}

fn random_steps<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, width: usize) -> DiscretizedStep<T> {
    let a = (0..len * width).map(|_| T::of(rng.gen_range(0.5..1.0))).collect();
    let b = (0..len * width).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    DiscretizedStep::new(len, width, a, b).expect("sizes match")
}

/// Times both scans over `lengths` after checking that they agree.
pub fn bench_scan<T: Scalar>(
    lengths: &[usize],
    width: usize,
    modes: &[ScanMode],
    repeats: usize,
    seed: u64,
) -> Result<ScanBenchReport> {
    if lengths.is_empty() || modes.is_empty() || repeats == 0 || width == 0 {
        return Err(PoseError::Parameter("need lengths, modes, repeats and width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = vec![T::zero(); width];
    let mut max_abs_diff = 0.0f64;
    for &len in lengths {
        let steps = random_steps::<T>(&mut rng, len, width);
        let s = scan_sequential(&steps, &h0)?;
        let p = scan_parallel(&steps, &h0)?;
        for (a, b) in s.states.iter().zip(&p.states) {
            max_abs_diff = max_abs_diff.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    let tol = scan_agreement_tolerance::<T>();
    if max_abs_diff >= tol {
        return Err(PoseError::NonFinite(format!(
            "parallel and sequential scans differ by {max_abs_diff:e} (tolerance {tol:e})"
        )));
    }
    let shortest = *lengths.iter().min().expect("non-empty");
    let mut timings = Vec::new();
    for &mode in modes {
        let mut base = None;
        let mut rows = Vec::new();
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        for len in sorted {
            let steps = random_steps::<T>(&mut rng, len, width);
            let samples = (0..repeats)
                .map(|_| {
                    let t0 = Instant::now();
                    let out = scan(&steps, &h0, mode);
                    let dt = t0.elapsed().as_secs_f64();
                    std::hint::black_box(out).map(|_| dt)
                })
                .collect::<Result<Vec<f64>>>()?;
            let m = median(samples);
            let per_step = m / len as f64;
            if len == shortest {
                base = Some(per_step);
            }
            rows.push((len, m, per_step));
        }
        let base = base.expect("shortest length timed").max(f64::MIN_POSITIVE);
        timings.extend(rows.into_iter().map(|(len, m, per)| ScanTiming {
            len,
            mode,
            median_s: m,
            per_step_ratio: per / base,
        }));
    }
    Ok(ScanBenchReport {
        width,
        max_abs_diff,
        timings,
    })
}

/// Median wall-clock seconds of `repeats` forward passes of a model built
/// from `cfg` with `frames` input frames.
pub fn time_forward<T: Scalar>(cfg: &ModelConfig, skeleton: &Skeleton, frames: usize, repeats: usize) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.frames = frames;
    let model = PoseMamba::<T>::init(cfg.clone(), skeleton.clone(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = frames * cfg.joints * 2;
    let input = Tensor::new(
        &[frames, cfg.joints, 2],
        (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(),
    )?;
    // one untimed warm-up pass
    std::hint::black_box(model.forward(&input)?);
    let samples = (0..repeats.max(1))
        .map(|_| {
            let t0 = Instant::now();
            let out = model.forward(&input);
            let dt = t0.elapsed().as_secs_f64();
            std::hint::black_box(out).map(|_| dt)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_report_covers_every_length_and_mode() {
        let r = bench_scan::<f64>(&[16, 64], 4, &[ScanMode::Sequential, ScanMode::Parallel], 3, 0).unwrap();
        assert_eq!(r.timings.len(), 4);
        assert!(r.max_abs_diff < 1e-10);
        assert!(r
            .timings
            .iter()
            .filter(|t| t.len == 16)
            .all(|t| t.per_step_ratio == 1.0));
        assert_eq!(r.to_table(',').lines().count(), 5);
        assert!(bench_scan::<f64>(&[], 4, &[ScanMode::Sequential], 1, 0).is_err());
    }

    #[test]
    fn forward_timing_is_positive() {
        let mut cfg = ModelConfig::small();
        cfg.depth = 1;
        cfg.d_model = 8;
        let t = time_forward::<f32>(&cfg, &Skeleton::h36m(), 3, 3).unwrap();
        assert!(t > 0.0);
    }
}
