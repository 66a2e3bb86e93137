//! Comparison of the six scan strategies under one training budget.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::SequenceRecord;
use crate::error::{PoseError, Result};
use crate::model::{mac_estimate, parameter_count};
use crate::numerics::Scalar;
use crate::scan_orders::{BranchSet, Skeleton};
use crate::train::{train, TrainConfig, TrainEvent};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: BranchSet,
    pub label: &'static str,
    pub frames: usize,
    pub params: usize,
    pub macs: u64,
    /// Total loss of the last optimizer step.
    pub final_loss: f64,
    /// Validation MPJPE when a validation split exists, training otherwise.
    pub final_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Trains one model per strategy with otherwise identical settings. The
/// SSM parameters are shared across the branches of a block so that every
/// strategy has exactly the same parameter count.
pub fn run_ablation<T: Scalar>(
    cfg: &TrainConfig,
    records: &[SequenceRecord],
    skeleton: &Skeleton,
    log: &mut dyn FnMut(BranchSet, &TrainEvent),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(BranchSet::ALL.len());
    for strategy in BranchSet::ALL {
        let mut c = cfg.clone();
        c.model.branch_set = strategy;
        c.model.share_branch_params = true;
        let out = train::<T>(&c, records, skeleton, &mut |e| log(strategy, e))?;
        let final_loss = *out
            .losses
            .last()
            .ok_or_else(|| PoseError::Config("ablation budget allows no optimizer steps".into()))?;
        if !final_loss.is_finite() {
            return Err(PoseError::NonFinite(format!("final loss of {}", strategy.key())));
        }
        rows.push(AblationRow {
            strategy,
            label: strategy.table_label(),
            frames: c.model.frames,
            params: parameter_count(&c.model),
            macs: mac_estimate(&c.model),
            final_loss,
            final_mpjpe_mm: out.final_val_mpjpe_mm.unwrap_or(out.final_train_mpjpe_mm),
        });
    }
    Ok(AblationTable { rows })
}

impl AblationTable {
    /// One row per strategy: label, T, params (M), MACs (G), final loss and
    /// MPJPE.
    pub fn to_table(&self, delimiter: char) -> String {
        let d = delimiter;
        let mut out = format!("strategy{d}T{d}params{d}MACs{d}final_loss{d}MPJPE\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}{d}{}{d}{:.3} M{d}{:.3} G{d}{:.6}{d}{:.2}",
                r.label,
                r.frames,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                r.final_loss,
                r.final_mpjpe_mm
            );
        }
        out
    }
}
