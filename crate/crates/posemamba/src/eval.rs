//! Whole-sequence inference and evaluation.

use crate::data::{make_clips, SequenceRecord};
use crate::error::{PoseError, Result};
use crate::metrics::{EvalReport, EvalSequence};
use crate::model::PoseMamba;
use crate::numerics::{Scalar, Tensor};

/// Predicts `[T×J×3]` millimetres for a record of any length by running the
/// model on consecutive windows and dropping padded frames.
pub fn predict_sequence<T: Scalar>(model: &PoseMamba<T>, r: &SequenceRecord, flip: bool) -> Result<Tensor<f64>> {
    let cfg = model.config();
    if r.joints() != cfg.joints {
        return Err(PoseError::Config(format!(
            "sequence {} has {} joints, model expects {}",
            r.id,
            r.joints(),
            cfg.joints
        )));
    }
    let frames = r.frames();
    let mut out = Vec::with_capacity(frames * cfg.joints * 3);
    for clip in make_clips(std::slice::from_ref(r), cfg.frames, cfg.frames)? {
        let input = clip.keypoints_2d.cast::<T>();
        let pred = if flip {
            model.flip_forward(&input)?
        } else {
            model.forward(&input)?
        };
        let keep = clip.mask.valid_frames() * cfg.joints * 3;
        out.extend(pred.data()[..keep].iter().map(|v| v.as_f64()));
    }
    Tensor::new(&[frames, cfg.joints, 3], out)
}

/// Per-action metrics of `model` on every record with 3D ground truth.
pub fn evaluate<T: Scalar>(model: &PoseMamba<T>, records: &[SequenceRecord], flip: bool) -> Result<EvalReport> {
    let mut preds = Vec::new();
    for r in records.iter().filter(|r| r.poses_3d.is_some()) {
        preds.push((r, predict_sequence(model, r, flip)?));
    }
    if preds.is_empty() {
        return Err(PoseError::Config("no sequence has 3D ground truth".into()));
    }
    let seqs: Vec<EvalSequence<'_, f64>> = preds
        .iter()
        .map(|(r, p)| EvalSequence {
            action: r.action.as_deref().unwrap_or("unknown"),
            pred: p,
            gt: r.poses_3d.as_ref().expect("filtered"),
        })
        .collect();
    EvalReport::build(&seqs, flip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticConfig};
    use crate::model::ModelConfig;
    use crate::scan_orders::Skeleton;
    use crate::ssm::ScanMode;

    fn model(frames: usize) -> PoseMamba<f64> {
        let mut cfg = ModelConfig::small();
        cfg.depth = 1;
        cfg.d_model = 8;
        cfg.state_size = 4;
        cfg.frames = frames;
        cfg.scan_mode = ScanMode::Sequential;
        PoseMamba::init(cfg, Skeleton::h36m(), 1).unwrap()
    }

    #[test]
    fn long_sequences_are_stitched_from_windows() {
        let m = model(4);
        let r = &synth_generate(&SyntheticConfig {
            sequence_count: 1,
            frames: 10,
            ..Default::default()
        })
        .unwrap()[0];
        let p = predict_sequence(&m, r, false).unwrap();
        assert_eq!(p.shape(), &[10, 17, 3]);
        // the second window equals a direct forward on frames 4..8
        let x = Tensor::new(&[4, 17, 2], r.keypoints_2d.data()[4 * 34..8 * 34].to_vec()).unwrap();
        let direct = m.forward(&x).unwrap();
        assert_eq!(&p.data()[4 * 51..8 * 51], direct.data());
    }

    #[test]
    fn report_on_perfect_predictions_is_zero() {
        let recs = synth_generate(&SyntheticConfig {
            sequence_count: 4,
            frames: 5,
            ..Default::default()
        })
        .unwrap();
        let seqs: Vec<EvalSequence<'_, f64>> = recs
            .iter()
            .map(|r| EvalSequence {
                action: r.action.as_deref().unwrap(),
                pred: r.poses_3d.as_ref().unwrap(),
                gt: r.poses_3d.as_ref().unwrap(),
            })
            .collect();
        let rep = EvalReport::build(&seqs, false).unwrap();
        assert_eq!(rep.actions.len(), 4);
        assert_eq!(rep.average.mpjpe_mm, 0.0);
        assert!(rep.average.p_mpjpe_mm < 1e-9);
        assert_eq!(rep.average.mpjve_mm, 0.0);
    }

    #[test]
    fn evaluation_records_the_flip_flag() {
        let m = model(5);
        let recs = synth_generate(&SyntheticConfig {
            sequence_count: 2,
            frames: 5,
            ..Default::default()
        })
        .unwrap();
        let plain = evaluate(&m, &recs, false).unwrap();
        let flipped = evaluate(&m, &recs, true).unwrap();
        assert!(!plain.flip && flipped.flip);
        assert_ne!(plain.average.mpjpe_mm, flipped.average.mpjpe_mm);
        for row in flipped.actions.iter() {
            assert!(row.p_mpjpe_mm <= row.mpjpe_mm + 1e-9);
        }
    }
}
