//! Minibatch training with decoupled weight decay and per-epoch
//! exponential learning-rate decay.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_clips, shuffled_indices, Clip, SequenceRecord, SyntheticConfig};
use crate::error::{PoseError, Result};
use crate::losses::{total_loss, LossValues, LossWeights};
use crate::metrics::metric_mpjpe;
use crate::model::{flip_horizontal, save_checkpoint, ModelConfig, ModelParams, PoseMamba};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::scan_orders::Skeleton;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Learning rate multiplier applied after every epoch.
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { decay_factor: 0.99 }
    }
}

/// Where training sequences come from: a dataset file or the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    pub skeleton: Option<PathBuf>,
    /// Window stride; defaults to the clip length.
    pub clip_stride: Option<usize>,
    /// Share of sequences (last by id) held out for validation.
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub checkpoint_dir: Option<PathBuf>,
    /// Randomly mirror half of the training clips.
    pub flip_augment: bool,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Emit a step log line every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::small(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            epochs: 120,
            batch_size: 4,
            seed: 0,
            data: DataConfig {
                validation_fraction: 0.1,
                ..Default::default()
            },
            checkpoint_dir: None,
            flip_augment: true,
            clip_grad_norm: None,
            max_steps: None,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(PoseError::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(PoseError::Config("weight_decay must be ≥ 0 and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&o.betas.0) || !(0.0..1.0).contains(&o.betas.1) {
            return Err(PoseError::Config("betas must lie in [0, 1)".into()));
        }
        let d = self.schedule.decay_factor;
        if !(d > 0.0 && d <= 1.0) {
            return Err(PoseError::Config(format!("decay_factor must be in (0, 1], got {d}")));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(PoseError::Config("batch_size and log_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(PoseError::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(PoseError::Config("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PoseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sorts by id and holds out the last `fraction` of sequences.
pub fn split_validation(records: &[SequenceRecord], fraction: f64) -> (Vec<SequenceRecord>, Vec<SequenceRecord>) {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n_val = (sorted.len() as f64 * fraction).floor() as usize;
    let val = sorted.split_off(sorted.len() - n_val);
    (sorted, val)
}

/// AdamW with bias correction; weight decay skips one-dimensional tensors
/// (biases and layer-norm affines).
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Updates every tensor of `params` in visiting order.
    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<Tensor<T>>, grads: &[Vec<f64>], lr: f64) {
        self.begin(grads);
        let mut i = 0;
        params.visit_mut(&mut |_, p| {
            self.update(i, p, &grads[i], lr);
            i += 1;
        });
    }

    /// Updates a plain list of tensors.
    pub fn step_tensors<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<f64>], lr: f64) {
        self.begin(grads);
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, &grads[i], lr);
        }
    }

    fn begin(&mut self, grads: &[Vec<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
    }

    fn update<T: Scalar>(&mut self, i: usize, p: &mut Tensor<T>, g: &[f64], lr: f64) {
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = if p.ndim() >= 2 { self.cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps);
            let x = w.as_f64();
            *w = T::of(x - lr * (update + decay * x));
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: LossValues,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        lr: f64,
        train_loss: f64,
        val_mpjpe_mm: Option<f64>,
        wall_s: f64,
    },
    Checkpoint {
        path: PathBuf,
    },
}

impl fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainEvent::Step {
                step,
                epoch,
                lr,
                loss,
                grad_norm,
            } => write!(
                f,
                "event=step step={step} epoch={epoch} lr={lr:.6e} loss={:.6} mpjpe={:.6} mpjve={:.6} tc={:.6} reproj={:.6} grad_norm={grad_norm:.4e}",
                loss.total, loss.mpjpe, loss.mpjve, loss.tc, loss.reproj
            ),
            TrainEvent::Epoch {
                epoch,
                steps,
                lr,
                train_loss,
                val_mpjpe_mm,
                wall_s,
            } => {
                write!(f, "event=epoch epoch={epoch} steps={steps} lr={lr:.6e} train_loss={train_loss:.6}")?;
                if let Some(v) = val_mpjpe_mm {
                    write!(f, " val_mpjpe_mm={v:.4}")?;
                }
                write!(f, " wall_s={wall_s:.3}")
            }
            TrainEvent::Checkpoint { path } => write!(f, "event=checkpoint path={}", path.display()),
        }
    }
}

/// Result of [`train`].
pub struct TrainOutcome<T: Scalar> {
    pub model: PoseMamba<T>,
    /// Total loss after every optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub initial_train_mpjpe_mm: f64,
    pub final_train_mpjpe_mm: f64,
    pub final_val_mpjpe_mm: Option<f64>,
}

/// Mean root-aligned MPJPE in millimetres over the valid frames of `clips`.
pub fn clips_mpjpe<T: Scalar>(model: &PoseMamba<T>, clips: &[Clip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(PoseError::DegenerateInput("no clips to evaluate".into()));
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    let j = model.config().joints;
    for c in clips {
        let pred = model.forward(&c.keypoints_2d.cast::<T>())?.cast::<f64>();
        let gt = c
            .poses_3d
            .as_ref()
            .ok_or_else(|| PoseError::Config("clip has no 3D ground truth".into()))?;
        let n = c.mask.valid_frames();
        let cut = |x: &Tensor<f64>| Tensor::new(&[n, j, 3], x.data()[..n * j * 3].to_vec());
        total += metric_mpjpe(&cut(&pred)?, &cut(gt)?)? * n as f64;
        frames += n;
    }
    Ok(total / frames as f64)
}

/// Trains a freshly initialised model on `records`; the last share of the
/// sequences by id is used for validation. Every log line is passed to
/// `log`.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    records: &[SequenceRecord],
    skeleton: &Skeleton,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = PoseMamba::<T>::init(cfg.model.clone(), skeleton.clone(), cfg.seed)?;
    train_model(cfg, model, records, log)
}

/// Like [`train`] but starting from `model`.
pub fn train_model<T: Scalar>(
    cfg: &TrainConfig,
    mut model: PoseMamba<T>,
    records: &[SequenceRecord],
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mc = model.config().clone();
    if let Some(r) = records.iter().find(|r| r.joints() != mc.joints) {
        return Err(PoseError::Config(format!(
            "sequence {} has {} joints, model expects {}",
            r.id,
            r.joints(),
            mc.joints
        )));
    }
    if let Some(r) = records.iter().find(|r| r.poses_3d.is_none()) {
        return Err(PoseError::Config(format!("sequence {} has no 3D poses", r.id)));
    }
    let mirror = if cfg.flip_augment {
        if model.skeleton().left_right_pairs.is_empty() {
            return Err(PoseError::Config("flip augmentation needs left/right pairs".into()));
        }
        Some(model.skeleton().mirror_map()?)
    } else {
        None
    };
    let (train_recs, val_recs) = split_validation(records, cfg.data.validation_fraction);
    let stride = cfg.data.clip_stride.unwrap_or(mc.frames);
    let train_clips = make_clips(&train_recs, mc.frames, stride)?;
    let val_clips = make_clips(&val_recs, mc.frames, stride)?;
    if train_clips.is_empty() {
        return Err(PoseError::Config("no training clips".into()));
    }

    let initial = clips_mpjpe(&model, &train_clips)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let mut losses = Vec::new();
    let mut step = 0usize;
    let start = Instant::now();
    let inv_scale = 1.0 / mc.output_scale_mm;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr * cfg.schedule.decay_factor.powi(epoch as i32);
        let order = shuffled_indices(train_clips.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut g = Graph::<T>::new();
            let p = model.bind(&mut g, true);
            let mut parts = Vec::with_capacity(batch.len());
            let mut sum = LossValues::default();
            for &ci in batch {
                let c = &train_clips[ci];
                let mut x = c.keypoints_2d.clone();
                let mut y = c.poses_3d.clone().expect("checked above");
                if let Some(mirror) = &mirror {
                    if rng.gen_bool(0.5) {
                        x = flip_horizontal(&x, mirror)?;
                        y = flip_horizontal(&y, mirror)?;
                    }
                }
                let tokens = mc.frames * mc.joints;
                let out = model.forward_graph(&mut g, &p, &x.cast::<T>())?;
                let pred = g.scale(out, T::of(inv_scale))?;
                let gt_m = Tensor::new(&[tokens, 3], y.data().iter().map(|v| T::of(v * inv_scale)).collect())?;
                let gt = g.constant(gt_m);
                let xin = g.constant(x.cast::<T>().reshape(&[tokens, 2])?);
                let terms = total_loss(&mut g, pred, gt, xin, &c.mask, &cfg.loss)?;
                let v = terms.values(&g);
                for (acc, val) in [
                    (&mut sum.total, v.total),
                    (&mut sum.mpjpe, v.mpjpe),
                    (&mut sum.mpjve, v.mpjve),
                    (&mut sum.tc, v.tc),
                    (&mut sum.reproj, v.reproj),
                ] {
                    *acc += val / batch.len() as f64;
                }
                parts.push(terms.total);
            }
            let loss = mean_of(&mut g, &parts)?;
            let loss_value = g.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(PoseError::NonFinite(format!("training loss at step {step}")));
            }
            let grads = g.backward(loss)?;
            let vars: Vec<Var> = p.flatten().into_iter().copied().collect();
            let mut flat: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .map(|d| d.iter().map(|x| x.as_f64()).collect())
                        .unwrap_or_else(|| vec![0.0; g.value(v).len()])
                })
                .collect();
            let norm = flat.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(PoseError::NonFinite(format!("gradient at step {step}")));
            }
            if let Some(max) = cfg.clip_grad_norm {
                if norm > max {
                    let s = max / norm;
                    flat.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            opt.step(&mut model.params, &flat, lr);

            step += 1;
            epoch_steps += 1;
            epoch_loss += loss_value;
            losses.push(loss_value);
            if step % cfg.log_every == 0 {
                log(&TrainEvent::Step {
                    step,
                    epoch,
                    lr,
                    loss: sum,
                    grad_norm: norm,
                });
            }
        }
        let val = if val_clips.is_empty() {
            None
        } else {
            Some(clips_mpjpe(&model, &val_clips)?)
        };
        log(&TrainEvent::Epoch {
            epoch,
            steps: epoch_steps,
            lr,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_mpjpe_mm: val,
            wall_s: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("last.pmck");
            save_checkpoint(&model, &path)?;
            log(&TrainEvent::Checkpoint { path });
        }
    }
    let final_train = clips_mpjpe(&model, &train_clips)?;
    let final_val = if val_clips.is_empty() {
        None
    } else {
        Some(clips_mpjpe(&model, &val_clips)?)
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("final.pmck");
        save_checkpoint(&model, &path)?;
        log(&TrainEvent::Checkpoint { path });
    }
    Ok(TrainOutcome {
        model,
        losses,
        steps: step,
        initial_train_mpjpe_mm: initial,
        final_train_mpjpe_mm: final_train,
        final_val_mpjpe_mm: final_val,
    })
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let s = if parts.len() == 1 { parts[0] } else { g.add_all(parts)? };
    g.scale(s, T::of(1.0 / parts.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::load_checkpoint;
    use crate::scan_orders::BranchSet;
    use crate::ssm::ScanMode;

    fn small_cfg() -> TrainConfig {
        let mut model = ModelConfig::small();
        model.depth = 1;
        model.d_model = 8;
        model.state_size = 4;
        model.frames = 5;
        model.branch_set = BranchSet::Bidirectional;
        model.scan_mode = ScanMode::Sequential;
        TrainConfig {
            model,
            epochs: 2,
            batch_size: 2,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..Default::default()
            },
            log_every: 1,
            ..Default::default()
        }
    }

    fn data(n: usize, frames: usize) -> Vec<SequenceRecord> {
        synth_generate(&SyntheticConfig {
            sequence_count: n,
            frames,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn validation_split_takes_the_last_ids() {
        let recs = data(20, 2);
        let mut shuffled = recs.clone();
        shuffled.reverse();
        let (tr, va) = split_validation(&shuffled, 0.1);
        assert_eq!(tr.len(), 18);
        assert_eq!(
            va.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["synth_00018", "synth_00019"]
        );
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut w = Tensor::<f64>::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let mut b = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut opt = AdamW::new(OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step_tensors(&mut [&mut w, &mut b], &[vec![3.0, -0.2], vec![3.0, -0.2]], 0.1);
        // bias-corrected first step is sign(g)·lr, decay only on the matrix
        let expect_w = [1.0 - 0.1 * (1.0 + 0.5), -1.0 - 0.1 * (-1.0 - 0.5)];
        for (a, e) in w.data().iter().zip(expect_w) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
        assert!((b.data()[0] - 0.9).abs() < 1e-6 && (b.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn seeded_training_is_deterministic_and_learns() {
        let cfg = small_cfg();
        let recs = data(10, 5);
        let skel = Skeleton::h36m();
        let a = train::<f64>(&cfg, &recs, &skel, &mut |_| {}).unwrap();
        let b = train::<f64>(&cfg, &recs, &skel, &mut |_| {}).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.steps, 10);
        assert!(a.losses.iter().all(|l| l.is_finite()));
        assert!(a.final_train_mpjpe_mm < a.initial_train_mpjpe_mm);
        assert!(a.final_val_mpjpe_mm.is_some());
    }

    #[test]
    fn logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        cfg.max_steps = Some(3);
        let mut lines = Vec::new();
        let out = train::<f32>(&cfg, &data(6, 5), &Skeleton::h36m(), &mut |e: &TrainEvent| {
            lines.push(e.to_string())
        })
        .unwrap();
        assert_eq!(out.steps, 3);
        assert!(lines[0].starts_with("event=step step=1 "));
        assert!(lines.iter().any(|l| l.starts_with("event=epoch ")));
        for l in &lines {
            assert!(l.split(' ').all(|kv| kv.contains('=')), "{l}");
        }
        let back = load_checkpoint::<f32>(&dir.path().join("final.pmck")).unwrap();
        assert_eq!(back.params, out.model.params);
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.optimizer.lr, 2e-4);
        assert_eq!((cfg.epochs, cfg.batch_size), (120, 4));
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.schedule.decay_factor = 1.5;
        assert!(matches!(bad.validate(), Err(PoseError::Config(_))));
        bad = cfg;
        bad.optimizer.lr = 0.0;
        assert!(bad.validate().is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn joint_mismatch_is_a_config_error() {
        let mut cfg = small_cfg();
        cfg.model.joints = 16;
        let err = train::<f64>(&cfg, &data(4, 5), &Skeleton::h36m(), &mut |_| {});
        assert!(matches!(err, Err(PoseError::Config(_))));
    }
}
