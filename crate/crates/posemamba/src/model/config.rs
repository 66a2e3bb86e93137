use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::numerics::Precision;
use crate::scan_orders::BranchSet;
use crate::ssm::{ssm_param_count, ScanMode};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked blocks.
    pub depth: usize,
    pub d_model: usize,
    pub frames: usize,
    pub joints: usize,
    #[serde(default = "default_state_size")]
    pub state_size: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_mlp_expansion")]
    pub mlp_expansion: usize,
    #[serde(default)]
    pub branch_set: BranchSet,
    /// One SSM parameter set per block shared by all branches.
    #[serde(default)]
    pub share_branch_params: bool,
    #[serde(default)]
    pub scan_mode: ScanMode,
    #[serde(default)]
    pub precision: Precision,
    /// Fixed factor from head outputs to millimetres; the network itself
    /// works in metres by default.
    #[serde(default = "default_output_scale")]
    pub output_scale_mm: f64,
}

fn default_state_size() -> usize {
    16
}

fn default_conv_kernel() -> usize {
    4
}

fn default_mlp_expansion() -> usize {
    2
}

fn default_output_scale() -> f64 {
    1000.0
}

impl ModelConfig {
    fn preset(depth: usize, d_model: usize) -> Self {
        Self {
            depth,
            d_model,
            frames: 243,
            joints: 17,
            state_size: default_state_size(),
            conv_kernel: default_conv_kernel(),
            mlp_expansion: default_mlp_expansion(),
            branch_set: BranchSet::default(),
            share_branch_params: false,
            scan_mode: ScanMode::default(),
            precision: Precision::default(),
            output_scale_mm: default_output_scale(),
        }
    }

    pub fn small() -> Self {
        Self::preset(20, 64)
    }

    pub fn base() -> Self {
        Self::preset(20, 128)
    }

    pub fn large() -> Self {
        Self::preset(40, 128)
    }

    /// `"S"`, `"B"` or `"L"` (case-insensitive).
    pub fn variant(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "S" => Ok(Self::small()),
            "B" => Ok(Self::base()),
            "L" => Ok(Self::large()),
            other => Err(PoseError::Config(format!("unknown model variant `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("frames", self.frames),
            ("joints", self.joints),
            ("state_size", self.state_size),
            ("conv_kernel", self.conv_kernel),
            ("mlp_expansion", self.mlp_expansion),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(PoseError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.output_scale_mm.is_finite() && self.output_scale_mm > 0.0) {
            return Err(PoseError::Config("output_scale_mm must be positive".into()));
        }
        Ok(())
    }

    /// SSM parameter sets per block.
    pub fn ssm_sets(&self) -> usize {
        if self.share_branch_params {
            1
        } else {
            self.branch_set.branch_count()
        }
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_expansion
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PoseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Trainable scalars in one block.
pub fn block_parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let h = cfg.hidden();
    let layer_norms = 3 * 2 * d;
    let conv = cfg.conv_kernel * d + d;
    let ssm = cfg.ssm_sets() * ssm_param_count(d, cfg.state_size);
    let mlp = d * h + h + h * d + d;
    layer_norms + conv + ssm + mlp
}

/// Trainable scalars in the embedding (input projection, position tables
/// and the two layer norms).
pub fn embedding_parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    2 * d + d + cfg.joints * d + cfg.frames * d + 2 * 2 * d
}

/// Exact number of trainable scalars.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    embedding_parameter_count(cfg) + cfg.depth * block_parameter_count(cfg) + cfg.d_model * 3 + 3
}

/// Multiply-accumulates for one input sequence.
///
/// Counted: every dense projection, the depthwise convolution, the step-size
/// projection, the recurrence (`Ā·h` and `B̄·x` per state lane), the output
/// read-out `C·h` and the skip term. Layer norms, activations and the
/// exponentials of the discretization are not counted.
pub fn mac_estimate(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let n = cfg.state_size as u64;
    let k = cfg.conv_kernel as u64;
    let h = cfg.hidden() as u64;
    let tokens = (cfg.frames * cfg.joints) as u64;
    let branches = cfg.branch_set.branch_count() as u64;
    let per_branch = 2 * d * n + 2 * d + 2 * d * n + d * n + d;
    let per_block = k * d + branches * per_branch + 2 * d * h;
    tokens * (2 * d + cfg.depth as u64 * per_block + 3 * d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let s = ModelConfig::small();
        assert_eq!((s.depth, s.d_model, s.frames, s.mlp_expansion), (20, 64, 243, 2));
        assert_eq!(ModelConfig::variant("l").unwrap().depth, 40);
        assert!(ModelConfig::variant("XL").is_err());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ModelConfig::small();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let minimal = "depth = 2\nd_model = 8\nframes = 4\njoints = 17\n";
        let m = ModelConfig::from_toml(minimal).unwrap();
        assert_eq!((m.state_size, m.conv_kernel, m.mlp_expansion), (16, 4, 2));
        assert!(ModelConfig::from_toml("depth = 0\nd_model = 8\nframes = 4\njoints = 17\n").is_err());
        assert!(ModelConfig::from_toml("depth = 1\nwidth = 8\n").is_err());
    }

    #[test]
    fn mlp_count_is_quadratic_in_width() {
        let mlp = |d: usize| {
            let h = 2 * d;
            d * h + h * d
        };
        let a = ModelConfig::small();
        let mut b = a.clone();
        b.d_model *= 2;
        assert_eq!(mlp(b.d_model), 4 * mlp(a.d_model));
        assert!(block_parameter_count(&b) > 2 * block_parameter_count(&a));
    }

    #[test]
    fn depth_doubling_doubles_block_parameters() {
        let b = ModelConfig::base();
        let l = ModelConfig::large();
        let blocks = |c: &ModelConfig| parameter_count(c) - embedding_parameter_count(c) - 3 * c.d_model - 3;
        assert_eq!(blocks(&l), 2 * blocks(&b));
    }

    #[test]
    fn mac_estimate_is_linear_in_frames() {
        let mut c = ModelConfig::small();
        let one = mac_estimate(&c);
        c.frames *= 2;
        assert_eq!(mac_estimate(&c), 2 * one);
    }
}
