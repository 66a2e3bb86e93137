//! The lifting network: embedding, stacked spatio-temporal blocks and a
//! linear regression head.
//!
//! Tokens are kept flattened as `[T·J × d]` in canonical (frame-major)
//! order. Each block runs
//!
//! ```text
//! h  = SiLU(DWConv(LN1(z)))
//! z' = LN2(Σ_b invert_b(SSM_b(apply_b(h)))) + z
//! out = MLP(LN3(z')) + z'
//! ```

mod checkpoint;
mod config;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{block_parameter_count, embedding_parameter_count, mac_estimate, parameter_count, ModelConfig};
pub use params::{BlockParams, EmbeddingParams, LayerNormParams, LinearParams, ModelParams};

use crate::error::{PoseError, Result};
use crate::numerics::{grad_check_many, GradCheckReport, Graph, Scalar, Tensor, Var, LAYER_NORM_EPS};
use crate::scan_orders::{apply_order_var, invert_order_var, ScanOrder, Skeleton};
use crate::ssm::{selective_ssm, ScanMode};

fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, T::of(LAYER_NORM_EPS))
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let y = g.matmul(x, p.w)?;
    g.add_row_bias(y, p.b)
}

/// Maps 2D keypoints `c[T·J × 2]` to tokens `[T·J × d]`:
/// `LN(LN(c·W + b + E_spos[j]) + E_tpos[t])`.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    c: Var,
    p: &EmbeddingParams<Var>,
    frames: usize,
    joints: usize,
) -> Result<Var> {
    let (pj, pt) = (g.shape(p.spatial_pos)[0], g.shape(p.temporal_pos)[0]);
    if pj != joints || pt != frames {
        return Err(PoseError::Config(format!(
            "embedding expects {pt} frames × {pj} joints, input has {frames} × {joints}"
        )));
    }
    if g.shape(c) != [frames * joints, 2] {
        return Err(PoseError::Config(format!(
            "keypoints {:?} do not match {frames} × {joints} × 2",
            g.shape(c)
        )));
    }
    let joint_idx: Arc<[usize]> = (0..frames * joints).map(|i| i % joints).collect();
    let frame_idx: Arc<[usize]> = (0..frames * joints).map(|i| i / joints).collect();

    let x = linear(g, c, &p.input)?;
    let spos = g.gather_rows(p.spatial_pos, joint_idx)?;
    let x = g.add(x, spos)?;
    let x = layer_norm(g, x, &p.ln_spatial)?;
    let tpos = g.gather_rows(p.temporal_pos, frame_idx)?;
    let x = g.add(x, tpos)?;
    layer_norm(g, x, &p.ln_temporal)
}

/// One spatio-temporal block over tokens `z[T·J × d]`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &BlockParams<Var>,
    orders: &[ScanOrder],
    mode: ScanMode,
) -> Result<Var> {
    if orders.is_empty() || (p.ssm.len() != orders.len() && p.ssm.len() != 1) {
        return Err(PoseError::Config(format!(
            "{} SSM parameter sets for {} scan orders",
            p.ssm.len(),
            orders.len()
        )));
    }
    let h = layer_norm(g, z, &p.ln1)?;
    let h = g.depthwise_conv1d(h, p.dw_kernel, true)?;
    let h = g.add_row_bias(h, p.dw_bias)?;
    let h = g.silu(h)?;

    let mut branches = Vec::with_capacity(orders.len());
    for (i, o) in orders.iter().enumerate() {
        let ssm = &p.ssm[if p.ssm.len() == 1 { 0 } else { i }];
        let seq = apply_order_var(g, h, o)?;
        let y = selective_ssm(g, seq, ssm, mode)?;
        branches.push(invert_order_var(g, y, o)?);
    }
    let s = g.add_all(&branches)?;
    let s = layer_norm(g, s, &p.ln2)?;
    let z1 = g.add(s, z)?;

    let m = layer_norm(g, z1, &p.ln3)?;
    let m = linear(g, m, &p.mlp_in)?;
    let m = g.gelu(m)?;
    let m = linear(g, m, &p.mlp_out)?;
    g.add(m, z1)
}

/// Negates the first channel of `x[T×J×C]` and swaps mirrored joints.
pub fn flip_horizontal<T: Scalar>(x: &Tensor<T>, mirror: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != mirror.len() {
        return Err(PoseError::Dimension(format!(
            "cannot flip {s:?} with a {}-joint mirror map",
            mirror.len()
        )));
    }
    let (t, j, c) = (s[0], s[1], s[2]);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for f in 0..t {
        for jj in 0..j {
            let from = (f * j + mirror[jj]) * c;
            let to = (f * j + jj) * c;
            out[to] = -src[from];
            out[to + 1..to + c].copy_from_slice(&src[from + 1..from + c]);
        }
    }
    Tensor::new(s, out)
}

/// A configured model with its weights.
#[derive(Debug, Clone)]
pub struct PoseMamba<T: Scalar> {
    config: ModelConfig,
    skeleton: Skeleton,
    pub params: ModelParams<Tensor<T>>,
    orders: Vec<ScanOrder>,
}

impl<T: Scalar> PoseMamba<T> {
    /// Wraps existing weights, checking every tensor shape against `config`.
    pub fn new(config: ModelConfig, skeleton: Skeleton, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        if skeleton.joint_count() != config.joints {
            return Err(PoseError::Config(format!(
                "skeleton has {} joints, config expects {}",
                skeleton.joint_count(),
                config.joints
            )));
        }
        let expected = Self::shapes(&config);
        let mut got = Vec::new();
        params.visit(&mut |name, t| got.push((name, t.shape().to_vec())));
        if got != expected {
            let diff = got
                .iter()
                .zip(&expected)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{}{:?} vs expected {}{:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} tensors vs expected {}", got.len(), expected.len()));
            return Err(PoseError::Config(format!("weights do not match config: {diff}")));
        }
        let orders = config.branch_set.orders(config.frames, config.joints, &skeleton)?;
        Ok(Self {
            config,
            skeleton,
            params,
            orders,
        })
    }

    pub fn init(config: ModelConfig, skeleton: Skeleton, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Self::new(config, skeleton, params)
    }

    /// Expected `(name, shape)` list for a config.
    pub fn shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let h = config.hidden();
        let n = config.state_size;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, shape: &[usize]| out.push((name.to_string(), shape.to_vec()));
        push("embed.input.w", &[2, d]);
        push("embed.input.b", &[d]);
        push("embed.spatial_pos", &[config.joints, d]);
        push("embed.temporal_pos", &[config.frames, d]);
        for ln in ["embed.ln_spatial.", "embed.ln_temporal."] {
            push(&format!("{ln}gamma"), &[d]);
            push(&format!("{ln}beta"), &[d]);
        }
        for b in 0..config.depth {
            let p = format!("blocks.{b}.");
            push(&format!("{p}ln1.gamma"), &[d]);
            push(&format!("{p}ln1.beta"), &[d]);
            push(&format!("{p}dw_kernel"), &[config.conv_kernel, d]);
            push(&format!("{p}dw_bias"), &[d]);
            for s in 0..config.ssm_sets() {
                let q = format!("{p}ssm.{s}.");
                push(&format!("{q}a_log"), &[d, n]);
                push(&format!("{q}w_b"), &[d, n]);
                push(&format!("{q}w_c"), &[d, n]);
                push(&format!("{q}w_delta_down"), &[d, 1]);
                push(&format!("{q}w_delta_up"), &[1, d]);
                push(&format!("{q}b_delta"), &[d]);
                push(&format!("{q}d_skip"), &[d]);
            }
            for ln in ["ln2.", "ln3."] {
                push(&format!("{p}{ln}gamma"), &[d]);
                push(&format!("{p}{ln}beta"), &[d]);
            }
            push(&format!("{p}mlp_in.w"), &[d, h]);
            push(&format!("{p}mlp_in.b"), &[h]);
            push(&format!("{p}mlp_out.w"), &[h, d]);
            push(&format!("{p}mlp_out.b"), &[d]);
        }
        push("head.w", &[d, 3]);
        push("head.b", &[3]);
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn orders(&self) -> &[ScanOrder] {
        &self.orders
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Puts the weights on `g`; trainable ones are differentiated.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelParams<Var> {
        self.params.map(&mut |t| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Rebuilds the parameter structure from handles in visiting order.
    pub fn params_from_vars(&self, vars: &[Var]) -> Result<ModelParams<Var>> {
        let expected = self.params.flatten().len();
        if vars.len() != expected {
            return Err(PoseError::Config(format!(
                "{} handles for {expected} parameter tensors",
                vars.len()
            )));
        }
        let mut it = vars.iter();
        Ok(self.params.map(&mut |_| *it.next().expect("length checked")))
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let want = [self.config.frames, self.config.joints, 2];
        if input.shape() != want {
            return Err(PoseError::Config(format!(
                "input {:?} does not match model input {want:?}",
                input.shape()
            )));
        }
        if !input.is_finite() {
            return Err(PoseError::NonFinite("input keypoints".into()));
        }
        Ok(())
    }

    /// Builds the forward pass for `input[T×J×2]`; returns `[T·J × 3]` in
    /// millimetres.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &ModelParams<Var>, input: &Tensor<T>) -> Result<Var> {
        self.check_input(input)?;
        let (t, j) = (self.config.frames, self.config.joints);
        let c = g.constant(input.reshape(&[t * j, 2])?);
        let mut z = embed(g, c, &p.embed, t, j)?;
        for b in &p.blocks {
            z = block_forward(g, z, b, &self.orders, self.config.scan_mode)?;
        }
        let out = linear(g, z, &p.head)?;
        g.scale(out, T::of(self.config.output_scale_mm))
    }

    /// `[T×J×2]` keypoints to `[T×J×3]` root-relative joint positions.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &p, input)?;
        g.value(out).reshape(&[self.config.frames, self.config.joints, 3])
    }

    /// Mean of the plain prediction and the un-flipped prediction of the
    /// mirrored input.
    pub fn flip_forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mirror = self.skeleton.mirror_map()?;
        if self.skeleton.left_right_pairs.is_empty() {
            return Err(PoseError::Config("skeleton has no left/right pairs".into()));
        }
        let plain = self.forward(input)?;
        let flipped = self.forward(&flip_horizontal(input, &mirror)?)?;
        let back = flip_horizontal(&flipped, &mirror)?;
        let half = T::of(0.5);
        let data = plain
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (a + b) * half)
            .collect();
        Tensor::new(plain.shape(), data)
    }
}

impl PoseMamba<f64> {
    /// Moves the weights to a generic point for gradient checking: uniform
    /// noise of size `scale` on every weight, with `a_log` and the step-size
    /// biases re-drawn in `[-1, 1]`. At initialisation `Δ ≈ 1e-3` and
    /// `|A|` reaches the state size, which leaves some `a_log` gradients
    /// below what central differences can resolve.
    pub fn perturb_for_check(&mut self, scale: f64, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.visit_mut(&mut |name, t| {
            let fresh = name.ends_with("b_delta") || name.ends_with("a_log");
            for v in t.data_mut() {
                if fresh {
                    *v = rng.gen_range(-1.0..1.0);
                } else {
                    *v += scale * rng.gen_range(-1.0..1.0);
                }
            }
        });
    }

    /// Finite-difference check of `loss(forward(input))` over every weight.
    pub fn gradient_check<L>(&self, input: &Tensor<f64>, loss: L, h: f64) -> Result<GradCheckReport>
    where
        L: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let tensors: Vec<Tensor<f64>> = self.params.flatten().into_iter().cloned().collect();
        grad_check_many(
            |g, vars| {
                let p = self.params_from_vars(vars)?;
                let out = self.forward_graph(g, &p, input)?;
                loss(g, out)
            },
            &tensors,
            h,
        )
    }
}
