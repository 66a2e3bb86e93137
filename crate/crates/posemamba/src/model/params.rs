use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::numerics::{Scalar, Tensor};
use crate::ssm::SelectiveSsmParams;

/// Affine parameters of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<H> {
    pub gamma: H,
    pub beta: H,
}

/// A dense layer `x·w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<H> {
    pub w: H,
    pub b: H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<H> {
    /// 2 → d input projection.
    pub input: LinearParams<H>,
    /// `[J×d]`, shared by all frames.
    pub spatial_pos: H,
    /// `[T×d]`, shared by all joints.
    pub temporal_pos: H,
    pub ln_spatial: LayerNormParams<H>,
    pub ln_temporal: LayerNormParams<H>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<H> {
    pub ln1: LayerNormParams<H>,
    /// `[k×d]` depthwise kernel.
    pub dw_kernel: H,
    pub dw_bias: H,
    /// One entry per branch, or a single shared entry.
    pub ssm: Vec<SelectiveSsmParams<H>>,
    pub ln2: LayerNormParams<H>,
    pub ln3: LayerNormParams<H>,
    pub mlp_in: LinearParams<H>,
    pub mlp_out: LinearParams<H>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<H> {
    pub embed: EmbeddingParams<H>,
    pub blocks: Vec<BlockParams<H>>,
    pub head: LinearParams<H>,
}

impl<H> LayerNormParams<H> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a H)) {
        f(format!("{p}gamma"), &self.gamma);
        f(format!("{p}beta"), &self.beta);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut H)) {
        f(format!("{p}gamma"), &mut self.gamma);
        f(format!("{p}beta"), &mut self.beta);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&H) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<H> LinearParams<H> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a H)) {
        f(format!("{p}w"), &self.w);
        f(format!("{p}b"), &self.b);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut H)) {
        f(format!("{p}w"), &mut self.w);
        f(format!("{p}b"), &mut self.b);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&H) -> U) -> LinearParams<U> {
        LinearParams {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}

impl<H> EmbeddingParams<H> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a H)) {
        self.input.visit("embed.input.", f);
        f("embed.spatial_pos".into(), &self.spatial_pos);
        f("embed.temporal_pos".into(), &self.temporal_pos);
        self.ln_spatial.visit("embed.ln_spatial.", f);
        self.ln_temporal.visit("embed.ln_temporal.", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut H)) {
        self.input.visit_mut("embed.input.", f);
        f("embed.spatial_pos".into(), &mut self.spatial_pos);
        f("embed.temporal_pos".into(), &mut self.temporal_pos);
        self.ln_spatial.visit_mut("embed.ln_spatial.", f);
        self.ln_temporal.visit_mut("embed.ln_temporal.", f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&H) -> U) -> EmbeddingParams<U> {
        EmbeddingParams {
            input: self.input.map(f),
            spatial_pos: f(&self.spatial_pos),
            temporal_pos: f(&self.temporal_pos),
            ln_spatial: self.ln_spatial.map(f),
            ln_temporal: self.ln_temporal.map(f),
        }
    }
}

impl<H> BlockParams<H> {
    pub fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a H)) {
        self.ln1.visit(&format!("{p}ln1."), f);
        f(format!("{p}dw_kernel"), &self.dw_kernel);
        f(format!("{p}dw_bias"), &self.dw_bias);
        for (i, s) in self.ssm.iter().enumerate() {
            s.visit(&format!("{p}ssm.{i}."), f);
        }
        self.ln2.visit(&format!("{p}ln2."), f);
        self.ln3.visit(&format!("{p}ln3."), f);
        self.mlp_in.visit(&format!("{p}mlp_in."), f);
        self.mlp_out.visit(&format!("{p}mlp_out."), f);
    }

    pub fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut H)) {
        self.ln1.visit_mut(&format!("{p}ln1."), f);
        f(format!("{p}dw_kernel"), &mut self.dw_kernel);
        f(format!("{p}dw_bias"), &mut self.dw_bias);
        for (i, s) in self.ssm.iter_mut().enumerate() {
            s.visit_mut(&format!("{p}ssm.{i}."), f);
        }
        self.ln2.visit_mut(&format!("{p}ln2."), f);
        self.ln3.visit_mut(&format!("{p}ln3."), f);
        self.mlp_in.visit_mut(&format!("{p}mlp_in."), f);
        self.mlp_out.visit_mut(&format!("{p}mlp_out."), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&H) -> U) -> BlockParams<U> {
        BlockParams {
            ln1: self.ln1.map(f),
            dw_kernel: f(&self.dw_kernel),
            dw_bias: f(&self.dw_bias),
            ssm: self.ssm.iter().map(|s| s.map(f)).collect(),
            ln2: self.ln2.map(f),
            ln3: self.ln3.map(f),
            mlp_in: self.mlp_in.map(f),
            mlp_out: self.mlp_out.map(f),
        }
    }
}

impl<H> ModelParams<H> {
    /// Visits every tensor in a fixed order with its dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a H)) {
        self.embed.visit(f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), f);
        }
        self.head.visit("head.", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut H)) {
        self.embed.visit_mut(f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), f);
        }
        self.head.visit_mut("head.", f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&H) -> U) -> ModelParams<U> {
        ModelParams {
            embed: self.embed.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    /// All handles in visiting order.
    pub fn flatten(&self) -> Vec<&H> {
        let mut out = Vec::new();
        self.visit(&mut |_, h| out.push(h));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Fan-in uniform dense weights, zero biases, `N(0, 0.02²)` position
    /// tables, unit/zero layer-norm affine.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.hidden();
        let embed = EmbeddingParams {
            input: linear(rng, 2, d),
            spatial_pos: normal(rng, &[cfg.joints, d], 0.02),
            temporal_pos: normal(rng, &[cfg.frames, d], 0.02),
            ln_spatial: layer_norm(d),
            ln_temporal: layer_norm(d),
        };
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1: layer_norm(d),
                dw_kernel: uniform(rng, &[cfg.conv_kernel, d], 1.0 / (cfg.conv_kernel as f64).sqrt()),
                dw_bias: Tensor::zeros(&[d]),
                ssm: (0..cfg.ssm_sets())
                    .map(|_| SelectiveSsmParams::init(d, cfg.state_size, rng))
                    .collect(),
                ln2: layer_norm(d),
                ln3: layer_norm(d),
                mlp_in: linear(rng, d, h),
                mlp_out: linear(rng, h, d),
            })
            .collect();
        Self {
            embed,
            blocks,
            head: linear(rng, d, 3),
        }
    }

    pub fn count(&self) -> usize {
        self.flatten().iter().map(|t| t.len()).sum()
    }
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("init shape")
}

fn linear<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> LinearParams<Tensor<T>> {
    LinearParams {
        w: uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
        b: Tensor::zeros(&[fan_out]),
    }
}

fn layer_norm<T: Scalar>(d: usize) -> LayerNormParams<Tensor<T>> {
    LayerNormParams {
        gamma: Tensor::full(&[d], T::one()),
        beta: Tensor::zeros(&[d]),
    }
}
