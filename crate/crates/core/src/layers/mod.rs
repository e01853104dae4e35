//! Parameterised building blocks and their graph operations.

mod checkpoint;
mod conv;
mod loss;
mod norm;
mod resample;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, ManifestEntry};
pub use conv::{conv2d, linear_1x1, linear_1x1_vars};
pub use loss::{correct_class_probs, cross_entropy, cross_entropy_masked, Labels};
pub use norm::batchnorm;
pub use resample::{adaptive_avg_pool, global_avg_pool, resample_bilinear, resize_nearest};

use crate::rng::{fnv1a, KeyedRng};
use crate::{Real, Result, Tensor};

/// What a parameter tensor is for; drives the optimizer and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running statistics: saved, never trained.
    RunningStat,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::RunningStat
    }

    /// Weight decay applies to everything trainable except normalization
    /// scale and shift.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

pub type Visitor<'a> = dyn FnMut(&str, ParamRole, &Tensor) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, ParamRole, &mut Tensor) + 'a;

/// Exposes parameter tensors under hierarchical dot-separated names.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>);

    /// Total number of trainable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, role, t| {
            if role.trainable() {
                n += t.numel()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        if let Some(inner) = self {
            inner.visit(prefix, f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f)
        }
    }
}

/// Deterministic parameter initialization keyed by parameter name, so a
/// parameter's initial value does not depend on what else the network
/// contains.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in.max(1) as Real).sqrt();
        let mut rng = KeyedRng::new(self.seed, "init", fnv1a(name.as_bytes()));
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-bound, bound))
    }
}

/// 1x1 convolution / per-pixel affine map.
#[derive(Clone, Debug)]
pub struct LinearParams {
    /// out x in
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(init: &Init, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(LinearParams {
            weight: init.fan_in_uniform(&join(name, "weight"), &[out_ch, in_ch], in_ch)?,
            bias: Tensor::zeros([out_ch])?,
        })
    }

    pub fn zeros(in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(LinearParams {
            weight: Tensor::zeros([out_ch, in_ch])?,
            bias: Tensor::zeros([out_ch])?,
        })
    }

    pub fn identity(ch: usize) -> Result<Self> {
        Ok(LinearParams {
            weight: Tensor::eye(ch)?,
            bias: Tensor::zeros([ch])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameterized for LinearParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), ParamRole::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamRole::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        f(&join(prefix, "weight"), ParamRole::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamRole::Bias, &mut self.bias);
    }
}

/// 2-D convolution (cross-correlation) with stride, zero padding and
/// dilation.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    /// out x in x kh x kw
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dParams {
    /// Square kernel with "same" padding `dilation * (k - 1) / 2`.
    pub fn init(
        init: &Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Conv2dParams {
            weight: init.fan_in_uniform(
                &join(name, "weight"),
                &[out_ch, in_ch, kernel, kernel],
                fan_in,
            )?,
            bias: Tensor::zeros([out_ch])?,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output extent along one axis.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding)
            .checked_sub(span)
            .map(|r| r / self.stride + 1)
    }
}

impl Parameterized for Conv2dParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), ParamRole::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamRole::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        f(&join(prefix, "weight"), ParamRole::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamRole::Bias, &mut self.bias);
    }
}

/// Single-process batch normalization over (N, H, W) per channel.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the current batch in the running averages.
    pub momentum: Real,
    pub epsilon: Real,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            scale: Tensor::ones([channels])?,
            shift: Tensor::zeros([channels])?,
            running_mean: Tensor::zeros([channels])?,
            running_var: Tensor::ones([channels])?,
            momentum: 0.1,
            epsilon: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

impl Parameterized for BatchNormParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "scale"), ParamRole::NormScale, &self.scale);
        f(&join(prefix, "shift"), ParamRole::NormShift, &self.shift);
        f(&join(prefix, "running_mean"), ParamRole::RunningStat, &self.running_mean);
        f(&join(prefix, "running_var"), ParamRole::RunningStat, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        f(&join(prefix, "scale"), ParamRole::NormScale, &mut self.scale);
        f(&join(prefix, "shift"), ParamRole::NormShift, &mut self.shift);
        f(&join(prefix, "running_mean"), ParamRole::RunningStat, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamRole::RunningStat, &mut self.running_var);
    }
}
