//! Comparison context modules and the shared residual context-operator
//! skeleton `F + h(g(f(W1 X, W2 X), W3 X))`.

use crate::dgcw::{
    channel_distance, downsample, from_rows, normalize_weights, qkv_project, to_rows, DgcwParams,
    Downsample,
};
use crate::layers::{
    global_avg_pool, join, linear_1x1, resample_bilinear, Init, LinearParams, Parameterized, Visitor,
    VisitorMut,
};
use crate::{Error, Graph, Real, Result, Var};

fn dims4(g: &Graph, x: Var) -> Result<[usize; 4]> {
    match g.shape(x)[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "context modules expect N x C x H x W".into(),
        }),
    }
}

fn upsample_residual(g: &Graph, f: Var, y: Var) -> Result<Var> {
    let [_, _, h, w] = dims4(g, f)?;
    g.add(f, resample_bilinear(g, y, h, w)?)
}

fn linear(init: &Init, name: &str, cin: usize, cout: usize, zero: bool) -> Result<LinearParams> {
    if zero {
        LinearParams::zeros(cin, cout)
    } else {
        LinearParams::init(init, name, cin, cout)
    }
}

/// The DGCW pipeline without channel weighting: `F + US(sum_j g(V_i))`.
#[derive(Clone, Debug)]
pub struct ConvContextParams {
    pub wv: LinearParams,
    pub g1: LinearParams,
    pub g2: LinearParams,
    pub downsample_ratio: usize,
    pub downsample: Downsample,
}

impl ConvContextParams {
    pub fn new(
        init: &Init,
        name: &str,
        channels: usize,
        hidden: usize,
        ratio: usize,
        zero_init_last: bool,
    ) -> Result<Self> {
        let hidden = if hidden == 0 { channels } else { hidden };
        Ok(ConvContextParams {
            wv: LinearParams::init(init, &join(name, "wv"), channels, channels)?,
            g1: LinearParams::init(init, &join(name, "g1"), channels, hidden)?,
            g2: linear(init, &join(name, "g2"), hidden, channels, zero_init_last)?,
            downsample_ratio: ratio,
            downsample: Downsample::AvgPool,
        })
    }
}

impl Parameterized for ConvContextParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.wv.visit(&join(prefix, "wv"), f);
        self.g1.visit(&join(prefix, "g1"), f);
        self.g2.visit(&join(prefix, "g2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.g1.visit_mut(&join(prefix, "g1"), f);
        self.g2.visit_mut(&join(prefix, "g2"), f);
    }
}

/// Every partner contributes the same `g(V_i)`, so the sum over `j` is
/// `P g(V_i)`.
pub fn conv_context(g: &Graph, f: Var, p: &ConvContextParams) -> Result<Var> {
    let d = downsample(g, f, p.downsample_ratio, p.downsample)?;
    let [_, _, h, w] = dims4(g, d)?;
    let v = linear_1x1(g, d, &p.wv)?;
    let r = linear_1x1(g, g.relu(linear_1x1(g, v, &p.g1)?), &p.g2)?;
    upsample_residual(g, f, g.mul_scalar(r, (h * w) as Real)?)
}

/// Image-level pooling context: `F + US(W GAP(F))`.
#[derive(Clone, Debug)]
pub struct GapParams {
    pub conv: LinearParams,
}

impl GapParams {
    pub fn new(init: &Init, name: &str, channels: usize) -> Result<Self> {
        Ok(GapParams {
            conv: LinearParams::init(init, &join(name, "conv"), channels, channels)?,
        })
    }
}

impl Parameterized for GapParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

pub fn gap_context(g: &Graph, f: Var, p: &GapParams) -> Result<Var> {
    let pooled = linear_1x1(g, global_avg_pool(g, f)?, &p.conv)?;
    upsample_residual(g, f, pooled)
}

/// Squeeze-and-excitation gating: `F * sigmoid(fc2 relu(fc1 GAP(F)))`.
#[derive(Clone, Debug)]
pub struct SeParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl SeParams {
    /// Bottleneck width `channels / reduction`, at least 1.
    pub fn new(init: &Init, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let mid = (channels / reduction.max(1)).max(1);
        Ok(SeParams {
            fc1: LinearParams::init(init, &join(name, "fc1"), channels, mid)?,
            fc2: LinearParams::init(init, &join(name, "fc2"), mid, channels)?,
        })
    }
}

impl Parameterized for SeParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

pub fn se_context(g: &Graph, f: Var, p: &SeParams) -> Result<Var> {
    let s = global_avg_pool(g, f)?;
    let s = linear_1x1(g, g.relu(linear_1x1(g, s, &p.fc1)?), &p.fc2)?;
    g.mul(f, g.sigmoid(s))
}

/// Non-local (self-attention) block. `downsample` of `None` keeps the full
/// resolution; `Some(r)` attends over an `r`-times reduced map and
/// upsamples the update.
#[derive(Clone, Debug)]
pub struct NonLocalParams {
    pub theta: LinearParams,
    pub phi: LinearParams,
    pub value: LinearParams,
    pub out: LinearParams,
    pub downsample: Option<usize>,
}

impl NonLocalParams {
    /// Bottleneck width `channels / 2`, at least 1.
    pub fn new(
        init: &Init,
        name: &str,
        channels: usize,
        downsample: Option<usize>,
        zero_init_last: bool,
    ) -> Result<Self> {
        let mid = (channels / 2).max(1);
        Ok(NonLocalParams {
            theta: LinearParams::init(init, &join(name, "theta"), channels, mid)?,
            phi: LinearParams::init(init, &join(name, "phi"), channels, mid)?,
            value: LinearParams::init(init, &join(name, "value"), channels, mid)?,
            out: linear(init, &join(name, "out"), mid, channels, zero_init_last)?,
            downsample,
        })
    }
}

impl Parameterized for NonLocalParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.theta.visit(&join(prefix, "theta"), f);
        self.phi.visit(&join(prefix, "phi"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.theta.visit_mut(&join(prefix, "theta"), f);
        self.phi.visit_mut(&join(prefix, "phi"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

fn nonlocal_input(g: &Graph, f: Var, p: &NonLocalParams) -> Result<Var> {
    match p.downsample {
        None => Ok(f),
        Some(r) => downsample(g, f, r, Downsample::AvgPool),
    }
}

/// Row-stochastic attention `softmax(theta phi^T)` over the key axis,
/// N x P x P, for the (possibly downsampled) map `x`.
pub fn nonlocal_attention(g: &Graph, x: Var, p: &NonLocalParams) -> Result<Var> {
    let theta = to_rows(g, linear_1x1(g, x, &p.theta)?)?;
    let phi = to_rows(g, linear_1x1(g, x, &p.phi)?)?;
    g.softmax(g.matmul(theta, g.transpose(phi, 1, 2)?)?, 2)
}

pub fn nonlocal_context(g: &Graph, f: Var, p: &NonLocalParams) -> Result<Var> {
    let x = nonlocal_input(g, f, p)?;
    let [_, _, h, w] = dims4(g, x)?;
    let attn = nonlocal_attention(g, x, p)?;
    let values = to_rows(g, linear_1x1(g, x, &p.value)?)?;
    let mixed = from_rows(g, g.matmul(attn, values)?, h, w)?;
    upsample_residual(g, f, linear_1x1(g, mixed, &p.out)?)
}

/// One residual context operator written as `F + US(h(g(f(W1 X, W2 X), W3 X)))`
/// with `X` the operator's working resolution.
pub trait ContextOperator {
    /// `X` from `F` (identity or a downsampling wrapper).
    fn reduce(&self, g: &Graph, f: Var) -> Result<Var>;
    /// `(W1 X, W2 X, W3 X)`.
    fn project(&self, g: &Graph, x: Var) -> Result<(Var, Var, Var)>;
    /// Pair combination of the first two projections.
    fn pair(&self, g: &Graph, a: Var, b: Var) -> Result<Var>;
    /// Combination of the pair relation with the values.
    fn combine(&self, g: &Graph, rel: Var, v: Var) -> Result<Var>;
    /// Output map onto an N x C x h x w update at the working resolution.
    fn output(&self, g: &Graph, y: Var, h: usize, w: usize) -> Result<Var>;
}

pub fn apply_context_operator(g: &Graph, f: Var, op: &dyn ContextOperator) -> Result<Var> {
    let x = op.reduce(g, f)?;
    let [_, _, h, w] = dims4(g, x)?;
    let (a, b, v) = op.project(g, x)?;
    let rel = op.pair(g, a, b)?;
    let y = op.combine(g, rel, v)?;
    let update = op.output(g, y, h, w)?;
    upsample_residual(g, f, update)
}

/// DGCW as a context operator: f is squared channel-wise distance plus
/// normalization, g is the elementwise product with `V_i`, h is the
/// per-pair two-layer map summed over partners.
pub struct DgcwOperator<'a>(pub &'a DgcwParams);

impl ContextOperator for DgcwOperator<'_> {
    fn reduce(&self, g: &Graph, f: Var) -> Result<Var> {
        downsample(g, f, self.0.downsample_ratio, self.0.downsample)
    }

    fn project(&self, g: &Graph, x: Var) -> Result<(Var, Var, Var)> {
        qkv_project(g, x, self.0)
    }

    fn pair(&self, g: &Graph, a: Var, b: Var) -> Result<Var> {
        let m = channel_distance(g, a, b)?;
        normalize_weights(g, m, self.0.norm_kind, self.0.epsilon)
    }

    fn combine(&self, g: &Graph, rel: Var, v: Var) -> Result<Var> {
        let s = g.shape(rel);
        let vi = g.reshape(g.transpose(v, 1, 2)?, &[s[0], s[1], s[2], 1])?;
        g.mul(rel, vi)
    }

    fn output(&self, g: &Graph, y: Var, h: usize, w: usize) -> Result<Var> {
        let hidden = g.relu(linear_1x1(g, y, &self.0.g1)?);
        let r = linear_1x1(g, hidden, &self.0.g2)?;
        let s = g.shape(r);
        let summed = g.sum(r, 3)?;
        g.reshape(summed, &[s[0], s[1], h, w])
    }
}

/// Non-local attention as a context operator: f is `softmax(a b^T)`, g is
/// the matrix product with the values, h a linear map.
pub struct NonLocalOperator<'a>(pub &'a NonLocalParams);

impl ContextOperator for NonLocalOperator<'_> {
    fn reduce(&self, g: &Graph, f: Var) -> Result<Var> {
        nonlocal_input(g, f, self.0)
    }

    fn project(&self, g: &Graph, x: Var) -> Result<(Var, Var, Var)> {
        let p = self.0;
        Ok((
            to_rows(g, linear_1x1(g, x, &p.theta)?)?,
            to_rows(g, linear_1x1(g, x, &p.phi)?)?,
            to_rows(g, linear_1x1(g, x, &p.value)?)?,
        ))
    }

    fn pair(&self, g: &Graph, a: Var, b: Var) -> Result<Var> {
        g.softmax(g.matmul(a, g.transpose(b, 1, 2)?)?, 2)
    }

    fn combine(&self, g: &Graph, rel: Var, v: Var) -> Result<Var> {
        g.matmul(rel, v)
    }

    fn output(&self, g: &Graph, y: Var, h: usize, w: usize) -> Result<Var> {
        linear_1x1(g, from_rows(g, y, h, w)?, &self.0.out)
    }
}
