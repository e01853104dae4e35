//! The segmentation network: a small dilated residual backbone (output
//! stride 8), an optional PPM or ASPP head, a 3x3 channel reduction, a
//! context module slot, a 1x1 classifier and an auxiliary head on stage 3.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{
    conv_context, gap_context, nonlocal_context, se_context, ConvContextParams, GapParams,
    NonLocalParams, SeParams,
};
use crate::dgcw::{dgcw_forward, DgcwConfig, DgcwParams, Impl};
use crate::layers::{
    adaptive_avg_pool, batchnorm, conv2d, cross_entropy, cross_entropy_masked, global_avg_pool, join,
    linear_1x1, resample_bilinear, BatchNormParams, Conv2dParams, Init, Labels, LinearParams,
    Parameterized, Visitor, VisitorMut,
};
use crate::{Error, Graph, Real, Result, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    None,
    Ppm,
    Aspp,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(HeadKind::None),
            "ppm" => Ok(HeadKind::Ppm),
            "aspp" => Ok(HeadKind::Aspp),
            _ => Err(Error::invalid(format!("unknown head {s:?} (none, ppm, aspp)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::None => "none",
            HeadKind::Ppm => "ppm",
            HeadKind::Aspp => "aspp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextKind {
    None,
    Conv,
    Gap,
    Se,
    /// Non-local at full feature resolution.
    Nlh,
    /// Non-local on a map downsampled by the DGCW ratio.
    Nld,
    Dgcw,
}

impl ContextKind {
    pub const ALL: [ContextKind; 7] = [
        ContextKind::None,
        ContextKind::Conv,
        ContextKind::Gap,
        ContextKind::Se,
        ContextKind::Nlh,
        ContextKind::Nld,
        ContextKind::Dgcw,
    ];
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ContextKind::None),
            "conv" => Ok(ContextKind::Conv),
            "gap" => Ok(ContextKind::Gap),
            "se" => Ok(ContextKind::Se),
            "nlh" => Ok(ContextKind::Nlh),
            "nld" => Ok(ContextKind::Nld),
            "dgcw" => Ok(ContextKind::Dgcw),
            _ => Err(Error::invalid(format!(
                "unknown context {s:?} (none, conv, gap, se, nlh, nld, dgcw)"
            ))),
        }
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextKind::None => "none",
            ContextKind::Conv => "conv",
            ContextKind::Gap => "gap",
            ContextKind::Se => "se",
            ContextKind::Nlh => "nlh",
            ContextKind::Nld => "nld",
            ContextKind::Dgcw => "dgcw",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub class_count: usize,
    /// Output channels of stages 1 to 4; the stem uses the first.
    pub backbone_widths: Vec<usize>,
    pub reduced_channels: usize,
    pub head: HeadKind,
    pub context: ContextKind,
    pub dgcw: DgcwConfig,
    pub dgcw_impl: Impl,
    pub aux_weight: Real,
    pub aspp_rates: Vec<usize>,
    pub aspp_out_channels: usize,
    pub ppm_bins: Vec<usize>,
    /// Width of each pyramid branch; 0 means a quarter of the input.
    pub ppm_branch_channels: usize,
    pub se_reduction: usize,
    /// When false every batch normalization is skipped (used for exact
    /// gradient checks and linearity tests).
    pub batchnorm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            class_count: 4,
            backbone_widths: vec![16, 32, 64, 64],
            reduced_channels: 32,
            head: HeadKind::None,
            context: ContextKind::None,
            dgcw: DgcwConfig::default(),
            dgcw_impl: Impl::Fused,
            aux_weight: 0.4,
            aspp_rates: vec![2, 4, 6],
            aspp_out_channels: 64,
            ppm_bins: vec![1, 2, 3, 6],
            ppm_branch_channels: 0,
            se_reduction: 4,
            batchnorm: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.class_count < 2 {
            return bad("class_count must be at least 2");
        }
        if self.reduced_channels < 4 {
            return bad("reduced_channels must be at least 4");
        }
        if self.backbone_widths.len() != 4 || self.backbone_widths.contains(&0) {
            return bad("backbone_widths needs four positive stage widths");
        }
        if self.aux_weight.is_nan() || self.aux_weight < 0.0 {
            return bad("aux_weight must be non-negative");
        }
        if self.head == HeadKind::Aspp && (self.aspp_rates.is_empty() || self.aspp_rates.contains(&0)) {
            return bad("aspp_rates must be positive");
        }
        if self.head == HeadKind::Ppm && (self.ppm_bins.is_empty() || self.ppm_bins.contains(&0)) {
            return bad("ppm_bins must be positive");
        }
        if self.aspp_out_channels == 0 || self.dgcw.downsample_ratio == 0 || self.dgcw.block == 0 {
            return bad("channel counts, ratios and block sizes must be positive");
        }
        Ok(())
    }
}

/// Whether batch normalization uses batch statistics (and updates the
/// running averages) or the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2dParams,
    pub bn: BatchNormParams,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        init: &Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2dParams::init(init, &join(name, "conv"), cin, cout, kernel, stride, dilation)?,
            bn: BatchNormParams::new(cout)?,
        })
    }

    fn forward(&mut self, g: &Graph, x: Var, ctx: &Ctx, relu: bool) -> Result<Var> {
        let y = conv2d(g, x, &self.conv)?;
        let y = if ctx.batchnorm {
            batchnorm(g, y, &mut self.bn, ctx.mode == Mode::Train)?
        } else {
            y
        };
        Ok(if relu { g.relu(y) } else { y })
    }
}

impl Parameterized for ConvBn {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

struct Ctx {
    mode: Mode,
    batchnorm: bool,
}

/// Residual block of two 3x3 convolutions; a strided or widening block
/// gets a 1x1 projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(init: &Init, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> Result<Self> {
        Ok(BasicBlock {
            conv1: ConvBn::new(init, &join(name, "conv1"), cin, cout, 3, stride, dilation)?,
            conv2: ConvBn::new(init, &join(name, "conv2"), cout, cout, 3, 1, dilation)?,
            shortcut: if stride != 1 || cin != cout {
                Some(ConvBn::new(init, &join(name, "shortcut"), cin, cout, 1, stride, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&mut self, g: &Graph, x: Var, ctx: &Ctx) -> Result<Var> {
        let y = self.conv1.forward(g, x, ctx, true)?;
        let y = self.conv2.forward(g, y, ctx, false)?;
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(g, x, ctx, false)?,
            None => x,
        };
        Ok(g.relu(g.add(y, skip)?))
    }
}

impl Parameterized for BasicBlock {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.shortcut.visit_mut(&join(prefix, "shortcut"), f);
    }
}

/// Two stride-2 stem convolutions, then stages with (stride, dilation)
/// (1, 1), (2, 1), (1, 2), (1, 4): overall stride 8.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem1: ConvBn,
    pub stem2: ConvBn,
    pub stages: Vec<BasicBlock>,
}

const STAGE_GEOMETRY: [(usize, usize); 4] = [(1, 1), (2, 1), (1, 2), (1, 4)];

impl Backbone {
    pub fn new(init: &Init, name: &str, widths: &[usize]) -> Result<Self> {
        let w0 = widths[0];
        let mut stages = Vec::new();
        let mut cin = w0;
        for (s, (&cout, &(stride, dilation))) in widths.iter().zip(&STAGE_GEOMETRY).enumerate() {
            stages.push(BasicBlock::new(init, &join(name, &format!("stage{}", s + 1)), cin, cout, stride, dilation)?);
            cin = cout;
        }
        Ok(Backbone {
            stem1: ConvBn::new(init, &join(name, "stem1"), 3, w0, 3, 2, 1)?,
            stem2: ConvBn::new(init, &join(name, "stem2"), w0, w0, 3, 2, 1)?,
            stages,
        })
    }
}

impl Parameterized for Backbone {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.stem1.visit(&join(prefix, "stem1"), f);
        self.stem2.visit(&join(prefix, "stem2"), f);
        for (s, b) in self.stages.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage{}", s + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.stem1.visit_mut(&join(prefix, "stem1"), f);
        self.stem2.visit_mut(&join(prefix, "stem2"), f);
        for (s, b) in self.stages.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage{}", s + 1)), f);
        }
    }
}

/// Pyramid pooling: one 1x1 convolution per grid size.
#[derive(Clone, Debug)]
pub struct PpmParams {
    pub bins: Vec<usize>,
    pub branches: Vec<LinearParams>,
}

impl PpmParams {
    pub fn new(init: &Init, name: &str, channels: usize, bins: &[usize], branch: usize) -> Result<Self> {
        let branch = if branch == 0 { (channels / 4).max(1) } else { branch };
        Ok(PpmParams {
            bins: bins.to_vec(),
            branches: bins
                .iter()
                .map(|b| LinearParams::init(init, &join(name, &format!("bin{b}")), channels, branch))
                .collect::<Result<_>>()?,
        })
    }

    pub fn out_channels(&self, input: usize) -> usize {
        input + self.branches.iter().map(LinearParams::out_channels).sum::<usize>()
    }
}

impl Parameterized for PpmParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        for (b, p) in self.bins.iter().zip(&self.branches) {
            p.visit(&join(prefix, &format!("bin{b}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        for (b, p) in self.bins.iter().zip(&mut self.branches) {
            p.visit_mut(&join(prefix, &format!("bin{b}")), f);
        }
    }
}

/// Pool to each grid, project, upsample and concatenate with the input.
pub fn ppm_head(g: &Graph, x: Var, p: &PpmParams) -> Result<Var> {
    let s = g.shape(x);
    let (h, w) = (s[2], s[3]);
    let max_bin = p.bins.iter().copied().max().unwrap_or(1);
    if h < max_bin || w < max_bin {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("pyramid pooling needs at least {max_bin}x{max_bin} features"),
        });
    }
    let mut parts = vec![x];
    for (&b, branch) in p.bins.iter().zip(&p.branches) {
        let pooled = linear_1x1(g, adaptive_avg_pool(g, x, b, b)?, branch)?;
        parts.push(resample_bilinear(g, pooled, h, w)?);
    }
    g.concat(&parts, 1)
}

/// ASPP: image pooling, 1x1 and one dilated 3x3 branch per rate, each
/// followed by ReLU, concatenated and fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct AsppParams {
    pub pool: LinearParams,
    pub conv1x1: LinearParams,
    pub atrous: Vec<Conv2dParams>,
    pub fuse: LinearParams,
}

impl AsppParams {
    pub fn new(init: &Init, name: &str, channels: usize, rates: &[usize], out: usize) -> Result<Self> {
        Ok(AsppParams {
            pool: LinearParams::init(init, &join(name, "pool"), channels, out)?,
            conv1x1: LinearParams::init(init, &join(name, "conv1x1"), channels, out)?,
            atrous: rates
                .iter()
                .map(|&r| Conv2dParams::init(init, &join(name, &format!("rate{r}")), channels, out, 3, 1, r))
                .collect::<Result<_>>()?,
            fuse: LinearParams::init(init, &join(name, "fuse"), out * (2 + rates.len()), out)?,
        })
    }
}

impl Parameterized for AsppParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.pool.visit(&join(prefix, "pool"), f);
        self.conv1x1.visit(&join(prefix, "conv1x1"), f);
        for a in &self.atrous {
            a.visit(&join(prefix, &format!("rate{}", a.dilation)), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.pool.visit_mut(&join(prefix, "pool"), f);
        self.conv1x1.visit_mut(&join(prefix, "conv1x1"), f);
        for a in &mut self.atrous {
            let d = a.dilation;
            a.visit_mut(&join(prefix, &format!("rate{d}")), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

pub fn aspp_head(g: &Graph, x: Var, p: &AsppParams) -> Result<Var> {
    let s = g.shape(x);
    let pooled = g.relu(linear_1x1(g, global_avg_pool(g, x)?, &p.pool)?);
    let mut parts = vec![resample_bilinear(g, pooled, s[2], s[3])?];
    parts.push(g.relu(linear_1x1(g, x, &p.conv1x1)?));
    for a in &p.atrous {
        parts.push(g.relu(conv2d(g, x, a)?));
    }
    linear_1x1(g, g.concat(&parts, 1)?, &p.fuse)
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    None,
    Ppm(PpmParams),
    Aspp(AsppParams),
}

#[derive(Clone, Debug)]
pub enum ContextParams {
    None,
    Conv(ConvContextParams),
    Gap(GapParams),
    Se(SeParams),
    NonLocal(NonLocalParams),
    Dgcw(DgcwParams),
}

impl Parameterized for ContextParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        match self {
            ContextParams::None => {}
            ContextParams::Conv(p) => p.visit(&join(prefix, "conv"), f),
            ContextParams::Gap(p) => p.visit(&join(prefix, "gap"), f),
            ContextParams::Se(p) => p.visit(&join(prefix, "se"), f),
            ContextParams::NonLocal(p) => p.visit(&join(prefix, "nl"), f),
            ContextParams::Dgcw(p) => p.visit(&join(prefix, "dgcw"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        match self {
            ContextParams::None => {}
            ContextParams::Conv(p) => p.visit_mut(&join(prefix, "conv"), f),
            ContextParams::Gap(p) => p.visit_mut(&join(prefix, "gap"), f),
            ContextParams::Se(p) => p.visit_mut(&join(prefix, "se"), f),
            ContextParams::NonLocal(p) => p.visit_mut(&join(prefix, "nl"), f),
            ContextParams::Dgcw(p) => p.visit_mut(&join(prefix, "dgcw"), f),
        }
    }
}

/// Applies a context module (identity for [`ContextParams::None`]).
pub fn context_forward(g: &Graph, x: Var, p: &ContextParams, imp: Impl) -> Result<Var> {
    match p {
        ContextParams::None => Ok(x),
        ContextParams::Conv(p) => conv_context(g, x, p),
        ContextParams::Gap(p) => gap_context(g, x, p),
        ContextParams::Se(p) => se_context(g, x, p),
        ContextParams::NonLocal(p) => nonlocal_context(g, x, p),
        ContextParams::Dgcw(p) => dgcw_forward(g, x, p, imp),
    }
}

#[derive(Clone, Debug)]
pub struct NetworkParams {
    pub backbone: Backbone,
    pub head: HeadParams,
    pub reduce: ConvBn,
    pub context: ContextParams,
    pub classifier: LinearParams,
    pub aux: ConvBn,
    pub aux_classifier: LinearParams,
}

impl NetworkParams {
    /// Initializes every parameter from its name, so shared parts of two
    /// configurations start identical under the same seed.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = Init::new(seed);
        let widths = &cfg.backbone_widths;
        let feat = widths[3];
        let (head, head_out) = match cfg.head {
            HeadKind::None => (HeadParams::None, feat),
            HeadKind::Ppm => {
                let p = PpmParams::new(&init, "head.ppm", feat, &cfg.ppm_bins, cfg.ppm_branch_channels)?;
                let out = p.out_channels(feat);
                (HeadParams::Ppm(p), out)
            }
            HeadKind::Aspp => (
                HeadParams::Aspp(AsppParams::new(&init, "head.aspp", feat, &cfg.aspp_rates, cfg.aspp_out_channels)?),
                cfg.aspp_out_channels,
            ),
        };
        let c = cfg.reduced_channels;
        let zero_last = cfg.dgcw.zero_init_g2;
        let context = match cfg.context {
            ContextKind::None => ContextParams::None,
            ContextKind::Conv => ContextParams::Conv(ConvContextParams::new(
                &init,
                "context.conv",
                c,
                cfg.dgcw.hidden,
                cfg.dgcw.downsample_ratio,
                zero_last,
            )?),
            ContextKind::Gap => ContextParams::Gap(GapParams::new(&init, "context.gap", c)?),
            ContextKind::Se => ContextParams::Se(SeParams::new(&init, "context.se", c, cfg.se_reduction)?),
            ContextKind::Nlh => ContextParams::NonLocal(NonLocalParams::new(&init, "context.nl", c, None, zero_last)?),
            ContextKind::Nld => ContextParams::NonLocal(NonLocalParams::new(
                &init,
                "context.nl",
                c,
                Some(cfg.dgcw.downsample_ratio),
                zero_last,
            )?),
            ContextKind::Dgcw => ContextParams::Dgcw(DgcwParams::new(&init, "context.dgcw", c, &cfg.dgcw)?),
        };
        Ok(NetworkParams {
            backbone: Backbone::new(&init, "backbone", widths)?,
            head,
            reduce: ConvBn::new(&init, "reduce", head_out, c, 3, 1, 1)?,
            context,
            classifier: LinearParams::init(&init, "classifier", c, cfg.class_count)?,
            aux: ConvBn::new(&init, "aux", widths[2], c, 3, 1, 1)?,
            aux_classifier: LinearParams::init(&init, "aux_classifier", c, cfg.class_count)?,
        })
    }
}

impl Parameterized for NetworkParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        match &self.head {
            HeadParams::None => {}
            HeadParams::Ppm(p) => p.visit(&join(prefix, "head.ppm"), f),
            HeadParams::Aspp(p) => p.visit(&join(prefix, "head.aspp"), f),
        }
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.context.visit(&join(prefix, "context"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
        self.aux.visit(&join(prefix, "aux"), f);
        self.aux_classifier.visit(&join(prefix, "aux_classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        match &mut self.head {
            HeadParams::None => {}
            HeadParams::Ppm(p) => p.visit_mut(&join(prefix, "head.ppm"), f),
            HeadParams::Aspp(p) => p.visit_mut(&join(prefix, "head.aspp"), f),
        }
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.context.visit_mut(&join(prefix, "context"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
        self.aux.visit_mut(&join(prefix, "aux"), f);
        self.aux_classifier.visit_mut(&join(prefix, "aux_classifier"), f);
    }
}

/// Runs the backbone; returns (stage 3 features, stage 4 features).
pub fn backbone_forward(
    g: &Graph,
    image: Var,
    p: &mut Backbone,
    mode: Mode,
    batchnorm: bool,
) -> Result<(Var, Var)> {
    let s = g.shape(image);
    if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 || s[3] == 0 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "images must be N x 3 x H x W with H and W divisible by 8".into(),
        });
    }
    let ctx = Ctx { mode, batchnorm };
    let x = p.stem1.forward(g, image, &ctx, true)?;
    let mut x = p.stem2.forward(g, x, &ctx, true)?;
    let mut stage3 = x;
    for (i, block) in p.stages.iter_mut().enumerate() {
        x = block.forward(g, x, &ctx)?;
        if i == 2 {
            stage3 = x;
        }
    }
    Ok((stage3, x))
}

pub struct ForwardOutput {
    /// N x K x H x W at input resolution.
    pub main_logits: Var,
    pub aux_logits: Var,
    /// Context-module output at stride 8 (the classifier's input).
    pub features: Var,
}

pub fn dgcwnet_forward(
    g: &Graph,
    image: Var,
    cfg: &NetworkConfig,
    p: &mut NetworkParams,
    mode: Mode,
) -> Result<ForwardOutput> {
    let s = g.shape(image);
    let (h, w) = (s[2], s[3]);
    let (stage3, x) = backbone_forward(g, image, &mut p.backbone, mode, cfg.batchnorm)?;
    let ctx = Ctx {
        mode,
        batchnorm: cfg.batchnorm,
    };
    let x = match &p.head {
        HeadParams::None => x,
        HeadParams::Ppm(hp) => ppm_head(g, x, hp)?,
        HeadParams::Aspp(hp) => aspp_head(g, x, hp)?,
    };
    let x = p.reduce.forward(g, x, &ctx, true)?;
    let features = context_forward(g, x, &p.context, cfg.dgcw_impl)?;
    let logits = linear_1x1(g, features, &p.classifier)?;
    let main_logits = resample_bilinear(g, logits, h, w)?;
    let aux = p.aux.forward(g, stage3, &ctx, true)?;
    let aux_logits = resample_bilinear(g, linear_1x1(g, aux, &p.aux_classifier)?, h, w)?;
    Ok(ForwardOutput {
        main_logits,
        aux_logits,
        features,
    })
}

/// `CE(main) + aux_weight CE(aux)`; `keep` restricts the main term to
/// hard pixels.
pub fn total_loss(
    g: &Graph,
    out: &ForwardOutput,
    labels: &Labels,
    aux_weight: Real,
    keep: Option<&[bool]>,
) -> Result<(Var, Var, Var)> {
    let main = cross_entropy_masked(g, out.main_logits, labels, keep)?;
    let aux = cross_entropy(g, out.aux_logits, labels)?;
    let total = g.add(main, g.mul_scalar(aux, aux_weight)?)?;
    Ok((total, main, aux))
}
