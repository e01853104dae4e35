//! Distance guided channel weighting.
//!
//! For a feature map `F` (N x C x H x W) the module computes
//!
//! ```text
//! D       = downsample(F)                      N x C x h x w, P = h w
//! Q, K, V = Wq D, Wk D, Wv D                   N x P x C
//! M[c,i,j] = (Q[i,c] - K[j,c])^2
//! W[:,i,j] = f(M[:,i,j])                       normalized over channels
//! R[:,i,j] = g2 relu(g1 (W[:,i,j] * V[i]))
//! out     = F + upsample(sum_j R[:,i,j])
//! ```
//!
//! [`Impl::Naive`] builds this from generic graph operations and
//! materializes the N x C x P x P tensors. [`Impl::Fused`] streams over
//! blocks of partner pixels `j` and only ever holds `P x B x C` scratch.

use std::fmt;
use std::str::FromStr;

use crate::layers::{
    adaptive_avg_pool, join, linear_1x1, linear_1x1_vars, resample_bilinear, Init, LinearParams,
    Parameterized, Visitor, VisitorMut,
};
use crate::tensor::gemm;
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Denominator offset of the divide-by-sum normalization.
pub const DEFAULT_EPSILON: Real = if cfg!(feature = "f32") { 1e-6 } else { 1e-12 };

/// Default number of partner pixels per fused block.
pub const DEFAULT_BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Divide by the channel sum: `m / (sum_c m + eps)`.
    Dbs,
    /// Softmax over channels.
    Softmax,
    /// Elementwise `tanh(m)`.
    Tanh,
}

impl NormKind {
    pub const ALL: [NormKind; 3] = [NormKind::Dbs, NormKind::Softmax, NormKind::Tanh];
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dbs" => Ok(NormKind::Dbs),
            "softmax" => Ok(NormKind::Softmax),
            "tanh" => Ok(NormKind::Tanh),
            _ => Err(Error::invalid(format!("unknown norm kind {s:?} (dbs, softmax, tanh)"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Dbs => "dbs",
            NormKind::Softmax => "softmax",
            NormKind::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Impl {
    Naive,
    Fused,
}

impl FromStr for Impl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Impl::Naive),
            "fused" => Ok(Impl::Fused),
            _ => Err(Error::invalid(format!("unknown implementation {s:?} (naive, fused)"))),
        }
    }
}

impl fmt::Display for Impl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Impl::Naive => "naive",
            Impl::Fused => "fused",
        })
    }
}

/// How `D` is obtained from `F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// Average pooling, kernel = stride = ratio (adaptive bins otherwise).
    AvgPool,
    Bilinear,
}

impl FromStr for Downsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avgpool" => Ok(Downsample::AvgPool),
            "bilinear" => Ok(Downsample::Bilinear),
            _ => Err(Error::invalid(format!("unknown downsample method {s:?} (avgpool, bilinear)"))),
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Downsample::AvgPool => "avgpool",
            Downsample::Bilinear => "bilinear",
        })
    }
}

/// Hyperparameters of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct DgcwConfig {
    pub norm_kind: NormKind,
    pub downsample_ratio: usize,
    pub downsample: Downsample,
    /// Hidden width of g; 0 means "same as the input channels".
    pub hidden: usize,
    pub epsilon: Real,
    pub block: usize,
    /// Start g2 at zero so the module is an exact identity.
    pub zero_init_g2: bool,
}

impl Default for DgcwConfig {
    fn default() -> Self {
        DgcwConfig {
            norm_kind: NormKind::Dbs,
            downsample_ratio: 4,
            downsample: Downsample::AvgPool,
            hidden: 0,
            epsilon: DEFAULT_EPSILON,
            block: DEFAULT_BLOCK,
            zero_init_g2: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DgcwParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    /// C -> C_g, followed by ReLU.
    pub g1: LinearParams,
    /// C_g -> C.
    pub g2: LinearParams,
    pub norm_kind: NormKind,
    pub downsample_ratio: usize,
    pub downsample: Downsample,
    pub epsilon: Real,
    pub block: usize,
}

impl DgcwParams {
    pub fn new(init: &Init, name: &str, channels: usize, cfg: &DgcwConfig) -> Result<Self> {
        if cfg.downsample_ratio == 0 || cfg.block == 0 || cfg.epsilon.is_nan() || cfg.epsilon < 0.0 {
            return Err(Error::invalid(format!("invalid DGCW configuration {cfg:?}")));
        }
        let hidden = if cfg.hidden == 0 { channels } else { cfg.hidden };
        let g2_name = join(name, "g2");
        Ok(DgcwParams {
            wq: LinearParams::init(init, &join(name, "wq"), channels, channels)?,
            wk: LinearParams::init(init, &join(name, "wk"), channels, channels)?,
            wv: LinearParams::init(init, &join(name, "wv"), channels, channels)?,
            g1: LinearParams::init(init, &join(name, "g1"), channels, hidden)?,
            g2: if cfg.zero_init_g2 {
                LinearParams::zeros(hidden, channels)?
            } else {
                LinearParams::init(init, &g2_name, hidden, channels)?
            },
            norm_kind: cfg.norm_kind,
            downsample_ratio: cfg.downsample_ratio,
            downsample: cfg.downsample,
            epsilon: cfg.epsilon,
            block: cfg.block,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.g1.out_channels()
    }
}

impl Parameterized for DgcwParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.g1.visit(&join(prefix, "g1"), f);
        self.g2.visit(&join(prefix, "g2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.g1.visit_mut(&join(prefix, "g1"), f);
        self.g2.visit_mut(&join(prefix, "g2"), f);
    }
}

fn dims4(g: &Graph, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match g.shape(x)[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects N x C x H x W"),
        }),
    }
}

/// Reduces `F` by `ratio` with the given method. Extents are floored, so
/// non-divisible inputs use overlapping adaptive bins.
pub fn downsample(g: &Graph, f: Var, ratio: usize, method: Downsample) -> Result<Var> {
    let [_, _, h, w] = dims4(g, f, "downsample")?;
    if ratio == 0 || h < ratio || w < ratio {
        return Err(Error::InvalidShape {
            shape: g.shape(f),
            reason: format!("spatial extents must be at least the downsample ratio {ratio}"),
        });
    }
    match method {
        Downsample::AvgPool => adaptive_avg_pool(g, f, h / ratio, w / ratio),
        Downsample::Bilinear => resample_bilinear(g, f, h / ratio, w / ratio),
    }
}

/// N x C x h x w -> N x P x C.
pub fn to_rows(g: &Graph, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4(g, x, "to_rows")?;
    let flat = g.reshape(x, &[n, c, h * w])?;
    g.transpose(flat, 1, 2)
}

/// N x P x C -> N x C x h x w.
pub fn from_rows(g: &Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    let cols = g.transpose(x, 1, 2)?;
    g.reshape(cols, &[s[0], s[2], h, w])
}

/// Q, K, V (N x P x C) from the downsampled map `D`.
pub fn qkv_project(g: &Graph, d: Var, p: &DgcwParams) -> Result<(Var, Var, Var)> {
    let q = to_rows(g, linear_1x1(g, d, &p.wq)?)?;
    let k = to_rows(g, linear_1x1(g, d, &p.wk)?)?;
    let v = to_rows(g, linear_1x1(g, d, &p.wv)?)?;
    Ok((q, k, v))
}

/// `M[n, c, i, j] = (Q[n, i, c] - K[n, j, c])^2`, shape N x C x P x P.
pub fn channel_distance(g: &Graph, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q), g.shape(k));
    let [n, p, c] = qs[..] else {
        return Err(Error::ShapeMismatch {
            op: "channel_distance",
            lhs: qs,
            rhs: ks,
        });
    };
    if ks != qs {
        return Err(Error::ShapeMismatch {
            op: "channel_distance",
            lhs: qs,
            rhs: ks,
        });
    }
    let qi = g.reshape(g.transpose(q, 1, 2)?, &[n, c, p, 1])?;
    let kj = g.reshape(g.transpose(k, 1, 2)?, &[n, c, 1, p])?;
    Ok(g.square(g.sub(qi, kj)?))
}

/// Normalizes `M` (N x C x P x P) over the channel axis.
pub fn normalize_weights(g: &Graph, m: Var, kind: NormKind, epsilon: Real) -> Result<Var> {
    match kind {
        NormKind::Dbs => {
            let s = g.shape(m);
            let total = g.sum(m, 1)?;
            let total = g.reshape(total, &[s[0], 1, s[2], s[3]])?;
            g.div(m, g.add_scalar(total, epsilon)?)
        }
        NormKind::Softmax => g.softmax(m, 1),
        NormKind::Tanh => Ok(g.tanh(m)),
    }
}

/// `R[:, :, i, j] = g2 relu(g1 (W[:, :, i, j] * V[:, i]))`, N x C x P x P.
pub fn relationship(g: &Graph, w: Var, v: Var, p: &DgcwParams) -> Result<Var> {
    let s = g.shape(w);
    let vi = g.reshape(g.transpose(v, 1, 2)?, &[s[0], s[1], s[2], 1])?;
    let x = g.mul(w, vi)?;
    let hidden = g.relu(linear_1x1(g, x, &p.g1)?);
    linear_1x1(g, hidden, &p.g2)
}

/// `F + upsample(sum_j R)`, where R is N x C x P x P over an `h x w` grid.
pub fn aggregate(g: &Graph, r: Var, f: Var, h: usize, w: usize) -> Result<Var> {
    let [n, c, fh, fw] = dims4(g, f, "aggregate")?;
    let summed = g.sum(r, 3)?;
    let grid = g.reshape(summed, &[n, c, h, w])?;
    g.add(f, resample_bilinear(g, grid, fh, fw)?)
}

/// Full module forward pass.
pub fn dgcw_forward(g: &Graph, f: Var, p: &DgcwParams, imp: Impl) -> Result<Var> {
    let [_, c, _, _] = dims4(g, f, "dgcw_forward")?;
    if c != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "dgcw_forward",
            lhs: g.shape(f),
            rhs: vec![p.channels()],
        });
    }
    let d = downsample(g, f, p.downsample_ratio, p.downsample)?;
    let [_, _, h, w] = dims4(g, d, "dgcw_forward")?;
    let (q, k, v) = qkv_project(g, d, p)?;
    match imp {
        Impl::Naive => {
            let m = channel_distance(g, q, k)?;
            let wts = normalize_weights(g, m, p.norm_kind, p.epsilon)?;
            let r = relationship(g, wts, v, p)?;
            aggregate(g, r, f, h, w)
        }
        Impl::Fused => {
            let g1w = g.param(&p.g1.weight);
            let g1b = g.param(&p.g1.bias);
            let hsum = fused_hidden_sum(g, q, k, v, g1w, g1b, p.norm_kind, p.epsilon, p.block)?;
            // sum_j (G2 h_ij + b2) = G2 sum_j h_ij + P b2
            let hsum = g.transpose(hsum, 1, 2)?;
            let out = linear_1x1_vars(g, hsum, g.param(&p.g2.weight), None)?;
            let bias = g.mul_scalar(g.param(&p.g2.bias), (h * w) as Real)?;
            let bias = g.reshape(bias, &[1, c, 1])?;
            let summed = g.add(out, bias)?;
            let [n, _, fh, fw] = dims4(g, f, "dgcw_forward")?;
            let grid = g.reshape(summed, &[n, c, h, w])?;
            g.add(f, resample_bilinear(g, grid, fh, fw)?)
        }
    }
}

/// Per-pair channel weights for one `(i, j)`; returns the DBS denominator
/// (1 for the other kinds).
#[inline]
fn pair_weights(qi: &[Real], kj: &[Real], kind: NormKind, eps: Real, out: &mut [Real]) -> Real {
    for ((o, &a), &b) in out.iter_mut().zip(qi).zip(kj) {
        let d = a - b;
        *o = d * d;
    }
    match kind {
        NormKind::Dbs => {
            let s = out.iter().sum::<Real>() + eps;
            for o in out.iter_mut() {
                *o /= s;
            }
            s
        }
        NormKind::Softmax => {
            let max = out.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for o in out.iter_mut() {
                *o = (*o - max).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
            1.0
        }
        NormKind::Tanh => {
            for o in out.iter_mut() {
                *o = o.tanh();
            }
            1.0
        }
    }
}

/// Scratch for one block of partner pixels: all `P` query pixels against
/// `B` partners.
struct BlockScratch {
    /// `u = w * V_i`, (P * B) x C.
    u: Vec<Real>,
    /// Pre-activations `g1 u + b1`, (P * B) x C_g.
    a: Vec<Real>,
}

impl BlockScratch {
    fn new(p: usize, b: usize, c: usize, cg: usize) -> Self {
        BlockScratch {
            u: vec![0.0; p * b * c],
            a: vec![0.0; p * b * cg],
        }
    }
}

struct FusedDims {
    p: usize,
    c: usize,
    cg: usize,
    block: usize,
    kind: NormKind,
    eps: Real,
}

impl FusedDims {
    /// Fills `s.u` (and `w` when given) and the pre-activations `s.a` for
    /// partners `j0..j1`.
    fn block_forward(
        &self,
        (q, k, v): (&[Real], &[Real], &[Real]),
        (g1, b1): (&[Real], &[Real]),
        j0: usize,
        j1: usize,
        s: &mut BlockScratch,
        mut w: Option<&mut [Real]>,
    ) {
        let (p, c, cg) = (self.p, self.c, self.cg);
        let bl = j1 - j0;
        let mut wbuf = vec![0.0; c];
        for i in 0..p {
            let (qi, vi) = (&q[i * c..(i + 1) * c], &v[i * c..(i + 1) * c]);
            for (jj, j) in (j0..j1).enumerate() {
                let row = i * bl + jj;
                pair_weights(qi, &k[j * c..(j + 1) * c], self.kind, self.eps, &mut wbuf);
                for ((u, &wc), &vc) in s.u[row * c..(row + 1) * c].iter_mut().zip(&wbuf).zip(vi) {
                    *u = wc * vc;
                }
                if let Some(w) = w.as_deref_mut() {
                    w[row * c..(row + 1) * c].copy_from_slice(&wbuf);
                }
            }
        }
        let rows = p * bl;
        for row in s.a[..rows * cg].chunks_exact_mut(cg) {
            row.copy_from_slice(b1);
        }
        gemm(rows, c, cg, &s.u[..rows * c], false, g1, true, &mut s.a[..rows * cg], 1.0);
    }
}

/// `H[n, i] = sum_j relu(G1 (f(M[:, i, j]) * V[n, i]) + b1)`, N x P x C_g,
/// computed block by block over `j` without forming any C x P x P tensor.
#[allow(clippy::too_many_arguments)]
pub fn fused_hidden_sum(
    g: &Graph,
    q: Var,
    k: Var,
    v: Var,
    g1w: Var,
    g1b: Var,
    kind: NormKind,
    eps: Real,
    block: usize,
) -> Result<Var> {
    let (qv, kv, vv, wv, bv) = (g.value(q), g.value(k), g.value(v), g.value(g1w), g.value(g1b));
    let &[n, p, c] = qv.shape() else {
        return Err(Error::InvalidShape {
            shape: qv.shape().to_vec(),
            reason: "Q must be N x P x C".into(),
        });
    };
    let cg = wv.shape()[0];
    if kv.shape() != qv.shape() || vv.shape() != qv.shape() || wv.shape() != [cg, c] || bv.shape() != [cg] {
        return Err(Error::ShapeMismatch {
            op: "fused_hidden_sum",
            lhs: qv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    if block == 0 {
        return Err(Error::invalid("block size must be positive"));
    }
    let dims = FusedDims {
        p,
        c,
        cg,
        block: block.min(p),
        kind,
        eps,
    };
    let mut out = vec![0.0; n * p * cg];
    let mut scratch = BlockScratch::new(p, dims.block, c, cg);
    for ni in 0..n {
        let r = ni * p * c..(ni + 1) * p * c;
        let inputs = (&qv.data()[r.clone()], &kv.data()[r.clone()], &vv.data()[r]);
        let hn = &mut out[ni * p * cg..(ni + 1) * p * cg];
        for j0 in (0..p).step_by(dims.block) {
            let j1 = (j0 + dims.block).min(p);
            let bl = j1 - j0;
            dims.block_forward(inputs, (wv.data(), bv.data()), j0, j1, &mut scratch, None);
            for i in 0..p {
                let hi = &mut hn[i * cg..(i + 1) * cg];
                for jj in 0..bl {
                    let row = &scratch.a[(i * bl + jj) * cg..(i * bl + jj + 1) * cg];
                    for (h, &a) in hi.iter_mut().zip(row) {
                        if a > 0.0 {
                            *h += a;
                        }
                    }
                }
            }
        }
    }
    drop(scratch);
    let value = Tensor::from_parts(vec![n, p, cg], out);
    Ok(g.record(&[q, k, v, g1w, g1b], value, move |args| {
        let [qv, kv, vv, wv, bv] = args.inputs else { unreachable!() };
        let dh = args.grad.data();
        let mut dq = vec![0.0; n * p * c];
        let mut dk = vec![0.0; n * p * c];
        let mut dv = vec![0.0; n * p * c];
        let mut dg1 = vec![0.0; cg * c];
        let mut db1 = vec![0.0; cg];
        let bmax = dims.block;
        let mut s = BlockScratch::new(p, bmax, c, cg);
        let mut w = vec![0.0; p * bmax * c];
        let mut du = vec![0.0; p * bmax * c];
        let mut dm = vec![0.0; c];
        for ni in 0..n {
            let r = ni * p * c..(ni + 1) * p * c;
            let (qn, kn, vn) = (&qv.data()[r.clone()], &kv.data()[r.clone()], &vv.data()[r.clone()]);
            let dhn = &dh[ni * p * cg..(ni + 1) * p * cg];
            for j0 in (0..p).step_by(bmax) {
                let j1 = (j0 + bmax).min(p);
                let bl = j1 - j0;
                let rows = p * bl;
                dims.block_forward((qn, kn, vn), (wv.data(), bv.data()), j0, j1, &mut s, Some(&mut w));
                // Reuse the pre-activation buffer for dA.
                for i in 0..p {
                    let dhi = &dhn[i * cg..(i + 1) * cg];
                    for jj in 0..bl {
                        let row = &mut s.a[(i * bl + jj) * cg..(i * bl + jj + 1) * cg];
                        for (a, &d) in row.iter_mut().zip(dhi) {
                            *a = if *a > 0.0 { d } else { 0.0 };
                        }
                    }
                }
                let da = &s.a[..rows * cg];
                gemm(cg, rows, c, da, true, &s.u[..rows * c], false, &mut dg1, 1.0);
                for row in da.chunks_exact(cg) {
                    for (b, &d) in db1.iter_mut().zip(row) {
                        *b += d;
                    }
                }
                gemm(rows, cg, c, da, false, wv.data(), false, &mut du[..rows * c], 0.0);
                for i in 0..p {
                    let qi = &qn[i * c..(i + 1) * c];
                    let vi = &vn[i * c..(i + 1) * c];
                    for (jj, j) in (j0..j1).enumerate() {
                        let row = (i * bl + jj) * c;
                        let wr = &w[row..row + c];
                        let dur = &du[row..row + c];
                        let dvi = &mut dv[ni * p * c + i * c..ni * p * c + (i + 1) * c];
                        for ((d, &g), &wc) in dvi.iter_mut().zip(dur).zip(wr) {
                            *d += g * wc;
                        }
                        // dw = du * V_i, then back through the normalization.
                        match dims.kind {
                            NormKind::Dbs => {
                                let kj = &kn[j * c..(j + 1) * c];
                                let total: Real = qi.iter().zip(kj).map(|(a, b)| (a - b) * (a - b)).sum::<Real>() + dims.eps;
                                // dm = dw / T - sum(dw w) / T, in that order.
                                for x in 0..c {
                                    dm[x] = dur[x] * vi[x] / total;
                                }
                                let dot: Real = (0..c).map(|x| dm[x] * wr[x]).sum();
                                for v in dm.iter_mut() {
                                    *v -= dot;
                                }
                            }
                            NormKind::Softmax => {
                                let dot: Real = (0..c).map(|x| dur[x] * vi[x] * wr[x]).sum();
                                for x in 0..c {
                                    dm[x] = wr[x] * (dur[x] * vi[x] - dot);
                                }
                            }
                            NormKind::Tanh => {
                                for x in 0..c {
                                    dm[x] = dur[x] * vi[x] * (1.0 - wr[x] * wr[x]);
                                }
                            }
                        }
                        let base = ni * p * c;
                        for x in 0..c {
                            let dd = 2.0 * (qi[x] - kn[j * c + x]) * dm[x];
                            dq[base + i * c + x] += dd;
                            dk[base + j * c + x] -= dd;
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        Ok(vec![
            Some(Tensor::from_parts(shape.clone(), dq)),
            Some(Tensor::from_parts(shape.clone(), dk)),
            Some(Tensor::from_parts(shape, dv)),
            Some(Tensor::from_parts(wv.shape().to_vec(), dg1)),
            Some(Tensor::from_parts(vec![cg], db1)),
        ])
    }))
}
