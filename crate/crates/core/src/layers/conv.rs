use super::{Conv2dParams, LinearParams};
use crate::tensor::gemm;
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Per-pixel affine map over the channel axis (axis 1) of a tensor of
/// rank >= 2: `y[n, o, ...] = sum_c w[o, c] x[n, c, ...] + b[o]`.
pub fn linear_1x1(g: &Graph, x: Var, p: &LinearParams) -> Result<Var> {
    let w = g.param(&p.weight);
    let b = g.param(&p.bias);
    linear_1x1_vars(g, x, w, Some(b))
}

/// [`linear_1x1`] on explicit graph variables; `bias` may be omitted.
pub fn linear_1x1_vars(g: &Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let xv = g.value(x);
    let wv = g.value(weight);
    let shape = xv.shape().to_vec();
    if shape.len() < 2 || wv.rank() != 2 || wv.shape()[1] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "linear_1x1",
            lhs: shape,
            rhs: wv.shape().to_vec(),
        });
    }
    let (n, c, o) = (shape[0], shape[1], wv.shape()[0]);
    let s: usize = shape[2..].iter().product();
    let bv = match bias {
        Some(b) => {
            let bv = g.value(b);
            if bv.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "linear_1x1 bias",
                    lhs: vec![o],
                    rhs: bv.shape().to_vec(),
                });
            }
            Some(bv)
        }
        None => None,
    };
    let mut out = vec![0.0; n * o * s];
    for ni in 0..n {
        let dst = &mut out[ni * o * s..(ni + 1) * o * s];
        if let Some(bv) = &bv {
            for (oi, row) in dst.chunks_exact_mut(s).enumerate() {
                row.fill(bv.data()[oi]);
            }
        }
        let beta = if bv.is_some() { 1.0 } else { 0.0 };
        gemm(o, c, s, wv.data(), false, &xv.data()[ni * c * s..(ni + 1) * c * s], false, dst, beta);
    }
    let mut out_shape = shape.clone();
    out_shape[1] = o;
    let value = Tensor::from_parts(out_shape, out);
    let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
    Ok(g.record(&inputs, value, move |args| {
        let (xv, wv, gd) = (&args.inputs[0], &args.inputs[1], args.grad.data());
        let mut gx = args.needs[0].then(|| vec![0.0; n * c * s]);
        let mut gw = args.needs[1].then(|| vec![0.0; o * c]);
        let mut gb = (args.needs.len() > 2 && args.needs[2]).then(|| vec![0.0; o]);
        for ni in 0..n {
            let gn = &gd[ni * o * s..(ni + 1) * o * s];
            if let Some(gx) = gx.as_mut() {
                gemm(c, o, s, wv.data(), true, gn, false, &mut gx[ni * c * s..(ni + 1) * c * s], 0.0);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(o, s, c, gn, false, &xv.data()[ni * c * s..(ni + 1) * c * s], true, gw, 1.0);
            }
            if let Some(gb) = gb.as_mut() {
                for (oi, row) in gn.chunks_exact(s).enumerate() {
                    gb[oi] += row.iter().sum::<Real>();
                }
            }
        }
        let mut grads = vec![
            gx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
            gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
        ];
        if args.inputs.len() > 2 {
            grads.push(gb.map(|d| Tensor::from_parts(vec![o], d)));
        }
        Ok(grads)
    }))
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when the convolution is a plain per-pixel matmul.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside.
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let l = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * l;
                    for oy in 0..self.oh {
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        match self.source(oy, ki, self.h) {
                            None => dst.fill(0.0),
                            Some(iy) => {
                                let src = &x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self.source(ox, kj, self.w).map_or(0.0, |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[Real], x: &mut [Real]) {
        let l = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * l;
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ki, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kj, self.w) {
                                x[(ci * self.h + iy) * self.w + ix] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (N x C x H x W) with `p.weight`
/// (O x C x kh x kw); output extents `(H + 2p - d(k-1) - 1) / s + 1`.
pub fn conv2d(g: &Graph, x: Var, p: &Conv2dParams) -> Result<Var> {
    let xv = g.value(x);
    let (wv, bv) = (&p.weight, &p.bias);
    let bad = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: xv.shape().to_vec(),
        rhs: wv.shape().to_vec(),
    };
    let &[n, c, h, w] = xv.shape() else { return Err(bad()) };
    if wv.rank() != 4 || wv.shape()[1] != c || bv.shape() != [wv.shape()[0]] || p.stride == 0 || p.dilation == 0 {
        return Err(bad());
    }
    let (o, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
    let (Some(oh), Some(ow)) = (p.out_extent(h, kh), p.out_extent(w, kw)) else {
        return Err(bad());
    };
    let geo = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        stride: p.stride,
        padding: p.padding,
        dilation: p.dilation,
    };
    let (rows, l) = (geo.rows(), geo.cols());
    let mut out = vec![0.0; n * o * l];
    let mut cols = if geo.pointwise() { Vec::new() } else { vec![0.0; rows * l] };
    for ni in 0..n {
        let xn = &xv.data()[ni * c * h * w..(ni + 1) * c * h * w];
        let colsn: &[Real] = if geo.pointwise() {
            xn
        } else {
            geo.im2col(xn, &mut cols);
            &cols
        };
        let dst = &mut out[ni * o * l..(ni + 1) * o * l];
        for (oi, row) in dst.chunks_exact_mut(l).enumerate() {
            row.fill(bv.data()[oi]);
        }
        gemm(o, rows, l, wv.data(), false, colsn, false, dst, 1.0);
    }
    let value = Tensor::from_parts(vec![n, o, oh, ow], out);
    let wvar = g.param(wv);
    let bvar = g.param(bv);
    Ok(g.record(&[x, wvar, bvar], value, move |args| {
        let (xv, wv, gd) = (&args.inputs[0], &args.inputs[1], args.grad.data());
        let mut gx = args.needs[0].then(|| vec![0.0; xv.numel()]);
        let mut gw = args.needs[1].then(|| vec![0.0; wv.numel()]);
        let mut gb = args.needs[2].then(|| vec![0.0; o]);
        let mut cols = if geo.pointwise() { Vec::new() } else { vec![0.0; rows * l] };
        let mut dcols = vec![0.0; rows * l];
        for ni in 0..n {
            let gn = &gd[ni * o * l..(ni + 1) * o * l];
            let xn = &xv.data()[ni * c * h * w..(ni + 1) * c * h * w];
            if let Some(gw) = gw.as_mut() {
                let colsn: &[Real] = if geo.pointwise() {
                    xn
                } else {
                    geo.im2col(xn, &mut cols);
                    &cols
                };
                gemm(o, l, rows, gn, false, colsn, true, gw, 1.0);
            }
            if let Some(gb) = gb.as_mut() {
                for (oi, row) in gn.chunks_exact(l).enumerate() {
                    gb[oi] += row.iter().sum::<Real>();
                }
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[ni * c * h * w..(ni + 1) * c * h * w];
                if geo.pointwise() {
                    gemm(rows, o, l, wv.data(), true, gn, false, gxn, 0.0);
                } else {
                    gemm(rows, o, l, wv.data(), true, gn, false, &mut dcols, 0.0);
                    geo.col2im(&dcols, gxn);
                }
            }
        }
        Ok(vec![
            gx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
            gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(vec![o], d)),
        ])
    }))
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::layers::Init;
    use crate::tensor::gradcheck::gradcheck;
    use crate::testutil::rand_tensor;

    fn run(x: &Tensor, f: impl Fn(&Graph, Var) -> Result<Var>) -> Tensor {
        let g = Graph::new();
        let v = g.constant(x.clone());
        g.value(f(&g, v).unwrap())
    }

    #[test]
    fn linear_identity_and_constant() {
        let x = rand_tensor(&[2, 3, 4, 5], 1);
        let id = LinearParams::identity(3).unwrap();
        assert!(run(&x, |g, v| linear_1x1(g, v, &id)).bit_eq(&x));
        let p = LinearParams {
            weight: Tensor::zeros([2, 3]).unwrap(),
            bias: Tensor::new([2], vec![0.5, -1.5]).unwrap(),
        };
        let y = run(&x, |g, v| linear_1x1(g, v, &p));
        for n in 0..2 {
            for i in 0..20 {
                assert_eq!(y.data()[(n * 2) * 20 + i], 0.5);
                assert_eq!(y.data()[(n * 2 + 1) * 20 + i], -1.5);
            }
        }
    }

    #[test]
    fn linear_matches_per_pixel_matmul() {
        let x = rand_tensor(&[2, 3, 2, 3], 2);
        let p = LinearParams {
            weight: rand_tensor(&[4, 3], 3),
            bias: rand_tensor(&[4], 4),
        };
        let y = run(&x, |g, v| linear_1x1(g, v, &p));
        for n in 0..2 {
            for s in 0..6 {
                for o in 0..4 {
                    let mut acc = p.bias.data()[o];
                    for c in 0..3 {
                        acc += p.weight.at(&[o, c]) * x.data()[(n * 3 + c) * 6 + s];
                    }
                    let got = y.data()[(n * 4 + o) * 6 + s];
                    assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1.0));
                }
            }
        }
    }

    fn sliding_window(x: &Tensor, p: &Conv2dParams) -> Tensor {
        let [n, c, h, w] = x.shape()[..] else { unreachable!() };
        let (o, (kh, kw)) = (p.out_channels(), p.kernel());
        let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
        let ow = (w + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = p.bias.data()[oi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                    let ix = (xx * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += p.weight.at(&[oi, ci, ky, kx]) * x.at(&[ni, ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                        out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        Tensor::new([n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_sliding_window() {
        let init = Init::new(9);
        for (stride, dilation) in [(1, 2), (2, 1), (1, 1), (2, 3)] {
            let mut p = Conv2dParams::init(&init, "c", 3, 4, 3, stride, dilation).unwrap();
            p.bias = rand_tensor(&[4], 5);
            let x = rand_tensor(&[2, 3, 9, 8], 6);
            let y = run(&x, |g, v| conv2d(g, v, &p));
            let want = sliding_window(&x, &p);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_rel_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_degenerate_kernels() {
        let x = rand_tensor(&[1, 3, 5, 5], 7);
        let init = Init::new(1);
        let p1 = Conv2dParams::init(&init, "k1", 3, 2, 1, 1, 1).unwrap();
        let lin = LinearParams {
            weight: p1.weight.reshape([2, 3]).unwrap(),
            bias: p1.bias.clone(),
        };
        assert!(run(&x, |g, v| conv2d(g, v, &p1)).bit_eq(&run(&x, |g, v| linear_1x1(g, v, &lin))));

        let mut delta = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            delta[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let mut p = Conv2dParams::init(&init, "d", 3, 3, 3, 1, 2).unwrap();
        p.weight = Tensor::new([3, 3, 3, 3], delta).unwrap();
        assert!(run(&x, |g, v| conv2d(g, v, &p)).max_rel_diff(&x).unwrap() == 0.0);
    }

    #[test]
    fn gradients() {
        let x = rand_tensor(&[2, 2, 5, 4], 10);
        let w = rand_tensor(&[3, 2, 3, 3], 11);
        let b = rand_tensor(&[3], 12);
        for (stride, dilation) in [(1, 2), (2, 1)] {
            let err = gradcheck(
                |g, xs| {
                    let p = Conv2dParams {
                        weight: xs[1].clone(),
                        bias: xs[2].clone(),
                        stride,
                        padding: dilation,
                        dilation,
                    };
                    let y = conv2d(g, g.param(&xs[0]), &p)?;
                    g.sum_all(g.square(y))
                },
                &[x.clone(), w.clone(), b.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-5, "conv s{stride} d{dilation}: {err}");
        }
        let lw = rand_tensor(&[3, 2], 13);
        let err = gradcheck(
            |g, xs| {
                let y = linear_1x1_vars(g, g.param(&xs[0]), g.param(&xs[1]), Some(g.param(&xs[2])))?;
                g.sum_all(g.tanh(y))
            },
            &[x, lw, b],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "linear: {err}");
    }
}
