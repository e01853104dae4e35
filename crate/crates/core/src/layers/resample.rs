use super::Labels;
use crate::{Error, Graph, Real, Result, Tensor, Var};

fn spatial(g: &Graph, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match g.shape(x)[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects N x C x H x W"),
        }),
    }
}

/// Bin `[start, end)` of output cell `i` when pooling `input` cells into
/// `output` cells.
fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Average pooling onto an `oh x ow` grid with adaptive bins
/// (`floor(i H / oh)` to `ceil((i + 1) H / oh)`). When the ratio divides
/// the extent this is pooling with kernel = stride = ratio.
pub fn adaptive_avg_pool(g: &Graph, x: Var, oh: usize, ow: usize) -> Result<Var> {
    let [n, c, h, w] = spatial(g, x, "adaptive_avg_pool")?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::invalid(format!(
            "cannot pool {h}x{w} onto {oh}x{ow}"
        )));
    }
    let xv = g.value(x);
    let src = xv.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut s = 0.0;
                for iy in y0..y1 {
                    s += src[base + iy * w + x0..base + iy * w + x1].iter().sum::<Real>();
                }
                out[(plane * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as Real;
            }
        }
    }
    let value = Tensor::from_parts(vec![n, c, oh, ow], out);
    Ok(g.record(&[x], value, move |args| {
        let gd = args.grad.data();
        let mut gx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1) = adaptive_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_bin(ox, w, ow);
                    let share = gd[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as Real;
                    for iy in y0..y1 {
                        for v in &mut gx[base + iy * w + x0..base + iy * w + x1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))])
    }))
}

/// Mean over the spatial axes, keeping them as 1 x 1.
pub fn global_avg_pool(g: &Graph, x: Var) -> Result<Var> {
    adaptive_avg_pool(g, x, 1, 1)
}

/// Interpolation taps along one axis for the half-pixel
/// (`align_corners = false`) convention: `src = (dst + 0.5) * in / out - 0.5`,
/// clamped at 0.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, Real)> {
    let scale = input as Real / output as Real;
    (0..output)
        .map(|o| {
            let src = ((o as Real + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as Real)
        })
        .collect()
}

/// Bilinear resampling to `oh x ow` (half-pixel centers, no
/// antialiasing). Used for both up- and downsampling.
pub fn resample_bilinear(g: &Graph, x: Var, oh: usize, ow: usize) -> Result<Var> {
    let [n, c, h, w] = spatial(g, x, "resample_bilinear")?;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("resample target must be positive"));
    }
    if (oh, ow) == (h, w) {
        return Ok(x);
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let xv = g.value(x);
    let src = xv.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = (1.0 - lx) * src[base + y0 * w + x0] + lx * src[base + y0 * w + x1];
                let bottom = (1.0 - lx) * src[base + y1 * w + x0] + lx * src[base + y1 * w + x1];
                out[(plane * oh + oy) * ow + ox] = (1.0 - ly) * top + ly * bottom;
            }
        }
    }
    let value = Tensor::from_parts(vec![n, c, oh, ow], out);
    Ok(g.record(&[x], value, move |args| {
        let gd = args.grad.data();
        let mut gx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let base = plane * h * w;
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let go = gd[(plane * oh + oy) * ow + ox];
                    gx[base + y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                    gx[base + y0 * w + x1] += go * (1.0 - ly) * lx;
                    gx[base + y1 * w + x0] += go * ly * (1.0 - lx);
                    gx[base + y1 * w + x1] += go * ly * lx;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))])
    }))
}

/// Nearest-neighbour resize of a label map (`src = floor(dst * in / out)`).
pub fn resize_nearest(labels: &Labels, oh: usize, ow: usize) -> Result<Labels> {
    let [n, h, w] = labels.shape();
    let mut data = Vec::with_capacity(n * oh * ow);
    for ni in 0..n {
        for oy in 0..oh {
            let iy = (oy * h / oh).min(h - 1);
            for ox in 0..ow {
                let ix = (ox * w / ow).min(w - 1);
                data.push(labels.data()[(ni * h + iy) * w + ix]);
            }
        }
    }
    Labels::new([n, oh, ow], data)
}
