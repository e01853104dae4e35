//! SGD with momentum and a poly schedule, OHEM pixel selection,
//! augmentation, the procedural synthetic dataset and the training loop.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::layers::{correct_class_probs, resample_bilinear, resize_nearest, save_checkpoint, Labels, Parameterized};
use crate::metrics::{argmax_labels, miou, ConfusionMatrix};
use crate::network::{dgcwnet_forward, total_loss, Mode, NetworkConfig, NetworkParams};
use crate::rng::KeyedRng;
use crate::tensor::io::{self as tio, DType};
use crate::tensor::ops;
use crate::{Error, Graph, Real, Result, Tensor, IGNORE_INDEX};

pub const POLY_POWER: Real = 0.9;

/// `base_lr (1 - iter / max_iter)^0.9`.
pub fn poly_lr(base_lr: Real, iter: usize, max_iter: usize) -> Result<Real> {
    if iter > max_iter {
        return Err(Error::invalid(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    if max_iter == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as Real / max_iter as Real).powf(POLY_POWER))
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub base_lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub iter: usize,
    pub max_iter: usize,
    velocity: HashMap<String, Tensor>,
}

impl OptimState {
    pub fn new(base_lr: Real, momentum: Real, weight_decay: Real, max_iter: usize) -> Self {
        OptimState {
            base_lr,
            momentum,
            weight_decay,
            iter: 0,
            max_iter,
            velocity: HashMap::new(),
        }
    }

    /// Learning rate for the current iteration.
    pub fn lr(&self) -> Result<Real> {
        poly_lr(self.base_lr, self.iter, self.max_iter)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// Gradients of every trainable parameter that took part in `g`, by name.
pub fn collect_grads(g: &Graph, params: &dyn Parameterized) -> HashMap<String, Tensor> {
    let mut out = HashMap::new();
    params.visit("", &mut |name, role, t| {
        if role.trainable() {
            if let Some(gr) = g.grad_of(t) {
                out.insert(name.to_string(), gr);
            }
        }
    });
    out
}

/// `v <- momentum v + grad + wd param; param <- param - lr v`, with weight
/// decay skipped for normalization scale and shift. A parameter without a
/// gradient is treated as having a zero gradient. Advances `state.iter`.
pub fn sgd_step(
    params: &mut dyn Parameterized,
    grads: &HashMap<String, Tensor>,
    state: &mut OptimState,
    lr: Real,
) -> Result<()> {
    let (mu, wd) = (state.momentum, state.weight_decay);
    let velocity = &mut state.velocity;
    let mut failure = None;
    params.visit_mut("", &mut |name, role, t| {
        if !role.trainable() || failure.is_some() {
            return;
        }
        let grad = grads.get(name);
        if let Some(gr) = grad {
            if gr.shape() != t.shape() {
                failure = Some(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: t.shape().to_vec(),
                    rhs: gr.shape().to_vec(),
                });
                return;
            }
        }
        let decay = if role.decays() { wd } else { 0.0 };
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(t.shape().to_vec()).expect("parameter shape is valid"));
        let mut vd = v.to_vec();
        let mut pd = t.to_vec();
        for i in 0..pd.len() {
            let gi = grad.map_or(0.0, |g| g.data()[i]);
            vd[i] = mu * vd[i] + gi + decay * pd[i];
            pd[i] -= lr * vd[i];
        }
        *v = Tensor::new(t.shape().to_vec(), vd).expect("shape unchanged");
        *t = Tensor::new(t.shape().to_vec(), pd).expect("shape unchanged");
    });
    if let Some(e) = failure {
        return Err(e);
    }
    state.iter += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhemConfig {
    pub theta: Real,
    pub min_kept: usize,
}

/// Keeps every pixel whose correct-class probability is below `theta`;
/// when fewer than `min(min_kept, valid)` qualify, keeps that many of the
/// lowest-probability pixels instead (ties to the lower index). `None`
/// marks an ignored pixel, never kept.
pub fn ohem_filter(probs: &[Option<Real>], theta: Real, min_kept: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = probs.iter().map(|p| p.is_some_and(|p| p < theta)).collect();
    let valid: Vec<(usize, Real)> = probs.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i, p))).collect();
    let need = min_kept.min(valid.len());
    if keep.iter().filter(|&&k| k).count() < need {
        let mut order = valid;
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        keep.iter_mut().for_each(|k| *k = false);
        for &(i, _) in &order[..need] {
            keep[i] = true;
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub crop: usize,
    pub scale_min: Real,
    pub scale_max: Real,
    pub flip: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            crop: 64,
            scale_min: 0.5,
            scale_max: 2.0,
            flip: true,
        }
    }
}

fn resize_image(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [c, ih, iw] = chw(img)?;
    if (h, w) == (ih, iw) {
        return Ok(img.clone());
    }
    let g = Graph::no_grad();
    let v = resample_bilinear(&g, g.constant(img.reshape([1, c, ih, iw])?), h, w)?;
    g.value(v).reshape([c, h, w])
}

fn chw(img: &Tensor) -> Result<[usize; 3]> {
    match *img.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a C x H x W image".into(),
        }),
    }
}

/// Deterministic part of augmentation: rescale, optional mirror, then a
/// `crop x crop` window at `(top, left)` of the image padded on the
/// bottom and right (0 for pixels, ignore for labels).
pub fn augment_with(
    image: &Tensor,
    labels: &Labels,
    scale: Real,
    flip: bool,
    crop: usize,
    top: usize,
    left: usize,
) -> Result<(Tensor, Labels)> {
    let [c, h, w] = chw(image)?;
    if labels.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: image.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let sh = ((h as Real * scale).round() as usize).max(1);
    let sw = ((w as Real * scale).round() as usize).max(1);
    let mut img = resize_image(image, sh, sw)?;
    let mut lbl = resize_nearest(labels, sh, sw)?;
    if flip {
        img = ops::flip(&img, 2)?;
        lbl = lbl.flip_horizontal();
    }
    let (ph, pw) = (sh.max(crop), sw.max(crop));
    if top + crop > ph || left + crop > pw {
        return Err(Error::invalid(format!("crop at ({top}, {left}) leaves the {ph}x{pw} canvas")));
    }
    let (id, ld) = (img.data(), lbl.data());
    let mut out = vec![0.0; c * crop * crop];
    let mut out_l = vec![IGNORE_INDEX; crop * crop];
    for y in 0..crop {
        let sy = top + y;
        if sy >= sh {
            continue;
        }
        for x in 0..crop {
            let sx = left + x;
            if sx >= sw {
                continue;
            }
            for ch in 0..c {
                out[(ch * crop + y) * crop + x] = id[(ch * sh + sy) * sw + sx];
            }
            out_l[y * crop + x] = ld[sy * sw + sx];
        }
    }
    Ok((Tensor::new([c, crop, crop], out)?, Labels::new([1, crop, crop], out_l)?))
}

/// Random scale in `[scale_min, scale_max]`, mirror with probability 1/2
/// and a random crop.
pub fn augment(image: &Tensor, labels: &Labels, spec: &AugmentSpec, rng: &mut KeyedRng) -> Result<(Tensor, Labels)> {
    let [_, h, w] = chw(image)?;
    let scale = rng.uniform(spec.scale_min, spec.scale_max);
    let flip = spec.flip && rng.bernoulli(0.5);
    let sh = ((h as Real * scale).round() as usize).max(1);
    let sw = ((w as Real * scale).round() as usize).max(1);
    let top = rng.below(sh.max(spec.crop) - spec.crop + 1);
    let left = rng.below(sw.max(spec.crop) - spec.crop + 1);
    augment_with(image, labels, scale, flip, spec.crop, top, left)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Parameters of the procedural dataset.
///
/// Class 0 is background. Classes 1 and 2 share one texture and differ
/// only in outline (disc versus rectangle); class 3 has the background's
/// colour and differs only in texture and its full-span band shape.
/// Further classes get distinct colours and cycle through the shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub class_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: Real,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            class_count: 4,
            shapes_min: 2,
            shapes_max: 4,
            noise: 0.05,
            seed: 0,
            train_count: 256,
            val_count: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.class_count < 2 || self.class_count > 255 {
            return Err(Error::invalid("synthetic data needs image_size >= 8 and 2..=255 classes"));
        }
        if self.shapes_min > self.shapes_max || self.noise < 0.0 || self.noise.is_nan() {
            return Err(Error::invalid("shapes_min must not exceed shapes_max; noise must be >= 0"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
        }
    }
}

/// Stripe texture: colour plus a sinusoid along a direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub color: [Real; 3],
    /// Cycles per pixel.
    pub frequency: Real,
    /// Radians.
    pub orientation: Real,
    pub amplitude: Real,
}

pub const BACKGROUND_COLOR: [Real; 3] = [0.45, 0.45, 0.5];

pub fn class_texture(class: u32) -> Texture {
    let shared = Texture {
        color: [0.75, 0.35, 0.3],
        frequency: 0.22,
        orientation: std::f64::consts::FRAC_PI_4 as Real,
        amplitude: 0.12,
    };
    match class {
        0 => Texture {
            color: BACKGROUND_COLOR,
            frequency: 0.0,
            orientation: 0.0,
            amplitude: 0.0,
        },
        1 | 2 => shared,
        3 => Texture {
            color: BACKGROUND_COLOR,
            frequency: 0.15,
            orientation: 0.0,
            amplitude: 0.2,
        },
        k => {
            let hue = (k as Real * 0.618).fract() * std::f64::consts::TAU as Real;
            Texture {
                color: [
                    0.5 + 0.3 * hue.cos(),
                    0.5 + 0.3 * (hue + 2.1).cos(),
                    0.5 + 0.3 * (hue + 4.2).cos(),
                ],
                frequency: 0.05 + 0.03 * (k % 5) as Real,
                orientation: k as Real * 0.7,
                amplitude: 0.1,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Disc { cx: Real, cy: Real, r: Real },
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    /// Full-span band `[start, start + width)` across rows or columns.
    Band { vertical: bool, start: usize, width: usize },
}

impl ShapeKind {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            ShapeKind::Disc { cx, cy, r } => {
                let (dx, dy) = (x as Real + 0.5 - cx, y as Real + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
            ShapeKind::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            ShapeKind::Band { vertical, start, width } => {
                let t = if vertical { x } else { y };
                (start..start + width).contains(&t)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub class: u32,
    pub phase: Real,
}

/// Geometry of one image, painted in order (later shapes on top).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Background brightness ramp: direction (radians) and amplitude.
    pub ramp: (Real, Real),
    pub shapes: Vec<SceneShape>,
}

fn shape_for(class: u32, s: usize, rng: &mut KeyedRng) -> ShapeKind {
    let sf = s as Real;
    let variant = match class {
        1 => 0,
        2 => 1,
        3 => 2,
        k => k % 3,
    };
    match variant {
        0 => ShapeKind::Disc {
            cx: rng.uniform(0.15 * sf, 0.85 * sf),
            cy: rng.uniform(0.15 * sf, 0.85 * sf),
            r: rng.uniform(sf / 8.0, sf / 4.0),
        },
        1 => {
            let w = (s / 4 + rng.below(s / 4 + 1)).max(2);
            let h = (s / 4 + rng.below(s / 4 + 1)).max(2);
            let x0 = rng.below(s - w + 1);
            let y0 = rng.below(s - h + 1);
            ShapeKind::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        _ => {
            let width = (s / 8 + rng.below(s / 10 + 1)).max(1);
            ShapeKind::Band {
                vertical: rng.bernoulli(0.5),
                start: rng.below(s - width + 1),
                width,
            }
        }
    }
}

pub fn sample_scene(spec: &SynthSpec, split: Split, index: usize) -> Scene {
    let mut rng = KeyedRng::new(spec.seed, &format!("synth-{}", split.name()), index as u64);
    let count = spec.shapes_min + rng.below(spec.shapes_max - spec.shapes_min + 1);
    let ramp = (rng.uniform(0.0, std::f64::consts::TAU as Real), rng.uniform(0.0, 0.1));
    let shapes = (0..count)
        .map(|_| {
            let class = 1 + rng.below(spec.class_count - 1) as u32;
            SceneShape {
                kind: shape_for(class, spec.image_size, &mut rng),
                class,
                phase: rng.uniform(0.0, std::f64::consts::TAU as Real),
            }
        })
        .collect();
    Scene { ramp, shapes }
}

/// Paints a scene; pixel values are rounded to f32 so that in-memory and
/// on-disk datasets agree exactly.
pub fn render_scene(spec: &SynthSpec, scene: &Scene, noise_rng: &mut KeyedRng) -> Result<(Tensor, Labels)> {
    let s = spec.image_size;
    let mut labels = vec![0u32; s * s];
    let mut phase = vec![0.0; s * s];
    for sh in &scene.shapes {
        for y in 0..s {
            for x in 0..s {
                if sh.kind.contains(x, y) {
                    labels[y * s + x] = sh.class;
                    phase[y * s + x] = sh.phase;
                }
            }
        }
    }
    let (dir, amp) = scene.ramp;
    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = y * s + x;
            let tex = class_texture(labels[p]);
            let (xf, yf) = (x as Real, y as Real);
            let along = xf * tex.orientation.cos() + yf * tex.orientation.sin();
            let wave = tex.amplitude * (std::f64::consts::TAU as Real * tex.frequency * along + phase[p]).sin();
            let ramp = amp * ((xf * dir.cos() + yf * dir.sin()) / s as Real - 0.5);
            for c in 0..3 {
                let noise = if spec.noise > 0.0 { spec.noise * noise_rng.normal() } else { 0.0 };
                let v = (tex.color[c] + wave + ramp + noise).clamp(0.0, 1.0);
                img[(c * s + y) * s + x] = v as f32 as Real;
            }
        }
    }
    Ok((Tensor::new([3, s, s], img)?, Labels::new([1, s, s], labels)?))
}

/// Image `index` of `split`: a 3 x S x S tensor in [0, 1] and its labels.
pub fn gen_synthetic(spec: &SynthSpec, split: Split, index: usize) -> Result<(Tensor, Labels)> {
    spec.validate()?;
    let scene = sample_scene(spec, split, index);
    let mut rng = KeyedRng::new(spec.seed, &format!("synth-noise-{}", split.name()), index as u64);
    render_scene(spec, &scene, &mut rng)
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<Labels>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn synthetic(spec: &SynthSpec, split: Split) -> Result<Self> {
        let mut ds = Dataset::default();
        for i in 0..spec.count(split) {
            let (img, lbl) = gen_synthetic(spec, split, i)?;
            ds.images.push(img);
            ds.labels.push(lbl);
        }
        Ok(ds)
    }

    pub fn image_path(dir: &Path, split: Split, index: usize) -> PathBuf {
        dir.join(format!("img_{}_{index}.dgt", split.name()))
    }

    pub fn label_path(dir: &Path, split: Split, index: usize) -> PathBuf {
        dir.join(format!("lbl_{}_{index}.dgt", split.name()))
    }

    /// Writes `img_<split>_<i>.dgt` (f32, 3 x S x S) and `lbl_<split>_<i>.dgt`
    /// (f32, S x S) pairs.
    pub fn save(&self, dir: &Path, split: Split) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, (img, lbl)) in self.images.iter().zip(&self.labels).enumerate() {
            tio::write(&Self::image_path(dir, split, i), img, DType::F32)?;
            let [_, h, w] = lbl.shape();
            tio::write(&Self::label_path(dir, split, i), &lbl.to_tensor().reshape([h, w])?, DType::F32)?;
        }
        Ok(())
    }

    /// Reads consecutive pairs from index 0 until the first missing image.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let mut ds = Dataset::default();
        loop {
            let ip = Self::image_path(dir, split, ds.len());
            if !ip.exists() {
                break;
            }
            let (img, _) = tio::read(&ip)?;
            let (lbl, _) = tio::read(&Self::label_path(dir, split, ds.len()))?;
            let lbl = Labels::from_tensor(&lbl)?;
            let [c, h, w] = chw(&img)?;
            if c != 3 || lbl.shape() != [1, h, w] {
                return Err(Error::Format {
                    what: "dataset",
                    reason: format!("{}: image must be 3 x S x S with a matching S x S label map", ip.display()),
                });
            }
            ds.images.push(img);
            ds.labels.push(lbl);
        }
        if ds.is_empty() {
            return Err(Error::Format {
                what: "dataset",
                reason: format!("no {} images in {}", split.name(), dir.display()),
            });
        }
        Ok(ds)
    }

    /// Stacks the given items into an N x 3 x H x W batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Labels)> {
        let imgs: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let [c, h, w] = chw(&self.images[i])?;
                self.images[i].reshape([1, c, h, w])
            })
            .collect::<Result<_>>()?;
        let lbls: Vec<Labels> = indices.iter().map(|&i| self.labels[i].clone()).collect();
        Ok((ops::concat(&imgs, 0)?, Labels::stack(&lbls)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub augment: AugmentSpec,
    pub ohem: Option<OhemConfig>,
    /// Iterations between validation rows; 0 means once per epoch.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: AugmentSpec::default(),
            ohem: None,
            eval_every: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: Real,
    /// Mean losses over the iterations since the previous row.
    pub loss_main: Real,
    pub loss_aux: Real,
    pub val_miou: Real,
}

pub const LOG_HEADER: &str = "iter,lr,loss_main,loss_aux,val_miou";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:e},{:.9},{:.9},{:.9}", self.iter, self.lr, self.loss_main, self.loss_aux, self.val_miou)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub best_miou: Real,
    pub best_iter: usize,
    pub best: NetworkParams,
}

/// Single-scale mean IoU over a dataset in evaluation mode.
pub fn evaluate(cfg: &NetworkConfig, params: &NetworkParams, data: &Dataset, batch: usize) -> Result<Real> {
    let mut cm = ConfusionMatrix::new(cfg.class_count)?;
    let mut net = params.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let g = Graph::no_grad();
        let out = dgcwnet_forward(&g, g.constant(x), cfg, &mut net, Mode::Eval)?;
        cm.add(&y, &argmax_labels(&g.value(out.main_logits))?)?;
    }
    Ok(miou(&cm).miou)
}

/// Output files of [`train`] inside the run directory.
pub const METRICS_LOG: &str = "metrics.csv";
pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";

/// Trains `params` in place. With an output directory, writes the
/// metrics log, the best checkpoint (initial parameters until validation
/// improves on them) and the final checkpoint.
#[allow(clippy::unnecessary_cast)]
pub fn train(
    net: &NetworkConfig,
    params: &mut NetworkParams,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("training needs data and a positive batch size"));
    }
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_LOG);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let epoch = train_set.len().div_ceil(cfg.batch_size);
    let every = if cfg.eval_every == 0 { epoch } else { cfg.eval_every };
    let mut state = OptimState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.iterations);
    let mut best = params.clone();
    let mut best_miou = evaluate(net, params, val_set, cfg.batch_size)?;
    let mut best_iter = 0;
    let save_best = |p: &NetworkParams| -> Result<()> {
        if let Some(dir) = out {
            save_checkpoint(&dir.join(BEST_DIR), p)?;
        }
        Ok(())
    };
    save_best(&best)?;
    let mut rows = Vec::new();
    let (mut sum_main, mut sum_aux, mut since) = (0.0, 0.0, 0usize);
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();

    for iter in 0..cfg.iterations {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut lbls = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let pos = iter * cfg.batch_size + b;
            let e = pos / train_set.len();
            if e != perm_epoch {
                perm = (0..train_set.len()).collect();
                KeyedRng::new(cfg.seed, "shuffle", e as u64).shuffle(&mut perm);
                perm_epoch = e;
            }
            let i = perm[pos % train_set.len()];
            let mut rng = KeyedRng::new(cfg.seed, "augment", pos as u64);
            let (img, lbl) = augment(&train_set.images[i], &train_set.labels[i], &cfg.augment, &mut rng)?;
            let [c, h, w] = chw(&img)?;
            imgs.push(img.reshape([1, c, h, w])?);
            lbls.push(lbl);
        }
        let x = ops::concat(&imgs, 0)?;
        let y = Labels::stack(&lbls)?;

        let lr = state.lr()?;
        let g = Graph::new();
        let fwd = dgcwnet_forward(&g, g.constant(x), net, params, Mode::Train)?;
        let keep = match cfg.ohem {
            Some(o) => Some(ohem_filter(
                &correct_class_probs(&g.value(fwd.main_logits), &y)?,
                o.theta,
                o.min_kept,
            )),
            None => None,
        };
        let (loss, main, aux) = total_loss(&g, &fwd, &y, net.aux_weight, keep.as_deref())?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged {
                iter,
                value: lv as f64,
            });
        }
        sum_main += g.value(main).data()[0];
        sum_aux += g.value(aux).data()[0];
        since += 1;
        g.backward(loss)?;
        let grads = collect_grads(&g, params);
        drop(g);
        sgd_step(params, &grads, &mut state, lr)?;

        let done = iter + 1;
        if done % every == 0 || done == cfg.iterations {
            let val_miou = evaluate(net, params, val_set, cfg.batch_size)?;
            let row = LogRow {
                iter: done,
                lr,
                loss_main: sum_main / since as Real,
                loss_aux: sum_aux / since as Real,
                val_miou,
            };
            if let Some((f, path)) = &mut log {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            }
            on_row(&row);
            if val_miou > best_miou {
                best_miou = val_miou;
                best_iter = done;
                best = params.clone();
                save_best(&best)?;
            }
            rows.push(row);
            (sum_main, sum_aux, since) = (0.0, 0.0, 0);
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join(FINAL_DIR), params)?;
    }
    Ok(TrainReport {
        rows,
        best_miou,
        best_iter,
        best,
    })
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::layers::{load_checkpoint, ParamRole};
    use crate::network::ContextKind;
    use crate::testutil::rand_tensor;
    use proptest::prelude::*;

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0.01, 0, 1000).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 1000, 1000).unwrap(), 0.0);
        assert_eq!(poly_lr(0.01, 500, 1000).unwrap(), 0.01 * (0.5 as Real).powf(0.9));
        assert!(poly_lr(0.01, 1001, 1000).is_err());
    }

    proptest! {
        #[test]
        fn poly_schedule_is_non_increasing(max in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
            let (a, b) = (a.min(max), b.min(max));
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(poly_lr(0.1, hi, max).unwrap() <= poly_lr(0.1, lo, max).unwrap());
        }

        #[test]
        fn ohem_keeps_enough_and_never_ignored(seed in 0u64..1000, theta in 0.0f64..1.0, k in 0usize..40) {
            let mut rng = KeyedRng::new(seed, "ohem", 0);
            let n = 1 + rng.below(30);
            let probs: Vec<Option<Real>> = (0..n)
                .map(|_| if rng.bernoulli(0.2) { None } else { Some(rng.uniform(0.0, 1.0)) })
                .collect();
            let keep = ohem_filter(&probs, theta as Real, k);
            let valid = probs.iter().flatten().count();
            prop_assert!(keep.iter().filter(|&&b| b).count() >= k.min(valid));
            for (p, kept) in probs.iter().zip(&keep) {
                match p {
                    None => prop_assert!(!kept),
                    Some(p) if *p < theta as Real => prop_assert!(kept),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn ohem_cases() {
        let probs = [Some(0.9), Some(0.5), Some(0.95), Some(0.6)];
        assert_eq!(ohem_filter(&probs, 0.7, 3), vec![true, true, false, true]);
        assert_eq!(ohem_filter(&probs, 0.99, 2), vec![true; 4]);
        assert_eq!(ohem_filter(&probs, 0.1, 2), vec![false, true, false, true]);
        assert_eq!(ohem_filter(&probs, 0.1, 10), vec![true; 4]);
        // Ties at the cut go to the lower index; ignored pixels never count.
        let tied = [Some(0.8), None, Some(0.8), Some(0.8)];
        assert_eq!(ohem_filter(&tied, 0.7, 2), vec![true, false, true, false]);
        assert_eq!(ohem_filter(&[None, None], 0.7, 5), vec![false, false]);
    }

    fn scalar_param(v: Real) -> crate::layers::BatchNormParams {
        let mut p = crate::layers::BatchNormParams::new(1).unwrap();
        p.scale = Tensor::new([1], vec![v]).unwrap();
        p
    }

    fn grads(pairs: &[(&str, Real)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|&(n, g)| (n.to_string(), Tensor::new([1], vec![g]).unwrap())).collect()
    }

    #[test]
    fn sgd_cases() {
        let mut lin = crate::layers::LinearParams::init(&crate::layers::Init::new(1), "l", 3, 2).unwrap();
        let before = lin.clone();
        let mut st = OptimState::new(0.1, 0.9, 0.0, 10);
        sgd_step(&mut lin, &HashMap::new(), &mut st, 0.1).unwrap();
        assert!(lin.weight.bit_eq(&before.weight) && lin.bias.bit_eq(&before.bias));
        assert_eq!(st.iter, 1);

        // Vanilla step on a scalar (the scale of a 1-channel norm layer).
        let mut p = scalar_param(3.0);
        let mut st = OptimState::new(1.0, 0.0, 0.0, 10);
        sgd_step(&mut p, &grads(&[("scale", 0.25)]), &mut st, 1.0).unwrap();
        assert_eq!(p.scale.data(), &[2.75]);
        assert_eq!(p.running_mean.data(), &[0.0]);

        let mismatch = [("scale".to_string(), Tensor::zeros([2]).unwrap())].into_iter().collect();
        assert!(sgd_step(&mut p, &mismatch, &mut st, 1.0).is_err());
    }

    #[test]
    fn momentum_and_decay_match_hand_unrolling() {
        let mut lin = crate::layers::LinearParams::zeros(1, 1).unwrap();
        lin.weight = Tensor::new([1, 1], vec![2.0]).unwrap();
        let mut norm = scalar_param(2.0);
        let (mu, wd, lr) = (0.9, 0.1, 0.5);
        let (g1, g2) = (1.0, -0.5);
        let mut st = OptimState::new(lr, mu, wd, 10);
        let mut st_n = st.clone();
        let w1 = {
            sgd_step(&mut lin, &[("weight".to_string(), Tensor::new([1, 1], vec![g1]).unwrap())].into_iter().collect(), &mut st, lr).unwrap();
            sgd_step(&mut lin, &[("weight".to_string(), Tensor::new([1, 1], vec![g2]).unwrap())].into_iter().collect(), &mut st, lr).unwrap();
            lin.weight.data()[0]
        };
        // v1 = g1 + wd w0; w1 = w0 - lr v1; v2 = mu v1 + g2 + wd w1; w2 = w1 - lr v2.
        let v1 = g1 + wd * 2.0;
        let w_1 = 2.0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * w_1;
        assert_eq!(w1, w_1 - lr * v2);
        // Norm scale: same recurrence without decay.
        sgd_step(&mut norm, &grads(&[("scale", g1)]), &mut st_n, lr).unwrap();
        sgd_step(&mut norm, &grads(&[("scale", g2)]), &mut st_n, lr).unwrap();
        let s1 = 2.0 - lr * g1;
        assert_eq!(norm.scale.data()[0], s1 - lr * (mu * g1 + g2));
        assert!(!ParamRole::NormScale.decays());
    }

    fn pair(seed: u64, s: usize) -> (Tensor, Labels) {
        let img = rand_tensor(&[3, s, s], seed);
        let mut rng = KeyedRng::new(seed, "aug-labels", 0);
        let lbl = Labels::new([1, s, s], (0..s * s).map(|_| rng.below(4) as u32).collect()).unwrap();
        (img, lbl)
    }

    #[test]
    fn augment_identity_involution_and_padding() {
        let (img, lbl) = pair(1, 12);
        let (a, b) = augment_with(&img, &lbl, 1.0, false, 12, 0, 0).unwrap();
        assert!(a.bit_eq(&img) && b == lbl);
        let (fa, fb) = augment_with(&img, &lbl, 1.0, true, 12, 0, 0).unwrap();
        let (ga, gb) = augment_with(&fa, &fb, 1.0, true, 12, 0, 0).unwrap();
        assert!(ga.bit_eq(&img) && gb == lbl);
        assert_eq!(fa.at(&[1, 3, 0]), img.at(&[1, 3, 11]));
        // Half scale onto a full-size crop: the bottom-right is padding.
        let (pa, pb) = augment_with(&img, &lbl, 0.5, false, 12, 0, 0).unwrap();
        assert_eq!(pb.data()[11 * 12 + 11], IGNORE_INDEX);
        assert_eq!(pa.at(&[0, 11, 11]), 0.0);
        assert_ne!(pb.data()[0], IGNORE_INDEX);
        assert!(augment_with(&img, &lbl, 1.0, false, 12, 1, 0).is_err());
    }

    #[test]
    fn augment_is_deterministic_per_key() {
        let (img, lbl) = pair(2, 16);
        let spec = AugmentSpec {
            crop: 16,
            ..AugmentSpec::default()
        };
        let run = |i| augment(&img, &lbl, &spec, &mut KeyedRng::new(3, "augment", i)).unwrap();
        let (a, b) = run(5);
        let (c, d) = run(5);
        assert!(a.bit_eq(&c) && b == d);
        assert_eq!(a.shape(), &[3, 16, 16]);
        let distinct = (0..8).map(run).filter(|(x, _)| !x.bit_eq(&a)).count();
        assert!(distinct >= 6);
    }

    #[test]
    fn single_disc_rasterizes_exactly() {
        let spec = SynthSpec {
            image_size: 16,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let disc = ShapeKind::Disc { cx: 7.0, cy: 9.5, r: 4.0 };
        let scene = Scene {
            ramp: (0.0, 0.0),
            shapes: vec![SceneShape { kind: disc, class: 1, phase: 0.0 }],
        };
        let (img, lbl) = render_scene(&spec, &scene, &mut KeyedRng::new(0, "n", 0)).unwrap();
        let mut inside = 0;
        for y in 0..16 {
            for x in 0..16 {
                let (dx, dy) = (x as Real + 0.5 - 7.0, y as Real + 0.5 - 9.5);
                let want = u32::from(dx * dx + dy * dy <= 16.0);
                inside += want;
                assert_eq!(lbl.data()[y * 16 + x], want, "({x}, {y})");
            }
        }
        assert!(inside > 40);
        // No noise, no ramp: background pixels carry exactly the
        // background colour (as f32).
        assert_eq!(img.at(&[2, 0, 0]), BACKGROUND_COLOR[2] as f32 as Real);
    }

    #[test]
    fn generator_is_deterministic_and_covers_classes() {
        let spec = SynthSpec {
            class_count: 5,
            seed: 4,
            ..SynthSpec::default()
        };
        let (a, b) = gen_synthetic(&spec, Split::Train, 17).unwrap();
        let (c, d) = gen_synthetic(&spec, Split::Train, 17).unwrap();
        assert!(a.bit_eq(&c) && b == d);
        let (e, _) = gen_synthetic(&spec, Split::Val, 17).unwrap();
        assert!(!a.bit_eq(&e));
        let mut hist = [0usize; 5];
        for i in 0..100 {
            let (img, lbl) = gen_synthetic(&spec, Split::Train, i).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for &l in lbl.data() {
                hist[l as usize] += 1;
            }
        }
        assert!(hist.iter().all(|&h| h > 0), "{hist:?}");
    }

    #[test]
    fn shared_texture_classes_differ_only_in_outline() {
        assert_eq!(class_texture(1), class_texture(2));
        assert_eq!(class_texture(3).color, class_texture(0).color);
        assert_ne!(class_texture(3), class_texture(0));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = SynthSpec {
            image_size: 16,
            train_count: 3,
            val_count: 2,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(&spec, Split::Val).unwrap();
        ds.save(dir.path(), Split::Val).unwrap();
        let back = Dataset::load(dir.path(), Split::Val).unwrap();
        assert_eq!(back.len(), 2);
        for i in 0..2 {
            assert!(back.images[i].bit_eq(&ds.images[i]));
            assert_eq!(back.labels[i], ds.labels[i]);
        }
        assert!(Dataset::load(dir.path(), Split::Train).is_err());
    }

    fn micro() -> (NetworkConfig, Dataset, Dataset, TrainConfig) {
        let spec = SynthSpec {
            image_size: 16,
            train_count: 16,
            val_count: 8,
            seed: 7,
            ..SynthSpec::default()
        };
        let mut net = NetworkConfig {
            backbone_widths: vec![4, 6, 8, 8],
            reduced_channels: 8,
            context: ContextKind::Dgcw,
            ..NetworkConfig::default()
        };
        net.dgcw.downsample_ratio = 1;
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 4,
            augment: AugmentSpec {
                crop: 16,
                ..AugmentSpec::default()
            },
            seed: 7,
            ..TrainConfig::default()
        };
        (
            net,
            Dataset::synthetic(&spec, Split::Train).unwrap(),
            Dataset::synthetic(&spec, Split::Val).unwrap(),
            cfg,
        )
    }

    fn trainable(p: &NetworkParams) -> Vec<Tensor> {
        let mut v = Vec::new();
        p.visit("", &mut |_, r, t| {
            if r.trainable() {
                v.push(t.clone())
            }
        });
        v
    }

    #[test]
    fn zero_iterations_checkpoint_is_initialization() {
        let (net, tr, va, mut cfg) = micro();
        cfg.iterations = 0;
        let init = NetworkParams::new(&net, 7).unwrap();
        let mut p = init.clone();
        let dir = tempfile::tempdir().unwrap();
        let rep = train(&net, &mut p, &tr, &va, &cfg, Some(dir.path()), &mut |_| {}).unwrap();
        assert!(rep.rows.is_empty());
        let mut loaded = NetworkParams::new(&net, 99).unwrap();
        load_checkpoint(&dir.path().join(BEST_DIR), &mut loaded).unwrap();
        let mut all = Vec::new();
        init.visit("", &mut |_, _, t| all.push(t.clone()));
        let mut i = 0;
        loaded.visit("", &mut |n, _, t| {
            assert!(t.bit_eq(&all[i]), "{n}");
            i += 1;
        });
        let log = fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(log.trim(), LOG_HEADER);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (net, tr, va, mut cfg) = micro();
        cfg.iterations = 6;
        cfg.base_lr = 0.0;
        let init = NetworkParams::new(&net, 7).unwrap();
        let mut p = init.clone();
        train(&net, &mut p, &tr, &va, &cfg, None, &mut |_| {}).unwrap();
        for (a, b) in trainable(&init).iter().zip(trainable(&p).iter()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn micro_run_learns_and_is_reproducible() {
        let (net, tr, va, cfg) = micro();
        let run = || {
            let mut p = NetworkParams::new(&net, 7).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let rep = train(&net, &mut p, &tr, &va, &cfg, Some(dir.path()), &mut |_| {}).unwrap();
            (rep, fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap())
        };
        let (rep, log) = run();
        let (_, again) = run();
        assert_eq!(log, again);
        assert_eq!(rep.rows.len(), 13);
        assert_eq!(rep.rows.last().unwrap().iter, 50);
        let (first, last) = (&rep.rows[0], rep.rows.last().unwrap());
        assert!(last.loss_main < first.loss_main, "{first:?} -> {last:?}");
        assert!(rep.rows.iter().all(|r| r.loss_main.is_finite() && r.loss_aux.is_finite()));
    }

    #[test]
    fn ohem_training_runs_and_divergence_is_reported() {
        let (net, tr, va, mut cfg) = micro();
        cfg.iterations = 4;
        cfg.ohem = Some(OhemConfig {
            theta: 0.7,
            min_kept: 100,
        });
        let mut p = NetworkParams::new(&net, 7).unwrap();
        train(&net, &mut p, &tr, &va, &cfg, None, &mut |_| {}).unwrap();

        cfg.base_lr = 1e30;
        let mut p = NetworkParams::new(&net, 7).unwrap();
        match train(&net, &mut p, &tr, &va, &cfg, None, &mut |_| {}) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.rows)),
        }
    }
}
