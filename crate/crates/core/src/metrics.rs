//! Evaluation: confusion matrices and mIoU, multi-scale and flip
//! inference, class average features and the class-wise variance
//! histogram.

use crate::layers::{resample_bilinear, resize_nearest, Labels};
use crate::network::{dgcwnet_forward, Mode, NetworkConfig, NetworkParams};
use crate::tensor::ops;
use crate::{Error, Graph, Real, Result, Tensor, IGNORE_INDEX};

/// K x K pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("a confusion matrix needs at least 2 classes"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if classes < 2 || counts.len() != classes * classes {
            return Err(Error::invalid(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every non-ignored pixel of `truth` against `pred`.
    pub fn add(&mut self, truth: &Labels, pred: &Labels) -> Result<()> {
        if truth.shape() != pred.shape() {
            return Err(Error::ShapeMismatch {
                op: "ConfusionMatrix::add",
                lhs: truth.shape().to_vec(),
                rhs: pred.shape().to_vec(),
            });
        }
        for (&t, &p) in truth.data().iter().zip(pred.data()) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p) as u32,
                    classes: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("merging confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<Real>>,
    pub miou: Real,
}

/// Mean IoU over the classes that occur in truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> IouReport {
    let k = cm.classes;
    let per_class: Vec<Option<Real>> = (0..k)
        .map(|c| {
            let tp = cm.at(c, c);
            let row: u64 = (0..k).map(|p| cm.at(c, p)).sum();
            let col: u64 = (0..k).map(|t| cm.at(t, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as Real / union as Real)
        })
        .collect();
    let present: Vec<Real> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<Real>() / present.len() as Real
    };
    IouReport { per_class, miou }
}

/// Per-pixel argmax over the class axis of N x K x H x W logits; ties go
/// to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<Labels> {
    let &[n, k, h, w] = logits.shape() else {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "logits must be N x K x H x W".into(),
        });
    };
    let d = logits.data();
    let s = h * w;
    let mut out = Vec::with_capacity(n * s);
    for ni in 0..n {
        for p in 0..s {
            let mut best = 0;
            for c in 1..k {
                if d[(ni * k + c) * s + p] > d[(ni * k + best) * s + p] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    Labels::new([n, h, w], out)
}

fn resize(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let g = Graph::no_grad();
    let v = resample_bilinear(&g, g.constant(t.clone()), h, w)?;
    Ok(g.value(v))
}

/// Extent of an image resized by `scale`, rounded to the network stride.
pub fn scaled_extent(extent: usize, scale: Real) -> usize {
    (((extent as Real * scale) / 8.0).round() as usize).max(1) * 8
}

/// Sums main logits over resized (and optionally mirrored) copies of
/// `image`, each mapped back to the input resolution.
pub fn ms_flip_infer(
    image: &Tensor,
    cfg: &NetworkConfig,
    params: &NetworkParams,
    scales: &[Real],
    flip: bool,
) -> Result<Tensor> {
    if scales.is_empty() || scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::invalid("scales must be a non-empty list of positive factors"));
    }
    let &[_, _, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "image batch must be N x 3 x H x W".into(),
        });
    };
    let mut net = params.clone();
    let mut forward = |x: Tensor| -> Result<Tensor> {
        let g = Graph::no_grad();
        let out = dgcwnet_forward(&g, g.constant(x), cfg, &mut net, Mode::Eval)?;
        Ok(g.value(out.main_logits))
    };
    let mut total: Option<Tensor> = None;
    for &s in scales {
        let (sh, sw) = (scaled_extent(h, s), scaled_extent(w, s));
        let scaled = resize(image, sh, sw)?;
        let mut passes = vec![resize(&forward(scaled.clone())?, h, w)?];
        if flip {
            let mirrored = forward(ops::flip(&scaled, 3)?)?;
            passes.push(resize(&ops::flip(&mirrored, 3)?, h, w)?);
        }
        for p in passes {
            total = Some(match total {
                None => p,
                Some(t) => ops::binary(ops::BinaryOp::Add, &t, &p)?,
            });
        }
    }
    Ok(total.expect("scales is non-empty"))
}

/// Class average features A (K x D), pixel counts per class and the
/// per-channel variance across present classes.
#[derive(Clone, Debug)]
pub struct ClassStats {
    pub class_avg: Tensor,
    pub counts: Vec<u64>,
    pub variance: Vec<Real>,
}

impl ClassStats {
    pub fn present(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    /// Mean of the variance vector.
    pub fn mean_variance(&self) -> Real {
        self.variance.iter().sum::<Real>() / self.variance.len().max(1) as Real
    }
}

/// Mergeable masked feature sums for [`ClassStats`].
#[derive(Clone, Debug)]
pub struct ClassStatsAccumulator {
    classes: usize,
    channels: usize,
    sums: Vec<Real>,
    counts: Vec<u64>,
}

impl ClassStatsAccumulator {
    pub fn new(classes: usize, channels: usize) -> Self {
        ClassStatsAccumulator {
            classes,
            channels,
            sums: vec![0.0; classes * channels],
            counts: vec![0; classes],
        }
    }

    /// Adds N x D x h x w features; `labels` are resized by nearest
    /// neighbour to the feature grid when needed.
    pub fn add(&mut self, features: &Tensor, labels: &Labels) -> Result<()> {
        let &[n, d, h, w] = features.shape() else {
            return Err(Error::InvalidShape {
                shape: features.shape().to_vec(),
                reason: "features must be N x D x h x w".into(),
            });
        };
        if d != self.channels || labels.shape()[0] != n {
            return Err(Error::ShapeMismatch {
                op: "class_average_features",
                lhs: features.shape().to_vec(),
                rhs: labels.shape().to_vec(),
            });
        }
        let labels = if labels.shape()[1..] == [h, w] {
            labels.clone()
        } else {
            resize_nearest(labels, h, w)?
        };
        let fd = features.data();
        let s = h * w;
        for ni in 0..n {
            for p in 0..s {
                let l = labels.data()[ni * s + p];
                if l == IGNORE_INDEX {
                    continue;
                }
                let l = l as usize;
                if l >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: l as u32,
                        classes: self.classes,
                    });
                }
                self.counts[l] += 1;
                for c in 0..d {
                    self.sums[l * d + c] += fd[(ni * d + c) * s + p];
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassStatsAccumulator) -> Result<()> {
        if (other.classes, other.channels) != (self.classes, self.channels) {
            return Err(Error::invalid("merging class statistics of different sizes"));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Fails when fewer than two classes were seen.
    pub fn finish(&self) -> Result<ClassStats> {
        let (k, d) = (self.classes, self.channels);
        let present: Vec<usize> = (0..k).filter(|&c| self.counts[c] > 0).collect();
        if present.len() < 2 {
            return Err(Error::invalid(format!(
                "class-wise variance needs at least 2 present classes, found {}",
                present.len()
            )));
        }
        let mut avg = vec![0.0; k * d];
        for &c in &present {
            for ch in 0..d {
                avg[c * d + ch] = self.sums[c * d + ch] / self.counts[c] as Real;
            }
        }
        let m = present.len() as Real;
        let variance = (0..d)
            .map(|ch| {
                let mean = present.iter().map(|&c| avg[c * d + ch]).sum::<Real>() / m;
                present.iter().map(|&c| (avg[c * d + ch] - mean).powi(2)).sum::<Real>() / m
            })
            .collect();
        Ok(ClassStats {
            class_avg: Tensor::new([k, d], avg)?,
            counts: self.counts.clone(),
            variance,
        })
    }
}

pub fn class_average_features(features: &[Tensor], labels: &[Labels], classes: usize) -> Result<ClassStats> {
    let first = features.first().ok_or_else(|| Error::invalid("no features"))?;
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in count"));
    }
    let channels = *first.shape().get(1).unwrap_or(&0);
    let mut acc = ClassStatsAccumulator::new(classes, channels);
    for (f, l) in features.iter().zip(labels) {
        acc.add(f, l)?;
    }
    acc.finish()
}

/// `bins` uniform edges spanning the observed variances (a unit range
/// when they are all equal).
pub fn uniform_edges(stats: &ClassStats, bins: usize) -> Vec<Real> {
    let lo = stats.variance.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = stats.variance.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let bins = bins.max(1);
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as Real / bins as Real })
        .collect()
}

/// Channel counts per variance interval `[e_i, e_i+1)`, the last interval
/// closed. Values outside the edges fall into the nearest end bin, so the
/// counts always sum to D.
pub fn variance_histogram(stats: &ClassStats, edges: &[Real]) -> Result<Vec<usize>> {
    if edges.len() < 2 || edges.windows(2).any(|e| e[0].partial_cmp(&e[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::invalid("histogram edges must be strictly increasing, at least two"));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &v in &stats.variance {
        let b = edges[1..bins].partition_point(|&e| e <= v);
        counts[b] += 1;
    }
    Ok(counts)
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::network::{ContextKind, HeadKind};
    use crate::rng::KeyedRng;
    use crate::testutil::rand_tensor;
    use proptest::prelude::*;

    fn labels(shape: [usize; 3], data: &[u32]) -> Labels {
        Labels::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn miou_cases() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        let t = labels([1, 2, 3], &[0, 1, 2, 2, 1, 0]);
        cm.add(&t, &t).unwrap();
        assert_eq!(miou(&cm).miou, 1.0);

        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.add(&labels([1, 1, 4], &[0, 0, 1, 1]), &labels([1, 1, 4], &[0, 0, 0, 0]))
            .unwrap();
        let r = miou(&cm);
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);

        // Ignored pixels and absent classes.
        let mut cm = ConfusionMatrix::new(4).unwrap();
        cm.add(&labels([1, 1, 3], &[0, 255, 1]), &labels([1, 1, 3], &[0, 3, 1]))
            .unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(miou(&cm).per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert!(cm.add(&labels([1, 1, 1], &[4]), &labels([1, 1, 1], &[0])).is_err());
    }

    #[test]
    fn miou_matches_per_class_formula() {
        let mut rng = KeyedRng::new(3, "cm", 0);
        let k = 5;
        let counts: Vec<u64> = (0..k * k).map(|_| rng.below(50) as u64).collect();
        let cm = ConfusionMatrix::from_counts(k, counts.clone()).unwrap();
        let r = miou(&cm);
        let mut sum = 0.0;
        for c in 0..k {
            let mut fp = 0;
            let mut fne = 0;
            for o in 0..k {
                if o != c {
                    fp += counts[o * k + c];
                    fne += counts[c * k + o];
                }
            }
            let tp = counts[c * k + c];
            let iou = tp as Real / (tp + fp + fne) as Real;
            assert!((r.per_class[c].unwrap() - iou).abs() < 1e-15);
            sum += iou;
        }
        assert!((r.miou - sum / k as Real).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn miou_is_permutation_invariant(seed in 0u64..500, shift in 1u32..4) {
            let mut rng = KeyedRng::new(seed, "perm", 0);
            let k = 4u32;
            let t: Vec<u32> = (0..40).map(|_| rng.below(k as usize) as u32).collect();
            let p: Vec<u32> = (0..40).map(|_| rng.below(k as usize) as u32).collect();
            let perm = |v: &[u32]| v.iter().map(|&x| (x + shift) % k).collect::<Vec<_>>();
            let mut a = ConfusionMatrix::new(4).unwrap();
            a.add(&labels([1, 5, 8], &t), &labels([1, 5, 8], &p)).unwrap();
            let mut b = ConfusionMatrix::new(4).unwrap();
            b.add(&labels([1, 5, 8], &perm(&t)), &labels([1, 5, 8], &perm(&p))).unwrap();
            prop_assert!((miou(&a).miou - miou(&b).miou).abs() < 1e-15);
        }

        #[test]
        fn accumulation_is_order_independent(seed in 0u64..500) {
            let mut rng = KeyedRng::new(seed, "order", 0);
            let parts: Vec<(Labels, Labels)> = (0..4)
                .map(|_| {
                    let t: Vec<u32> = (0..6).map(|_| rng.below(3) as u32).collect();
                    let p: Vec<u32> = (0..6).map(|_| rng.below(3) as u32).collect();
                    (labels([1, 2, 3], &t), labels([1, 2, 3], &p))
                })
                .collect();
            let mut fwd = ConfusionMatrix::new(3).unwrap();
            for (t, p) in &parts {
                fwd.add(t, p).unwrap();
            }
            let mut halves = [ConfusionMatrix::new(3).unwrap(), ConfusionMatrix::new(3).unwrap()];
            for (i, (t, p)) in parts.iter().enumerate().rev() {
                halves[i % 2].add(t, p).unwrap();
            }
            let [mut a, b] = halves;
            a.merge(&b).unwrap();
            prop_assert_eq!(fwd, a);
        }

        #[test]
        fn histogram_partitions_channels(seed in 0u64..500, bins in 1usize..10) {
            let mut rng = KeyedRng::new(seed, "hist", 0);
            let d = 1 + rng.below(30);
            let stats = ClassStats {
                class_avg: Tensor::zeros([2, d]).unwrap(),
                counts: vec![1, 1],
                variance: (0..d).map(|_| rng.uniform(0.0, 3.0)).collect(),
            };
            let edges = uniform_edges(&stats, bins);
            prop_assert_eq!(edges.len(), bins + 1);
            prop_assert_eq!(variance_histogram(&stats, &edges).unwrap().iter().sum::<usize>(), d);
            let narrow = [0.5, 1.0, 1.5];
            prop_assert_eq!(variance_histogram(&stats, &narrow).unwrap().iter().sum::<usize>(), d);
        }
    }

    #[test]
    fn histogram_cases() {
        let stats = ClassStats {
            class_avg: Tensor::zeros([2, 3]).unwrap(),
            counts: vec![1, 1],
            variance: vec![0.0; 3],
        };
        assert_eq!(variance_histogram(&stats, &[0.0, 1.0, 2.0]).unwrap(), vec![3, 0]);
        let stats = ClassStats {
            variance: vec![0.0, 0.5, 1.0, 1.5, 2.0, 0.99],
            ..stats
        };
        // [0,1): 0, 0.5, 0.99; [1,2]: 1, 1.5, 2.
        assert_eq!(variance_histogram(&stats, &[0.0, 1.0, 2.0]).unwrap(), vec![3, 3]);
        assert_eq!(variance_histogram(&stats, &[0.0, 0.5, 1.0, 2.0]).unwrap(), vec![1, 2, 3]);
        assert!(variance_histogram(&stats, &[1.0, 1.0]).is_err());
        assert!(variance_histogram(&stats, &[1.0]).is_err());
    }

    #[test]
    fn class_average_cases() {
        let c = Tensor::full([2, 3, 2, 2], 1.5).unwrap();
        let l = labels([2, 2, 2], &[0, 1, 2, 255, 1, 1, 0, 2]);
        let s = class_average_features(&[c], std::slice::from_ref(&l), 3).unwrap();
        assert!(s.class_avg.data().iter().all(|&v| v == 1.5));
        assert!(s.variance.iter().all(|&v| v == 0.0));
        assert_eq!(s.counts, vec![2, 3, 2]);

        let f = Tensor::new([1, 1, 1, 4], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let l2 = labels([1, 1, 4], &[0, 0, 1, 1]);
        let s = class_average_features(std::slice::from_ref(&f), &[l2], 2).unwrap();
        assert_eq!(s.class_avg.data(), &[0.0, 2.0]);
        assert_eq!(s.variance, vec![1.0]);
        assert_eq!(s.mean_variance(), 1.0);

        // An absent class is excluded from the variance.
        let l3 = labels([1, 1, 4], &[0, 0, 2, 2]);
        let s = class_average_features(std::slice::from_ref(&f), &[l3], 4).unwrap();
        assert_eq!(s.present(), vec![true, false, true, false]);
        assert_eq!(s.variance, vec![1.0]);
        let l4 = labels([1, 1, 4], &[1, 1, 1, 255]);
        assert!(class_average_features(&[f], &[l4], 2).is_err());
    }

    #[test]
    fn class_average_matches_loop_oracle() {
        let f = rand_tensor(&[2, 3, 4, 4], 7);
        let full = {
            let mut rng = KeyedRng::new(8, "lbl", 0);
            Labels::new([2, 8, 8], (0..128).map(|_| rng.below(3) as u32).collect()).unwrap()
        };
        let s = class_average_features(std::slice::from_ref(&f), std::slice::from_ref(&full), 3).unwrap();
        // Labels at feature resolution by taking every second pixel.
        let mut sum = [[0.0; 3]; 3];
        let mut cnt = [0.0; 3];
        for n in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let l = full.data()[(n * 8 + 2 * y) * 8 + 2 * x] as usize;
                    cnt[l] += 1.0;
                    for ch in 0..3 {
                        sum[l][ch] += f.at(&[n, ch, y, x]);
                    }
                }
            }
        }
        for l in 0..3 {
            for ch in 0..3 {
                assert!((s.class_avg.at(&[l, ch]) - sum[l][ch] / cnt[l]).abs() < 1e-14);
            }
        }
        for ch in 0..3 {
            let a: Vec<Real> = (0..3).map(|l| sum[l][ch] / cnt[l]).collect();
            let m = a.iter().sum::<Real>() / 3.0;
            let v = a.iter().map(|x| (x - m) * (x - m)).sum::<Real>() / 3.0;
            assert!((s.variance[ch] - v).abs() < 1e-14);
        }
        // Merging two halves equals one pass.
        let mut a = ClassStatsAccumulator::new(3, 3);
        a.add(&f, &full).unwrap();
        let mut b = ClassStatsAccumulator::new(3, 3);
        let f0 = ops::narrow(&f, 0, 0, 1).unwrap();
        let f1 = ops::narrow(&f, 0, 1, 1).unwrap();
        b.add(&f1, &full.item(1)).unwrap();
        let mut c = ClassStatsAccumulator::new(3, 3);
        c.add(&f0, &full.item(0)).unwrap();
        c.merge(&b).unwrap();
        assert!(c.finish().unwrap().class_avg.max_rel_diff(&a.finish().unwrap().class_avg).unwrap() < 1e-14);
    }

    fn small_net() -> (NetworkConfig, NetworkParams) {
        let cfg = NetworkConfig {
            class_count: 3,
            backbone_widths: vec![4, 6, 8, 8],
            reduced_channels: 4,
            head: HeadKind::Ppm,
            context: ContextKind::Dgcw,
            ppm_bins: vec![1, 2],
            ..NetworkConfig::default()
        };
        let mut cfg = cfg;
        cfg.dgcw.downsample_ratio = 1;
        cfg.dgcw.zero_init_g2 = false;
        let p = NetworkParams::new(&cfg, 5).unwrap();
        (cfg, p)
    }

    #[test]
    fn single_scale_inference_is_plain_forward() {
        let (cfg, p) = small_net();
        let x = rand_tensor(&[2, 3, 16, 24], 9);
        let y = ms_flip_infer(&x, &cfg, &p, &[1.0], false).unwrap();
        let g = Graph::no_grad();
        let mut q = p.clone();
        let out = dgcwnet_forward(&g, g.constant(x), &cfg, &mut q, Mode::Eval).unwrap();
        assert!(y.bit_eq(&g.value(out.main_logits)));
        assert!(ms_flip_infer(&rand_tensor(&[1, 3, 16, 16], 1), &cfg, &p, &[], true).is_err());
    }

    #[test]
    fn flip_inference_of_symmetric_input_is_symmetric() {
        let (cfg, p) = small_net();
        let half = rand_tensor(&[1, 3, 16, 8], 10);
        let x = ops::concat(&[half.clone(), ops::flip(&half, 3).unwrap()], 3).unwrap();
        for scales in [vec![1.0], vec![0.75, 1.0, 1.25, 1.5]] {
            let y = ms_flip_infer(&x, &cfg, &p, &scales, true).unwrap();
            assert_eq!(y.shape(), &[1, 3, 16, 16]);
            assert!(y.max_rel_diff(&ops::flip(&y, 3).unwrap()).unwrap() < 1e-13);
        }
    }

    #[test]
    fn flip_inference_matches_two_pass_oracle() {
        let (cfg, p) = small_net();
        let x = rand_tensor(&[1, 3, 16, 16], 12);
        let y = ms_flip_infer(&x, &cfg, &p, &[1.0], true).unwrap();
        let pass = |img: Tensor| {
            let g = Graph::no_grad();
            let mut q = p.clone();
            let out = dgcwnet_forward(&g, g.constant(img), &cfg, &mut q, Mode::Eval).unwrap();
            g.value(out.main_logits)
        };
        let a = pass(x.clone());
        let b = ops::flip(&pass(ops::flip(&x, 3).unwrap()), 3).unwrap();
        let (ad, bd) = (a.data(), b.data());
        let s = 256;
        for px in 0..s {
            let score = |c: usize| ad[c * s + px] + bd[c * s + px];
            let best = (0..3).fold(0, |m, c| if score(c) > score(m) { c } else { m });
            assert_eq!(argmax_labels(&y).unwrap().data()[px], best as u32);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap().data(), &[0, 1]);
    }
}
