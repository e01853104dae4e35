use crate::{Error, Graph, Real, Result, Tensor, Var, IGNORE_INDEX};

/// Integer label map N x H x W; [`IGNORE_INDEX`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    shape: [usize; 3],
    data: Vec<u32>,
}

impl Labels {
    pub fn new(shape: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("label map with {} entries", data.len()),
            });
        }
        Ok(Labels { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Stacks single-image maps of equal size into a batch.
    pub fn stack(items: &[Labels]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("empty label batch"))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * h * w);
        for it in items {
            if it.shape[1..] != [h, w] {
                return Err(Error::ShapeMismatch {
                    op: "Labels::stack",
                    lhs: first.shape.to_vec(),
                    rhs: it.shape.to_vec(),
                });
            }
            data.extend_from_slice(&it.data);
        }
        Labels::new([data.len() / (h * w), h, w], data)
    }

    /// Image `i` as a 1 x H x W map.
    pub fn item(&self, i: usize) -> Labels {
        let [_, h, w] = self.shape;
        Labels {
            shape: [1, h, w],
            data: self.data[i * h * w..(i + 1) * h * w].to_vec(),
        }
    }

    /// Labels as a float tensor (the on-disk representation).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.to_vec(), self.data.iter().map(|&l| l as Real).collect())
    }

    /// Inverse of [`Labels::to_tensor`]; accepts N x H x W or H x W.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = match *t.shape() {
            [n, h, w] => [n, h, w],
            [h, w] => [1, h, w],
            ref s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "label tensor must be H x W or N x H x W".into(),
                })
            }
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as Real {
                    Ok(v as u32)
                } else {
                    Err(Error::Format {
                        what: "label tensor",
                        reason: format!("non-integer label {v}"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Labels::new(shape, data)
    }

    pub fn flip_horizontal(&self) -> Labels {
        let [n, h, w] = self.shape;
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(w) {
            row.reverse();
        }
        debug_assert_eq!(data.len(), n * h * w);
        Labels {
            shape: self.shape,
            data,
        }
    }
}

fn check_logits(logits: &Tensor, labels: &Labels) -> Result<(usize, usize, usize)> {
    let [n, h, w] = labels.shape();
    match *logits.shape() {
        [ln, k, lh, lw] if [ln, lh, lw] == [n, h, w] => {
            if let Some(&bad) = labels.data().iter().find(|&&l| l != IGNORE_INDEX && l as usize >= k) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: k,
                });
            }
            Ok((n, k, h * w))
        }
        ref s => Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: s.to_vec(),
            rhs: labels.shape().to_vec(),
        }),
    }
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`; zero when
/// every pixel is ignored.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &Labels) -> Result<Var> {
    cross_entropy_masked(g, logits, labels, None)
}

/// [`cross_entropy`] restricted to pixels with `keep[i]` set (flat
/// N x H x W order). Ignored pixels never count.
pub fn cross_entropy_masked(
    g: &Graph,
    logits: Var,
    labels: &Labels,
    keep: Option<&[bool]>,
) -> Result<Var> {
    let lv = g.value(logits);
    let (n, k, s) = check_logits(&lv, labels)?;
    if let Some(keep) = keep {
        if keep.len() != n * s {
            return Err(Error::invalid("OHEM mask length differs from pixel count"));
        }
    }
    let counted: Vec<bool> = labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| l != IGNORE_INDEX && keep.is_none_or(|m| m[i]))
        .collect();
    let count = counted.iter().filter(|&&c| c).count();
    let ld = lv.data();
    let mut total = 0.0;
    for ni in 0..n {
        for p in 0..s {
            if !counted[ni * s + p] {
                continue;
            }
            let at = |c: usize| (ni * k + c) * s + p;
            let max = (0..k).map(|c| ld[at(c)]).fold(Real::NEG_INFINITY, Real::max);
            let lse = max + (0..k).map(|c| (ld[at(c)] - max).exp()).sum::<Real>().ln();
            total += lse - ld[at(labels.data()[ni * s + p] as usize)];
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as Real };
    let targets = labels.data().to_vec();
    Ok(g.record(&[logits], Tensor::scalar(loss), move |args| {
        let lv = &args.inputs[0];
        let ld = lv.data();
        let mut gx = vec![0.0; lv.numel()];
        if count > 0 {
            let scale = args.grad.data()[0] / count as Real;
            for ni in 0..n {
                for p in 0..s {
                    if !counted[ni * s + p] {
                        continue;
                    }
                    let at = |c: usize| (ni * k + c) * s + p;
                    let max = (0..k).map(|c| ld[at(c)]).fold(Real::NEG_INFINITY, Real::max);
                    let z: Real = (0..k).map(|c| (ld[at(c)] - max).exp()).sum();
                    for c in 0..k {
                        gx[at(c)] = scale * (ld[at(c)] - max).exp() / z;
                    }
                    gx[at(targets[ni * s + p] as usize)] -= scale;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(lv.shape().to_vec(), gx))])
    }))
}

/// Softmax probability of the labeled class at every pixel; `None` for
/// ignored pixels.
pub fn correct_class_probs(logits: &Tensor, labels: &Labels) -> Result<Vec<Option<Real>>> {
    let (n, k, s) = check_logits(logits, labels)?;
    let ld = logits.data();
    let mut out = Vec::with_capacity(n * s);
    for ni in 0..n {
        for p in 0..s {
            let l = labels.data()[ni * s + p];
            if l == IGNORE_INDEX {
                out.push(None);
                continue;
            }
            let at = |c: usize| (ni * k + c) * s + p;
            let max = (0..k).map(|c| ld[at(c)]).fold(Real::NEG_INFINITY, Real::max);
            let z: Real = (0..k).map(|c| (ld[at(c)] - max).exp()).sum();
            out.push(Some((ld[at(l as usize)] - max).exp() / z));
        }
    }
    Ok(out)
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck;
    use crate::testutil::rand_tensor;

    fn loss_of(logits: &Tensor, labels: &Labels) -> Real {
        let g = Graph::new();
        let v = g.constant(logits.clone());
        g.value(cross_entropy(&g, v, labels).unwrap()).data()[0]
    }

    fn random_labels(n: usize, h: usize, w: usize, k: u32, seed: u64) -> Labels {
        let mut rng = crate::rng::KeyedRng::new(seed, "labels", 0);
        let data = (0..n * h * w)
            .map(|_| {
                if rng.bernoulli(0.2) {
                    IGNORE_INDEX
                } else {
                    rng.below(k as usize) as u32
                }
            })
            .collect();
        Labels::new([n, h, w], data).unwrap()
    }

    #[test]
    fn saturated_and_uniform_cases() {
        let labels = Labels::new([1, 1, 3], vec![0, 2, 1]).unwrap();
        let mut onehot = vec![0.0; 9];
        for (p, &l) in labels.data().iter().enumerate() {
            onehot[l as usize * 3 + p] = 1000.0;
        }
        assert!(loss_of(&Tensor::new([1, 3, 1, 3], onehot).unwrap(), &labels) < 1e-12);
        let uniform = Tensor::full([1, 5, 1, 3], 0.3).unwrap();
        let labels = Labels::new([1, 1, 3], vec![4, 0, 2]).unwrap();
        assert!((loss_of(&uniform, &labels) - (5.0 as Real).ln()).abs() < 1e-14);
    }

    #[test]
    fn all_ignored_is_zero_and_out_of_range_fails() {
        let x = rand_tensor(&[1, 3, 2, 2], 1);
        assert_eq!(loss_of(&x, &Labels::new([1, 2, 2], vec![IGNORE_INDEX; 4]).unwrap()), 0.0);
        let g = Graph::new();
        let v = g.constant(x);
        let bad = Labels::new([1, 2, 2], vec![0, 3, 1, 1]).unwrap();
        assert!(matches!(
            cross_entropy(&g, v, &bad),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn matches_per_pixel_formula() {
        let x = rand_tensor(&[2, 4, 3, 3], 2).map(|v| 4.0 * v);
        let labels = random_labels(2, 3, 3, 4, 3);
        let (mut total, mut count) = (0.0, 0);
        for n in 0..2 {
            for p in 0..9 {
                let l = labels.data()[n * 9 + p];
                if l == IGNORE_INDEX {
                    continue;
                }
                let z: Real = (0..4).map(|c| x.data()[(n * 4 + c) * 9 + p].exp()).sum();
                total -= (x.data()[(n * 4 + l as usize) * 9 + p].exp() / z).ln();
                count += 1;
            }
        }
        let want = total / count as Real;
        assert!((loss_of(&x, &labels) - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn class_permutation_equivariance() {
        let x = rand_tensor(&[1, 4, 2, 3], 4);
        let labels = random_labels(1, 2, 3, 4, 5);
        let perm = [2usize, 0, 3, 1];
        let mut px = vec![0.0; x.numel()];
        for c in 0..4 {
            px[perm[c] * 6..perm[c] * 6 + 6].copy_from_slice(&x.data()[c * 6..c * 6 + 6]);
        }
        let pl: Vec<u32> = labels
            .data()
            .iter()
            .map(|&l| if l == IGNORE_INDEX { l } else { perm[l as usize] as u32 })
            .collect();
        let a = loss_of(&x, &labels);
        let b = loss_of(&Tensor::new([1, 4, 2, 3], px).unwrap(), &Labels::new([1, 2, 3], pl).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn masked_loss_counts_kept_pixels_only() {
        let x = rand_tensor(&[1, 3, 1, 4], 6);
        let labels = Labels::new([1, 1, 4], vec![0, 1, 2, 1]).unwrap();
        let keep = [true, false, true, false];
        let g = Graph::new();
        let v = g.constant(x.clone());
        let masked = g.value(cross_entropy_masked(&g, v, &labels, Some(&keep)).unwrap()).data()[0];
        let probs = correct_class_probs(&x, &labels).unwrap();
        let want = -(probs[0].unwrap().ln() + probs[2].unwrap().ln()) / 2.0;
        assert!((masked - want).abs() < 1e-14);
    }

    #[test]
    fn gradient() {
        let x = rand_tensor(&[2, 3, 2, 2], 7).map(|v| 3.0 * v);
        let labels = random_labels(2, 2, 2, 3, 8);
        let err = gradcheck(|g, xs| cross_entropy(g, g.param(&xs[0]), &labels), &[x], 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn label_tensor_round_trip() {
        let labels = random_labels(2, 3, 2, 4, 9);
        assert_eq!(Labels::from_tensor(&labels.to_tensor()).unwrap(), labels);
        let flipped = labels.flip_horizontal();
        assert_eq!(flipped.flip_horizontal(), labels);
        assert_eq!(flipped.data()[0], labels.data()[1]);
    }
}
