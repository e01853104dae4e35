//! Finite-difference gradient suites behind `dgcw gradcheck`.

use dgcw_core::dgcw::{dgcw_forward, DgcwConfig, DgcwParams, Impl, NormKind};
use dgcw_core::layers::{
    adaptive_avg_pool, batchnorm, conv2d, cross_entropy, linear_1x1, resample_bilinear, BatchNormParams,
    Conv2dParams, Init, Labels, LinearParams, ParamRole, Parameterized,
};
use dgcw_core::network::{dgcwnet_forward, total_loss, ContextKind, HeadKind, Mode, NetworkConfig, NetworkParams};
use dgcw_core::rng::KeyedRng;
use dgcw_core::tensor::gradcheck::gradcheck_report;
use dgcw_core::tensor::ReduceOp;
use dgcw_core::{Graph, Real, Result, Tensor, Var};

pub const OPS_TOLERANCE: Real = 1e-6;
pub const DGCW_TOLERANCE: Real = 1e-5;
pub const NET_TOLERANCE: Real = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub max_rel_error: Real,
    pub tolerance: Real,
    pub checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(shape: &[usize], seed: u64, lo: Real, hi: Real) -> Tensor {
    let mut rng = KeyedRng::new(seed, "gradcheck", 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(lo, hi)).expect("valid shape")
}

/// Keeps values at least `gap` away from zero, so ReLU and max stay off
/// their kinks under perturbation.
fn off_zero(t: &Tensor, gap: Real) -> Tensor {
    t.map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

type Body = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

/// Checks `sum(f(inputs) * probe)` for a fixed random probe.
fn check(suite: &'static str, name: &str, inputs: Vec<Tensor>, step: Real, tol: Real, f: Body) -> Result<CaseResult> {
    let probe_seed = dgcw_core::rng::fnv1a(name.as_bytes());
    let report = gradcheck_report(
        |g, xs| {
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x)).collect();
            let y = f(g, &vars)?;
            let probe = g.constant(uniform(&g.shape(y), probe_seed, -1.0, 1.0));
            g.sum_all(g.mul(y, probe)?)
        },
        &inputs,
        step,
        usize::MAX,
    )?;
    Ok(CaseResult {
        suite,
        case: name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance: tol,
        checked: report.checked,
    })
}

pub fn ops_suite() -> Result<Vec<CaseResult>> {
    let r = |shape: &[usize], seed: u64| uniform(shape, seed, -1.0, 1.0);
    let pos = |shape: &[usize], seed: u64| uniform(shape, seed, 0.5, 1.5);
    let step = 1e-5;
    let mut cases: Vec<(&str, Vec<Tensor>, Body)> = vec![
        ("add_broadcast", vec![r(&[2, 3], 1), r(&[3], 2)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[2, 3], 3), r(&[2, 3], 4)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul_broadcast", vec![r(&[2, 1, 4], 5), r(&[3, 1], 6)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("div", vec![r(&[3, 4], 7), pos(&[3, 4], 8)], Box::new(|g, v| g.div(v[0], v[1]))),
        ("scalar_affine", vec![r(&[5], 9)], Box::new(|g, v| g.add_scalar(g.mul_scalar(v[0], 1.5)?, -0.25))),
        ("neg", vec![r(&[4], 10)], Box::new(|g, v| Ok(g.neg(v[0])))),
        ("square", vec![r(&[4], 11)], Box::new(|g, v| Ok(g.square(v[0])))),
        ("sqrt", vec![pos(&[4], 12)], Box::new(|g, v| Ok(g.sqrt(v[0])))),
        ("relu", vec![off_zero(&r(&[6], 13), 0.05)], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("tanh", vec![r(&[4], 14)], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("exp", vec![r(&[4], 15)], Box::new(|g, v| Ok(g.exp(v[0])))),
        ("sigmoid", vec![r(&[4], 16)], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("matmul", vec![r(&[3, 4], 17), r(&[4, 2], 18)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("permute", vec![r(&[2, 3, 4], 19)], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![r(&[2, 3, 4], 20)], Box::new(|g, v| g.transpose(v[0], 0, 2))),
        ("reshape", vec![r(&[2, 6], 21)], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("broadcast_to", vec![r(&[3, 1], 22)], Box::new(|g, v| g.broadcast_to(v[0], &[2, 3, 4]))),
        ("reduce_sum", vec![r(&[2, 3, 4], 23)], Box::new(|g, v| g.reduce(ReduceOp::Sum, v[0], 1))),
        ("reduce_mean", vec![r(&[2, 3, 4], 24)], Box::new(|g, v| g.reduce(ReduceOp::Mean, v[0], 2))),
        ("reduce_max", vec![r(&[2, 3, 4], 25)], Box::new(|g, v| g.reduce(ReduceOp::Max, v[0], 1))),
        ("reduce_variance", vec![r(&[2, 3, 4], 26)], Box::new(|g, v| g.reduce(ReduceOp::Variance, v[0], 2))),
        ("softmax", vec![r(&[2, 5, 3], 27)], Box::new(|g, v| g.softmax(v[0], 1))),
        ("concat", vec![r(&[2, 1, 3], 28), r(&[2, 2, 3], 29)], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("flip", vec![r(&[2, 3, 4], 30)], Box::new(|g, v| g.flip(v[0], 2))),
        (
            "linear_1x1",
            vec![r(&[1, 3, 2, 3], 31), r(&[4, 3], 32), r(&[4], 33)],
            Box::new(|g, v| {
                let p = LinearParams {
                    weight: g.value(v[1]),
                    bias: g.value(v[2]),
                };
                linear_1x1(g, v[0], &p)
            }),
        ),
        ("adaptive_avg_pool", vec![r(&[1, 2, 5, 7], 34)], Box::new(|g, v| adaptive_avg_pool(g, v[0], 3, 2))),
        ("resample_bilinear", vec![r(&[1, 2, 3, 4], 35)], Box::new(|g, v| resample_bilinear(g, v[0], 7, 5))),
        (
            "cross_entropy",
            vec![r(&[2, 3, 2, 2], 36)],
            Box::new(|g, v| {
                let labels = Labels::new([2, 2, 2], vec![0, 1, 2, 255, 2, 2, 1, 0])?;
                cross_entropy(g, v[0], &labels)
            }),
        ),
    ];
    for (stride, dilation) in [(1, 1), (2, 1), (1, 2)] {
        let p = Conv2dParams::init(&Init::new(37), "conv", 2, 3, 3, stride, dilation)?;
        let (s, d) = (p.stride, p.dilation);
        let name: &'static str = match (stride, dilation) {
            (1, 1) => "conv2d",
            (2, 1) => "conv2d_stride2",
            _ => "conv2d_dilation2",
        };
        cases.push((
            name,
            vec![r(&[1, 2, 5, 6], 38), p.weight.clone(), p.bias.clone()],
            Box::new(move |g, v| {
                let mut q = Conv2dParams::init(&Init::new(37), "conv", 2, 3, 3, s, d)?;
                q.weight = g.value(v[1]);
                q.bias = g.value(v[2]);
                conv2d(g, v[0], &q)
            }),
        ));
    }
    cases.push((
        "batchnorm_train",
        vec![r(&[3, 2, 2, 3], 39), pos(&[2], 40), r(&[2], 41)],
        Box::new(|g, v| {
            let mut p = BatchNormParams::new(2)?;
            p.scale = g.value(v[1]);
            p.shift = g.value(v[2]);
            batchnorm(g, v[0], &mut p, true)
        }),
    ));
    cases
        .into_iter()
        .map(|(name, inputs, f)| check("ops", name, inputs, step, OPS_TOLERANCE, f))
        .collect()
}

/// Random nonzero biases and a nonzero last layer.
fn dgcw_params(kind: NormKind, seed: u64) -> Result<DgcwParams> {
    let cfg = DgcwConfig {
        norm_kind: kind,
        downsample_ratio: 2,
        zero_init_g2: false,
        ..DgcwConfig::default()
    };
    let mut p = DgcwParams::new(&Init::new(seed), "dgcw", 3, &cfg)?;
    let mut rng = KeyedRng::new(seed, "gradcheck-bias", 0);
    p.visit_mut("", &mut |_, role, t| {
        if role == ParamRole::Bias {
            *t = Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform(-0.5, 0.5)).expect("same shape")
        }
    });
    Ok(p)
}

fn param_list(p: &dyn Parameterized) -> Vec<Tensor> {
    let mut v = Vec::new();
    p.visit("", &mut |_, role, t| {
        if role.trainable() {
            v.push(t.clone())
        }
    });
    v
}

fn install(p: &mut dyn Parameterized, xs: &[Tensor]) {
    let mut it = xs.iter();
    p.visit_mut("", &mut |_, role, t| {
        if role.trainable() {
            *t = it.next().expect("one tensor per parameter").clone()
        }
    });
}

/// The whole module (input and every parameter) at C = 3, P = 9.
pub fn dgcw_suite() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for kind in NormKind::ALL {
        for imp in [Impl::Naive, Impl::Fused] {
            let base = dgcw_params(kind, 3)?;
            let mut inputs = vec![uniform(&[1, 3, 6, 6], 4, -1.0, 1.0)];
            inputs.extend(param_list(&base));
            let name = format!("{kind}_{imp}");
            out.push(check(
                "dgcw",
                &name,
                inputs,
                1e-5,
                DGCW_TOLERANCE,
                Box::new(move |g, v| {
                    let mut p = base.clone();
                    let values: Vec<Tensor> = v[1..].iter().map(|&x| g.value(x)).collect();
                    install(&mut p, &values);
                    dgcw_forward(g, v[0], &p, imp)
                }),
            )?);
        }
    }
    Ok(out)
}

/// Micro network (widths <= 8, 16 x 16 images, K = 3, no normalization)
/// through the full loss.
pub fn net_suite() -> Result<Vec<CaseResult>> {
    let x = uniform(&[2, 3, 16, 16], 11, -1.0, 1.0);
    let labels = Labels::new([2, 16, 16], (0..512).map(|i| ((i * 7) % 3) as u32).collect())?;
    let cases = [
        (ContextKind::Dgcw, HeadKind::None, NormKind::Dbs, Impl::Fused),
        (ContextKind::Dgcw, HeadKind::Ppm, NormKind::Softmax, Impl::Naive),
        (ContextKind::Dgcw, HeadKind::Aspp, NormKind::Tanh, Impl::Fused),
        (ContextKind::None, HeadKind::None, NormKind::Dbs, Impl::Fused),
        (ContextKind::Conv, HeadKind::Aspp, NormKind::Dbs, Impl::Fused),
    ];
    let mut out = Vec::new();
    for (context, head, kind, imp) in cases {
        let mut cfg = NetworkConfig {
            class_count: 3,
            backbone_widths: vec![4, 6, 8, 8],
            reduced_channels: 4,
            head,
            context,
            dgcw_impl: imp,
            aspp_out_channels: 6,
            ppm_bins: vec![1, 2],
            batchnorm: false,
            ..NetworkConfig::default()
        };
        cfg.dgcw.downsample_ratio = 1;
        cfg.dgcw.norm_kind = kind;
        cfg.dgcw.zero_init_g2 = false;
        let mut base = NetworkParams::new(&cfg, 6)?;
        // He gain keeps activations from shrinking layer by layer without
        // normalization; nonzero biases keep dead pixels off ReLU kinks.
        let mut rng = KeyedRng::new(6, "gradcheck-bias", 0);
        base.visit_mut("", &mut |_, role, t| match role {
            ParamRole::Weight => *t = t.map(|v| v * (6.0 as Real).sqrt()),
            ParamRole::Bias => {
                *t = Tensor::from_fn(t.shape().to_vec(), |_| rng.uniform(-0.1, 0.1)).expect("same shape")
            }
            _ => {}
        });
        let inputs = param_list(&base);
        let (x, labels) = (x.clone(), labels.clone());
        let report = gradcheck_report(
            |g, xs| {
                let mut p = base.clone();
                install(&mut p, xs);
                let out = dgcwnet_forward(g, g.constant(x.clone()), &cfg, &mut p, Mode::Train)?;
                Ok(total_loss(g, &out, &labels, 0.4, None)?.0)
            },
            &inputs,
            1e-5,
            4,
        )?;
        out.push(CaseResult {
            suite: "net",
            case: format!("{context}_{head}_{kind}_{imp}"),
            max_rel_error: report.max_rel_error,
            tolerance: NET_TOLERANCE,
            checked: report.checked,
        });
    }
    Ok(out)
}
