//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 6 are empirical outcomes of training on the synthetic
//! data. They are run and reported in full, but only the deterministic
//! criteria decide the exit status.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dgcw_core::baselines::{apply_context_operator, nonlocal_context, DgcwOperator, NonLocalOperator, NonLocalParams};
use dgcw_core::dgcw::{
    channel_distance, dgcw_forward, normalize_weights, DgcwConfig, DgcwParams, Impl, NormKind, DEFAULT_EPSILON,
};
use dgcw_core::layers::{Init, Parameterized};
use dgcw_core::metrics::{miou, ConfusionMatrix};
use dgcw_core::network::{dgcwnet_forward, ContextKind, Mode, NetworkConfig, NetworkParams};
use dgcw_core::rng::KeyedRng;
use dgcw_core::tensor::io::{self, DType};
use dgcw_core::training::{ohem_filter, poly_lr};
use dgcw_core::{Graph, Real, Tensor};

/// Criterion 1: per-suite bounds and the wall-clock budget.
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
/// Criterion 2.
const EQUIVALENCE_TOL: Real = 1e-12;
const EQUIVALENCE_CASES: u64 = 120;
/// Criterion 3.
const IDENTITY_INPUTS: u64 = 20;
/// Criterion 5.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_WINS: usize = 4;
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Criterion 8.
const SLOPE_TARGET: f64 = 2.0;
const SLOPE_TOL: f64 = 0.1;
const FUSED_FRACTION: f64 = 0.25;
/// Criterion 10.
const SKELETON_TOL: Real = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = KeyedRng::new(seed, "acceptance", 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0)).unwrap()
}

fn dgcw_bin(args: &[&str], extra: &[(&str, String)]) -> Result<String, String> {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dgcw"));
    c.args(args);
    for (k, v) in extra {
        c.arg(format!("--{k}")).arg(v);
    }
    let o = c.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!(
            "dgcw {} exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Column `col` of data row `row` of a CSV file.
fn cell(path: &Path, row: usize, col: usize) -> Result<String, String> {
    let text = read(path)?;
    text.lines()
        .nth(row + 1)
        .and_then(|l| l.split(',').nth(col))
        .map(str::to_string)
        .ok_or_else(|| format!("{}: no cell ({row}, {col})", path.display()))
}

fn num(s: &str) -> Result<f64, String> {
    s.parse().map_err(|e| format!("{s:?}: {e}"))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn criterion_1(out: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut pass = true;
    for target in ["ops", "dgcw", "net"] {
        let name = format!("gradcheck_{target}");
        let res = dgcw_bin(
            &["gradcheck"],
            &[("target", target.into()), ("out", out.display().to_string()), ("run_name", name.clone())],
        );
        pass &= res.is_ok();
        let report = read(&out.join(&name).join("report.csv"))?;
        let max = report
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(2).and_then(|v| v.parse::<f64>().ok()))
            .fold(0.0, f64::max);
        let tol = report.lines().nth(1).and_then(|l| l.split(',').nth(3)).unwrap_or("?").to_string();
        worst.push(format!("{target} {max:.2e} < {tol}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < GRADCHECK_BUDGET;
    Ok(outcome(pass, format!("{}; {:.1} s", worst.join(", "), elapsed.as_secs_f64())))
}

/// Output plus the gradient of every input and parameter.
fn pass_grads(f: &Tensor, p: &DgcwParams, imp: Impl, probe_seed: u64) -> Vec<Tensor> {
    let g = Graph::new();
    let x = g.param(f);
    let y = dgcw_forward(&g, x, p, imp).unwrap();
    let probe = g.constant(rand(&g.shape(y), probe_seed));
    let loss = g.sum_all(g.mul(y, probe).unwrap()).unwrap();
    g.backward(loss).unwrap();
    let mut out = vec![g.value(y), g.grad_of(f).unwrap()];
    p.visit("", &mut |_, _, t| out.push(g.grad_of(t).unwrap_or_else(|| t.map(|_| 0.0))));
    out
}

fn criterion_2() -> Outcome {
    let mut worst: Real = 0.0;
    let mut per_kind = [0usize; 3];
    for case in 0..EQUIVALENCE_CASES {
        let mut rng = KeyedRng::new(case, "criterion-2", 0);
        let kind_index = case as usize % 3;
        let ratio = 1 + rng.below(2);
        let side = 1 + rng.below(8);
        let cfg = DgcwConfig {
            norm_kind: NormKind::ALL[kind_index],
            downsample_ratio: ratio,
            block: 1 + rng.below(24),
            zero_init_g2: false,
            ..DgcwConfig::default()
        };
        let c = 1 + rng.below(16);
        let n = 1 + rng.below(2);
        let p = DgcwParams::new(&Init::new(case), "dgcw", c, &cfg).unwrap();
        let f = rand(&[n, c, side * ratio, side * ratio], case);
        let naive = pass_grads(&f, &p, Impl::Naive, case);
        let fused = pass_grads(&f, &p, Impl::Fused, case);
        for (a, b) in naive.iter().zip(&fused) {
            worst = worst.max(b.max_rel_diff(a).unwrap());
        }
        per_kind[kind_index] += 1;
    }
    outcome(
        worst <= EQUIVALENCE_TOL,
        format!(
            "{EQUIVALENCE_CASES} cases (dbs {}, softmax {}, tanh {}), worst relative difference {worst:.2e}",
            per_kind[0], per_kind[1], per_kind[2]
        ),
    )
}

fn criterion_3() -> Outcome {
    let base = NetworkConfig::default();
    let with = NetworkConfig {
        context: ContextKind::Dgcw,
        ..base.clone()
    };
    let mut identical = 0;
    for i in 0..IDENTITY_INPUTS {
        let x = rand(&[2, 3, 32, 32], 1000 + i);
        let mode = if i % 2 == 0 { Mode::Eval } else { Mode::Train };
        let logits = |cfg: &NetworkConfig| {
            let mut p = NetworkParams::new(cfg, i).unwrap();
            let g = Graph::no_grad();
            let out = dgcwnet_forward(&g, g.constant(x.clone()), cfg, &mut p, mode).unwrap();
            g.value(out.main_logits)
        };
        if logits(&base).bit_eq(&logits(&with)) {
            identical += 1;
        }
    }
    outcome(
        identical == IDENTITY_INPUTS,
        format!("{identical}/{IDENTITY_INPUTS} inputs bit-identical (train and eval mode)"),
    )
}

fn criterion_4() -> Outcome {
    let (p, c) = (6, 5);
    let q = rand(&[1, p, c], 7);
    let mut kd = rand(&[1, p, c], 8).to_vec();
    // K_j = Q_i for these pairs.
    let pairs = [(0, 3), (2, 2), (5, 1)];
    for &(i, j) in &pairs {
        kd[j * c..(j + 1) * c].copy_from_slice(&q.data()[i * c..(i + 1) * c]);
    }
    let k = Tensor::new(vec![1, p, c], kd).unwrap();
    let g = Graph::no_grad();
    let m = channel_distance(&g, g.constant(q), g.constant(k)).unwrap();
    let w = g.value(normalize_weights(&g, m, NormKind::Dbs, DEFAULT_EPSILON).unwrap());
    let zero_pairs = pairs
        .iter()
        .filter(|&&(i, j)| (0..c).all(|ch| w.at(&[0, ch, i, j]) == 0.0))
        .count();
    let others_nonzero = (0..p)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .filter(|ij| !pairs.contains(ij))
        .all(|(i, j)| (0..c).any(|ch| w.at(&[0, ch, i, j]) != 0.0));
    outcome(
        zero_pairs == pairs.len() && others_nonzero,
        format!("{zero_pairs}/{} matched pairs exactly zero; unmatched pairs nonzero: {others_nonzero}", pairs.len()),
    )
}

struct Ablation {
    /// Final val mIoU per seed for none, conv, dgcw.
    miou: [Vec<f64>; 3],
    runs: [Vec<PathBuf>; 3],
    slowest: Duration,
}

const VARIANTS: [&str; 3] = ["none", "conv", "dgcw"];

fn train_ablation(out: &Path, data: &Path) -> Result<Ablation, String> {
    let mut ab = Ablation {
        miou: Default::default(),
        runs: Default::default(),
        slowest: Duration::ZERO,
    };
    for &seed in &SEEDS {
        for (v, context) in VARIANTS.iter().enumerate() {
            let name = format!("train_{context}_seed{seed}");
            let start = Instant::now();
            dgcw_bin(
                &["train"],
                &[
                    ("context", context.to_string()),
                    ("seed", seed.to_string()),
                    ("data_dir", data.display().to_string()),
                    ("out", out.display().to_string()),
                    ("run_name", name.clone()),
                ],
            )?;
            let took = start.elapsed();
            ab.slowest = ab.slowest.max(took);
            let log = read(&out.join(&name).join("metrics.csv"))?;
            let last = log.lines().last().ok_or("empty log")?;
            let m = num(last.rsplit(',').next().unwrap_or(""))?;
            eprintln!("  {name}: final val mIoU {m:.4} ({:.0} s)", took.as_secs_f64());
            ab.miou[v].push(m);
            ab.runs[v].push(out.join(&name));
        }
    }
    Ok(ab)
}

fn criterion_5(ab: &Ablation) -> Outcome {
    let [none, conv, dgcw] = &ab.miou;
    let wins = (0..SEEDS.len()).filter(|&s| dgcw[s] > conv[s]).count();
    let (mn, mc, md) = (median(none), median(conv), median(dgcw));
    let pass = md > mn && wins >= MIN_WINS && ab.slowest <= RUN_BUDGET;
    outcome(
        pass,
        format!(
            "median none {mn:.4} conv {mc:.4} dgcw {md:.4}; dgcw beats conv in {wins}/{} seeds; slowest run {:.0} s",
            SEEDS.len(),
            ab.slowest.as_secs_f64()
        ),
    )
}

fn criterion_6(out: &Path, data: &Path, ab: &Ablation) -> Result<Outcome, String> {
    let mut higher = 0;
    let mut pairs = Vec::new();
    for s in 0..SEEDS.len() {
        let (base, dg) = (&ab.runs[0][s], &ab.runs[2][s]);
        let name = format!("variance_seed{}", SEEDS[s]);
        dgcw_bin(
            &["variance"],
            &[
                ("config", dg.join("config.resolved").display().to_string()),
                ("checkpoint", dg.join("final").display().to_string()),
                ("compare_config", base.join("config.resolved").display().to_string()),
                ("compare_checkpoint", base.join("final").display().to_string()),
                ("data_dir", data.display().to_string()),
                ("out", out.display().to_string()),
                ("run_name", name.clone()),
            ],
        )?;
        let summary = out.join(&name).join("summary.csv");
        let (vd, vb) = (num(&cell(&summary, 0, 1)?)?, num(&cell(&summary, 1, 1)?)?);
        if vd > vb {
            higher += 1;
        }
        pairs.push(format!("{vd:.3e}/{vb:.3e}"));
    }
    Ok(outcome(
        higher >= MIN_WINS,
        format!(
            "dgcw/baseline mean variance per seed: {}; dgcw higher in {higher}/{}",
            pairs.join(", "),
            SEEDS.len()
        ),
    ))
}

fn criterion_7(out: &Path, data: &Path, ab: &Ablation) -> Result<Outcome, String> {
    let run = &ab.runs[2][0];
    let configs = [
        ("plain", "1", "false"),
        ("ms", "0.75,1,1.25,1.5", "false"),
        ("flip", "1", "true"),
        ("ms_flip", "0.75,1,1.25,1.5", "true"),
    ];
    let mut contents = Vec::new();
    let mut mious = Vec::new();
    let mut reproducible = true;
    for (label, scales, flip) in configs {
        let mut copies = Vec::new();
        for rep in 0..2 {
            let name = format!("eval_{label}_{rep}");
            dgcw_bin(
                &["eval"],
                &[
                    ("config", run.join("config.resolved").display().to_string()),
                    ("checkpoint", run.join("final").display().to_string()),
                    ("data_dir", data.display().to_string()),
                    ("scales", scales.to_string()),
                    ("flip", flip.to_string()),
                    ("out", out.display().to_string()),
                    ("run_name", name.clone()),
                ],
            )?;
            let dir = out.join(&name);
            copies.push((read(&dir.join("summary.csv"))?, read(&dir.join("per_class.csv"))?));
        }
        reproducible &= copies[0] == copies[1];
        mious.push(num(copies[0].0.lines().nth(1).and_then(|l| l.split(',').next()).unwrap_or(""))?);
        contents.push(copies.swap_remove(0));
    }
    let distinct = (0..contents.len()).all(|a| (a + 1..contents.len()).all(|b| contents[a] != contents[b]));
    let base = mious[0];
    Ok(outcome(
        reproducible && distinct,
        format!(
            "plain {base:.4}; MS {:+.4}, flip {:+.4}, MS+flip {:+.4}; reproducible {reproducible}, distinct {distinct}",
            mious[1] - base,
            mious[2] - base,
            mious[3] - base
        ),
    ))
}

fn criterion_8(out: &Path) -> Result<Outcome, String> {
    dgcw_bin(&["bench"], &[("out", out.display().to_string()), ("run_name", "bench".into())])?;
    let dir = out.join("bench");
    let fits = read(&dir.join("fit.csv"))?;
    let slope = fits
        .lines()
        .find(|l| l.starts_with("naive,"))
        .and_then(|l| l.split(',').nth(2))
        .ok_or("no naive fit")?;
    let slope = num(slope)?;
    let bench = read(&dir.join("bench.csv"))?;
    let aux_at = |imp: &str| -> Option<f64> {
        bench
            .lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|r| r[0] == imp && r[3] == "64")
            .and_then(|r| r[5].parse().ok())
    };
    let (naive, fused) = (aux_at("naive").ok_or("no naive P = 64 row")?, aux_at("fused").ok_or("no fused P = 64 row")?);
    let ratio = fused / naive;
    Ok(outcome(
        (slope - SLOPE_TARGET).abs() <= SLOPE_TOL && ratio <= FUSED_FRACTION,
        format!("naive memory slope {slope:.3}; fused/naive at P = 64 {ratio:.3}"),
    ))
}

fn criterion_9() -> Outcome {
    let mut checks = Vec::new();
    // OHEM keep count: two pixels below the threshold, then a floor of three.
    let probs = [Some(0.1), Some(0.9), Some(0.5), None, Some(0.8)];
    let kept = |min_kept| ohem_filter(&probs, 0.7, min_kept).iter().filter(|&&k| k).count();
    checks.push(("ohem", kept(0) == 2 && kept(3) == 3 && kept(10) == 4));
    checks.push((
        "poly",
        poly_lr(0.01, 0, 1500).unwrap() == 0.01 && poly_lr(0.01, 1500, 1500).unwrap() == 0.0,
    ));
    // Truth-major counts [[3, 1], [0, 2]]: IoU 3/4 and 2/3.
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 0, 2]).unwrap();
    let r = miou(&cm);
    let want = (0.75 + 2.0 / 3.0) / 2.0;
    checks.push(("miou", (r.miou - want).abs() < 1e-15));
    let t = rand(&[2, 3, 4], 9);
    let native = if dgcw_core::PRECISION == "f64" { DType::F64 } else { DType::F32 };
    let back = io::decode(&io::encode(&t, native).unwrap()).unwrap().0;
    checks.push(("dgt1", back.bit_eq(&t)));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "ohem, poly endpoints, mIoU hand case, DGT1 round trip".to_string()
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn criterion_10() -> Outcome {
    let mut worst: Real = 0.0;
    for case in 0..10u64 {
        let f = rand(&[2, 6, 8, 8], 50 + case);
        let kind = NormKind::ALL[case as usize % 3];
        let cfg = DgcwConfig {
            norm_kind: kind,
            downsample_ratio: 2,
            zero_init_g2: false,
            ..DgcwConfig::default()
        };
        let dp = DgcwParams::new(&Init::new(case), "dgcw", 6, &cfg).unwrap();
        let down = if case % 2 == 0 { None } else { Some(2) };
        let np = NonLocalParams::new(&Init::new(case), "nl", 6, down, false).unwrap();
        let g = Graph::no_grad();
        let x = g.constant(f);
        let pairs = [
            (
                dgcw_forward(&g, x, &dp, Impl::Naive).unwrap(),
                apply_context_operator(&g, x, &DgcwOperator(&dp)).unwrap(),
            ),
            (
                nonlocal_context(&g, x, &np).unwrap(),
                apply_context_operator(&g, x, &NonLocalOperator(&np)).unwrap(),
            ),
        ];
        for (a, b) in pairs {
            worst = worst.max(g.value(b).max_rel_diff(&g.value(a)).unwrap());
        }
    }
    outcome(
        worst <= SKELETON_TOL,
        format!("DGCW and non-local through the skeleton, worst relative difference {worst:.2e}"),
    )
}

fn report(n: usize, o: Result<Outcome, String>, hard: bool, failed: &mut Vec<usize>) {
    let o = o.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!(
        "criterion {n:>2}: {}  {}{}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        if hard { "" } else { "  [empirical, reported only]" }
    );
    if !o.pass && hard {
        failed.push(n);
    }
}

fn main() -> ExitCode {
    if dgcw_core::PRECISION != "f64" {
        println!("acceptance: skipped, the criteria are defined for the 64-bit build");
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let out = tmp.path();
    let mut failed = Vec::new();
    let start = Instant::now();

    report(1, criterion_1(out), true, &mut failed);
    report(2, Ok(criterion_2()), true, &mut failed);
    report(3, Ok(criterion_3()), true, &mut failed);
    report(4, Ok(criterion_4()), true, &mut failed);

    let data = out.join("data");
    let ablation = dgcw_bin(
        &["gen-data"],
        &[("data_dir", data.display().to_string()), ("out", out.display().to_string()), ("run_name", "data".into())],
    )
    .and_then(|_| train_ablation(out, &data));
    match &ablation {
        Ok(ab) => {
            report(5, Ok(criterion_5(ab)), false, &mut failed);
            report(6, criterion_6(out, &data, ab), false, &mut failed);
            report(7, criterion_7(out, &data, ab), true, &mut failed);
        }
        Err(e) => {
            report(5, Err(e.clone()), false, &mut failed);
            report(6, Err(e.clone()), false, &mut failed);
            report(7, Err(e.clone()), true, &mut failed);
        }
    }

    report(8, criterion_8(out), true, &mut failed);
    report(9, Ok(criterion_9()), true, &mut failed);
    report(10, Ok(criterion_10()), true, &mut failed);
    println!("acceptance finished in {:.0} s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("deterministic criteria failed: {failed:?}");
        ExitCode::FAILURE
    }
}
