//! The six commands. Each one writes its artifacts into a fresh run
//! directory that starts with `config.resolved`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use dgcw_core::dgcw::{dgcw_forward, DgcwParams, Impl};
use dgcw_core::layers::{load_checkpoint, Init, Labels, Parameterized};
use dgcw_core::metrics::{
    argmax_labels, miou, ms_flip_infer, uniform_edges, variance_histogram, ClassStats, ClassStatsAccumulator,
    ConfusionMatrix,
};
use dgcw_core::network::{dgcwnet_forward, Mode, NetworkConfig, NetworkParams};
use dgcw_core::rng::KeyedRng;
use dgcw_core::training::{train, Dataset, Split};
use dgcw_core::{Graph, Real, Tensor};

use crate::alloc;
use crate::config::RunConfig;
use crate::suites::{self, CaseResult};
use crate::{CliError, CliResult};

pub const RESOLVED: &str = "config.resolved";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Gradcheck,
    Bench,
    Variance,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::Train,
        Command::Eval,
        Command::Gradcheck,
        Command::Bench,
        Command::Variance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Bench => "bench",
            Command::Variance => "variance",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::GenData => "write the synthetic dataset and its manifest",
            Command::Train => "train a network and write its log and checkpoints",
            Command::Eval => "evaluate a checkpoint with optional multi-scale and flip inference",
            Command::Gradcheck => "compare analytic gradients with finite differences",
            Command::Bench => "time and measure the naive and fused context kernels",
            Command::Variance => "class-wise feature variance histogram of checkpoints",
        }
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown command {s:?}")))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// `out/<run_name>`, or `out/<command>_<timestamp>` with a numeric suffix
/// when that already exists.
fn run_dir(cmd: Command, cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = PathBuf::from(cfg.get("out"));
    let dir = match cfg.get("run_name") {
        "" => {
            let stem = format!("{}_{}", cmd.name(), chrono::Local::now().format("%Y%m%d-%H%M%S"));
            let mut dir = out.join(&stem);
            let mut n = 1;
            while dir.exists() {
                dir = out.join(format!("{stem}-{n}"));
                n += 1;
            }
            dir
        }
        name => out.join(name),
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// Runs `cmd` and returns its run directory. Progress lines go to `log`.
pub fn run(cmd: Command, cfg: &RunConfig, log: &mut dyn Write) -> CliResult<PathBuf> {
    cfg.check_precision()?;
    let dir = run_dir(cmd, cfg)?;
    write_file(&dir.join(RESOLVED), &cfg.resolved())?;
    match cmd {
        Command::GenData => gen_data(cfg, &dir, log),
        Command::Train => cmd_train(cfg, &dir, log),
        Command::Eval => eval(cfg, &dir, log),
        Command::Gradcheck => gradcheck(cfg, &dir, log),
        Command::Bench => bench(cfg, &dir, log),
        Command::Variance => variance(cfg, &dir, log),
    }?;
    Ok(dir)
}

fn say(log: &mut dyn Write, line: impl std::fmt::Display) {
    // Progress output is best effort; a closed pipe must not fail the run.
    let _ = writeln!(log, "{line}");
}

pub const MANIFEST: &str = "manifest.csv";

fn gen_data(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> CliResult<()> {
    let spec = cfg.synth()?;
    let data = cfg.path("data_dir").unwrap_or_else(|| dir.join("data"));
    let mut manifest = String::from("split,index,image,label\n");
    for split in [Split::Train, Split::Val] {
        let ds = Dataset::synthetic(&spec, split)?;
        ds.save(&data, split)?;
        for i in 0..ds.len() {
            let name = |p: PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let _ = writeln!(
                manifest,
                "{},{i},{},{}",
                split.name(),
                name(Dataset::image_path(&data, split, i)),
                name(Dataset::label_path(&data, split, i))
            );
        }
    }
    write_file(&data.join(MANIFEST), &manifest)?;
    say(
        log,
        format_args!("wrote {} + {} pairs to {}", spec.train_count, spec.val_count, data.display()),
    );
    Ok(())
}

fn split(cfg: &RunConfig) -> CliResult<Split> {
    match cfg.get("split") {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        s => Err(CliError::Usage(format!("split = {s:?}: expected train or val"))),
    }
}

/// The dataset from `data_dir`, or generated in memory from the synthetic
/// keys.
fn dataset(cfg: &RunConfig, split: Split) -> CliResult<Dataset> {
    match cfg.path("data_dir") {
        Some(dir) => Ok(Dataset::load(&dir, split)?),
        None => Ok(Dataset::synthetic(&cfg.synth()?, split)?),
    }
}

fn cmd_train(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> CliResult<()> {
    let net = cfg.network()?;
    let tc = cfg.training()?;
    let (train_set, val_set) = (dataset(cfg, Split::Train)?, dataset(cfg, Split::Val)?);
    let mut params = NetworkParams::new(&net, tc.seed)?;
    let start = Instant::now();
    let report = train(&net, &mut params, &train_set, &val_set, &tc, Some(dir), &mut |row| {
        say(log, row.csv())
    })?;
    say(
        log,
        format_args!(
            "best val mIoU {} at iteration {} ({:.1} s)",
            report.best_miou,
            report.best_iter,
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

/// Network parameters for the configured architecture, replaced by the
/// checkpoint at `path`.
fn restore(net: &NetworkConfig, path: &Path) -> CliResult<NetworkParams> {
    let mut params = NetworkParams::new(net, 0)?;
    load_checkpoint(path, &mut params).map_err(|e| {
        CliError::Usage(format!(
            "{}: {e} (pass the training run's config.resolved with --config)",
            path.display()
        ))
    })?;
    Ok(params)
}

fn required(cfg: &RunConfig, key: &str) -> CliResult<PathBuf> {
    cfg.path(key).ok_or_else(|| CliError::Usage(format!("{key} is required")))
}

/// Binary PGM with labels spread over the grey range.
fn pgm(labels: &Labels, classes: usize) -> Vec<u8> {
    let [_, h, w] = labels.shape();
    let step = 255 / (classes.max(2) - 1) as u32;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(labels.data()[..h * w].iter().map(|&l| (l.min(classes as u32 - 1) * step) as u8));
    out
}

fn eval(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> CliResult<()> {
    let net = cfg.network()?;
    let params = restore(&net, &required(cfg, "checkpoint")?)?;
    let data = dataset(cfg, split(cfg)?)?;
    let scales: Vec<Real> = cfg.list("scales")?;
    let flip: bool = cfg.parse("flip")?;
    let batch: usize = cfg.parse::<usize>("batch_size")?.max(1);
    let previews: usize = cfg.parse("previews")?;
    let mut cm = ConfusionMatrix::new(net.class_count)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.batch(chunk)?;
        let pred = argmax_labels(&ms_flip_infer(&x, &net, &params, &scales, flip)?)?;
        cm.add(&y, &pred)?;
        for (b, &i) in chunk.iter().enumerate() {
            if i < previews {
                let path = dir.join(format!("pred_{i}.pgm"));
                fs::write(&path, pgm(&pred.item(b), net.class_count)).map_err(|e| io_err(&path, e))?;
            }
        }
    }
    let report = miou(&cm);
    let mut per_class = String::from("class,iou,truth_pixels\n");
    for (k, iou) in report.per_class.iter().enumerate() {
        let truth: u64 = (0..net.class_count).map(|p| cm.at(k, p)).sum();
        let iou = iou.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(per_class, "{k},{iou},{truth}");
    }
    write_file(&dir.join("per_class.csv"), &per_class)?;
    let scale_text: Vec<String> = scales.iter().map(|s| s.to_string()).collect();
    write_file(
        &dir.join("summary.csv"),
        &format!("miou,scales,flip\n{},{},{flip}\n", report.miou, scale_text.join(";")),
    )?;
    say(log, format_args!("mIoU {}", report.miou));
    Ok(())
}

fn gradcheck(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> CliResult<()> {
    if dgcw_core::PRECISION != "f64" {
        return Err(CliError::Usage("gradcheck needs the 64-bit build".into()));
    }
    let target = cfg.get("target");
    let runs: Vec<fn() -> dgcw_core::Result<Vec<CaseResult>>> = match target {
        "ops" => vec![suites::ops_suite],
        "dgcw" => vec![suites::dgcw_suite],
        "net" => vec![suites::net_suite],
        "all" => vec![suites::ops_suite, suites::dgcw_suite, suites::net_suite],
        t => return Err(CliError::Usage(format!("target = {t:?}: expected ops, dgcw, net or all"))),
    };
    let start = Instant::now();
    let mut results = Vec::new();
    for f in runs {
        results.extend(f()?);
    }
    let mut report = String::from("suite,case,max_rel_error,tolerance,checked,pass\n");
    for r in &results {
        let line = format!(
            "{},{},{:e},{:e},{},{}",
            r.suite,
            r.case,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            r.passed()
        );
        say(log, &line);
        report.push_str(&line);
        report.push('\n');
    }
    write_file(&dir.join("report.csv"), &report)?;
    say(log, format_args!("{:.1} s", start.elapsed().as_secs_f64()));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.case.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Relative forward/gradient difference tolerated between the two
/// kernels before any timing is reported.
#[cfg(not(feature = "f32"))]
pub const BENCH_TOLERANCE: Real = 1e-10;
#[cfg(feature = "f32")]
pub const BENCH_TOLERANCE: Real = 1e-3;

/// Output and every gradient of one forward/backward pass.
fn module_pass(f: &Tensor, p: &DgcwParams, imp: Impl) -> CliResult<Vec<Tensor>> {
    let g = Graph::new();
    let x = g.param(f);
    let y = dgcw_forward(&g, x, p, imp)?;
    let mut rng = KeyedRng::new(0, "bench-probe", 0);
    let probe = g.constant(Tensor::from_fn(g.shape(y), |_| rng.uniform(-1.0, 1.0))?);
    let loss = g.sum_all(g.mul(y, probe)?)?;
    g.backward(loss)?;
    let mut out = vec![g.value(y), g.grad_of(f).unwrap_or_else(|| f.map(|_| 0.0))];
    p.visit("", &mut |_, _, t| out.push(g.grad_of(t).unwrap_or_else(|| t.map(|_| 0.0))));
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn bench(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> CliResult<()> {
    let impls: Vec<Impl> = cfg.list("bench_impls")?;
    let c: usize = cfg.parse("bench_channels")?;
    let extents: Vec<usize> = cfg.list("bench_extents")?;
    let repeats: usize = cfg.parse::<usize>("bench_repeats")?.max(1);
    let cap = cfg.parse::<f64>("bench_mem_cap_mb")? * 1024.0 * 1024.0;
    let mut dcfg = cfg.network()?.dgcw;
    dcfg.zero_init_g2 = false;
    let ratio = dcfg.downsample_ratio;
    if impls.is_empty() || extents.is_empty() || c == 0 {
        return Err(CliError::Usage("bench needs implementations, extents and channels".into()));
    }
    let seed: u64 = cfg.parse("seed")?;
    let params = DgcwParams::new(&Init::new(seed), "bench", c, &dcfg)?;
    let cg = params.hidden();
    let mut shapes = Vec::new();
    for &e in &extents {
        if e % ratio != 0 {
            return Err(CliError::Usage(format!("extent {e} is not a multiple of downsample_ratio {ratio}")));
        }
        let p = (e / ratio) * (e / ratio);
        // M, weights, weighted values, their gradients and the hidden layer.
        let pair_bytes = (p * p * (6 * c + 3 * cg) * std::mem::size_of::<Real>()) as f64;
        if pair_bytes > cap {
            return Err(CliError::Usage(format!(
                "extent {e} (P = {p}) needs about {:.0} MB of pair tensors in the naive kernel, above bench_mem_cap_mb",
                pair_bytes / 1048576.0
            )));
        }
        let mut rng = KeyedRng::new(seed, "bench-input", e as u64);
        let f = Tensor::from_fn(vec![1, c, e, e], |_| rng.uniform(-1.0, 1.0))?;
        shapes.push((e, p, f));
    }
    // Equivalence first: nothing is timed unless the kernels agree.
    for (e, _, f) in &shapes {
        let naive = module_pass(f, &params, Impl::Naive)?;
        let fused = module_pass(f, &params, Impl::Fused)?;
        for (t, (a, b)) in naive.iter().zip(&fused).enumerate() {
            let d = b.max_rel_diff(a)?;
            if d.is_nan() || d > BENCH_TOLERANCE {
                let what = ["output", "input gradient"].get(t).copied().unwrap_or("parameter gradient");
                return Err(CliError::Numerical(format!(
                    "naive and fused kernels disagree at extent {e}: {what} {t} differs by {d:e}"
                )));
            }
        }
    }
    let tracked = alloc::is_active();
    let mut csv = String::from("impl,channels,extent,p,time_ms,aux_bytes\n");
    let mut fits = String::from("impl,time_slope,aux_bytes_slope\n");
    let mut aux_at_64 = Vec::new();
    for &imp in &impls {
        let (mut tpts, mut mpts) = (Vec::new(), Vec::new());
        for (e, p, f) in &shapes {
            let (res, peak) = alloc::measure_peak(|| module_pass(f, &params, imp));
            res?;
            let mut best = f64::INFINITY;
            for _ in 0..repeats {
                let t = Instant::now();
                module_pass(f, &params, imp)?;
                best = best.min(t.elapsed().as_secs_f64() * 1e3);
            }
            let aux = if tracked { peak.to_string() } else { String::new() };
            let line = format!("{imp},{c},{e},{p},{best:.3},{aux}");
            say(log, &line);
            csv.push_str(&line);
            csv.push('\n');
            tpts.push((*p as f64, best));
            if tracked {
                mpts.push((*p as f64, peak as f64));
                if *p == 64 {
                    aux_at_64.push((imp, peak));
                }
            }
        }
        let fmt = |s: Option<f64>| s.map(|v| format!("{v:.4}")).unwrap_or_default();
        let line = format!("{imp},{},{}", fmt(loglog_slope(&tpts)), fmt(loglog_slope(&mpts)));
        say(log, format_args!("fit {line}"));
        fits.push_str(&line);
        fits.push('\n');
    }
    write_file(&dir.join("bench.csv"), &csv)?;
    write_file(&dir.join("fit.csv"), &fits)?;
    let naive = aux_at_64.iter().find(|(i, _)| *i == Impl::Naive);
    let fused = aux_at_64.iter().find(|(i, _)| *i == Impl::Fused);
    if let (Some((_, n)), Some((_, f))) = (naive, fused) {
        say(log, format_args!("fused/naive aux bytes at P = 64: {:.4}", *f as f64 / *n as f64));
    }
    if !tracked {
        say(log, "allocation tracking inactive: aux_bytes left empty");
    }
    Ok(())
}

/// Class statistics of the context-module output over `data`.
pub fn feature_stats(net: &NetworkConfig, params: &NetworkParams, data: &Dataset, batch: usize) -> CliResult<ClassStats> {
    let mut acc = ClassStatsAccumulator::new(net.class_count, net.reduced_channels);
    let mut p = params.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let g = Graph::no_grad();
        let out = dgcwnet_forward(&g, g.constant(x), net, &mut p, Mode::Eval)?;
        acc.add(&g.value(out.features), &y)?;
    }
    Ok(acc.finish()?)
}

fn variance(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> CliResult<()> {
    let net = cfg.network()?;
    let data = dataset(cfg, split(cfg)?)?;
    let batch: usize = cfg.parse("batch_size")?;
    let mut stats = vec![feature_stats(&net, &restore(&net, &required(cfg, "checkpoint")?)?, &data, batch)?];
    if let Some(other) = cfg.path("compare_checkpoint") {
        let other_net = match cfg.path("compare_config") {
            Some(path) => {
                let mut c = RunConfig::default();
                c.apply_file(&path)?;
                c.network()?
            }
            None => net.clone(),
        };
        stats.push(feature_stats(&other_net, &restore(&other_net, &other)?, &data, batch)?);
    }
    let edges: Vec<Real> = if cfg.get("edges").is_empty() {
        // Shared edges spanning every report.
        let mut all = stats[0].clone();
        for s in &stats[1..] {
            all.variance.extend_from_slice(&s.variance);
        }
        uniform_edges(&all, cfg.parse("bins")?)
    } else {
        cfg.list("edges")?
    };
    let counts: Vec<Vec<usize>> = stats.iter().map(|s| variance_histogram(s, &edges)).collect::<Result<_, _>>()?;
    let mut hist = String::from(if stats.len() > 1 { "bin_lo,bin_hi,count,compare_count\n" } else { "bin_lo,bin_hi,count\n" });
    for b in 0..edges.len() - 1 {
        let _ = write!(hist, "{},{}", edges[b], edges[b + 1]);
        for c in &counts {
            let _ = write!(hist, ",{}", c[b]);
        }
        hist.push('\n');
    }
    write_file(&dir.join("histogram.csv"), &hist)?;
    let mut summary = String::from("report,mean_variance,classes_present\n");
    for (name, s) in ["checkpoint", "compare_checkpoint"].iter().zip(&stats) {
        let present = s.present().iter().filter(|&&p| p).count();
        let _ = writeln!(summary, "{name},{},{present}", s.mean_variance());
        say(log, format_args!("{name} mean variance {}", s.mean_variance()));
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!(matches!("fit".parse::<Command>(), Err(CliError::Usage(_))));
    }

    #[test]
    fn loglog_slope_recovers_power_laws() {
        let pts: Vec<(f64, f64)> = [36.0, 64.0, 100.0, 144.0].iter().map(|&p| (p, 3.0 * p * p)).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = [2.0, 8.0].iter().map(|&p| (p, 5.0 * p)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(4.0, 1.0)]), None);
    }

    #[test]
    fn pgm_spreads_labels_over_grey() {
        let l = Labels::new([1, 1, 4], vec![0, 1, 2, 3]).unwrap();
        let bytes = pgm(&l, 4);
        assert!(bytes.starts_with(b"P5\n4 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 85, 170, 255]);
    }
}
