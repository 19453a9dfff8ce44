//! Subcommands: parse the config, run the experiment, write CSV and SVG
//! outputs, and return report lines for the terminal.

use std::fs;
use std::path::{Path, PathBuf};

use butterfly_hessian::codec::{save_checkpoint, RecordFormat};
use butterfly_hessian::hesstrack::DescentRule;
use butterfly_hessian::{Error, MinibatchPolicy, Trace, TrackingMode};

use crate::config::ExperimentConfig;
use crate::data::{load_csv, load_idx_images};
use crate::error::{CliError, CliResult};
use crate::experiments::*;
use crate::plot::{heatmap_pair, LinePlot, Series};

const COMMON_KEYS: [&str; 4] = ["seed", "seeds", "out", "n"];
const TRAIN_KEYS: [&str; 9] = [
    "m",
    "test_m",
    "epochs",
    "lr_q",
    "lr_d",
    "lr_decay",
    "eval_every",
    "restarts",
    "target_ratio",
];

fn allowed(extra: &[&'static str], train: bool) -> Vec<&'static str> {
    let mut keys: Vec<&str> = COMMON_KEYS.to_vec();
    if train {
        keys.extend(TRAIN_KEYS);
    }
    keys.extend(extra);
    keys
}

fn train_params(cfg: &ExperimentConfig, base: TrainParams) -> CliResult<TrainParams> {
    let p = TrainParams {
        m: cfg.get("m", base.m)?,
        test_m: cfg.get("test_m", base.test_m)?,
        epochs: cfg.get("epochs", base.epochs)?,
        lr_q: cfg.get("lr_q", base.lr_q)?,
        lr_d: cfg.get("lr_d", base.lr_d)?,
        lr_decay: cfg.get("lr_decay", base.lr_decay)?,
        eval_every: cfg.get("eval_every", base.eval_every)?,
        restarts: cfg.get("restarts", base.restarts)?,
        target_ratio: cfg.get("target_ratio", base.target_ratio)?,
    };
    p.validate()?;
    Ok(p)
}

fn seeds(cfg: &ExperimentConfig) -> CliResult<Vec<u64>> {
    let count: usize = cfg.get("seeds", 1)?;
    if count == 0 {
        return Err(CliError::Config("seeds must be >= 1".into()));
    }
    Ok(replica_seeds(cfg.get("seed", 0)?, count))
}

fn out_dir(cfg: &ExperimentConfig, command: &str) -> CliResult<PathBuf> {
    let dir = PathBuf::from(cfg.raw("out").unwrap_or(&format!("out/{command}")));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Header plus rows; every field is written with `Display`.
fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn angle_series(label: String, trace: &Trace) -> Series {
    Series::new(
        label,
        trace
            .rows
            .iter()
            .filter_map(|r| r.mean_angle_deg.map(|a| (r.epoch as f64, a)))
            .collect(),
    )
}

fn write_runs(dir: &Path, title: &str, runs: &[RunResult]) -> CliResult<Vec<String>> {
    let mut plot = LinePlot::new(title, "epoch", "average angle (degrees)");
    for r in runs {
        write(dir, &format!("trace_seed{}.csv", r.seed), r.trace.to_csv())?;
        plot.series.push(angle_series(format!("seed {}", r.seed), &r.trace));
    }
    write(dir, "angle.svg", plot.to_svg())?;
    let summary = table(
        &["seed", "final_angle_deg", "initial_loss", "final_loss", "starts"],
        runs.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.final_angle.to_string(),
                r.initial_loss.to_string(),
                r.final_loss.to_string(),
                r.starts.to_string(),
            ]
        }),
    )?;
    write(dir, "summary.csv", summary)?;
    let mut lines: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: final angle {:.2} deg, loss {:.3e} -> {:.3e}", r.seed, r.final_angle, r.initial_loss, r.final_loss))
        .collect();
    if runs.len() > 1 {
        let mean = runs.iter().map(|r| r.final_angle).sum::<f64>() / runs.len() as f64;
        lines.push(format!("mean final angle {mean:.2} deg over {} seeds", runs.len()));
    }
    lines.push(format!("outputs in {}", dir.display()));
    Ok(lines)
}

pub fn synth_approx(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    cfg.check_keys(&allowed(&["n_mu", "target"], true))?;
    let n: usize = cfg.get("n", 64)?;
    let target = match cfg.raw("target").unwrap_or("synthetic") {
        "synthetic" => SymmetricTarget::Synthetic { n_mu: cfg.get("n_mu", 5)? },
        "butterfly" => SymmetricTarget::ExactButterfly,
        other => return Err(CliError::Config(format!("target must be synthetic or butterfly, got {other:?}"))),
    };
    let p = train_params(cfg, TrainParams::default())?;
    let seeds = seeds(cfg)?;
    let dir = out_dir(cfg, "synth-approx")?;
    let results = symmetric_replicas(n, target, &seeds, &p)?;
    for &s in &seeds {
        let h = symmetric_target(n, target, s)?;
        let rows = h.row_iter().map(|r| r.iter().map(|v| v.to_string()).collect());
        let header: Vec<String> = (0..n).map(|j| format!("c{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write(&dir, &format!("target_seed{s}.csv"), table(&header, rows)?)?;
    }
    for (r, model) in &results {
        save_checkpoint(&dir.join(format!("model_seed{}.bfly", r.seed)), model, RecordFormat::Binary)?;
    }
    let runs: Vec<RunResult> = results.into_iter().map(|(r, _)| r).collect();
    write_runs(&dir, &format!("Q D Q^T approximation, n = {n}"), &runs)
}

pub fn rotation(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    cfg.check_keys(&allowed(&["target"], true))?;
    let n: usize = cfg.get("n", 64)?;
    let target = match cfg.raw("target").unwrap_or("haar") {
        "haar" => RotationTarget::Haar,
        "butterfly" => RotationTarget::ExactButterfly,
        other => return Err(CliError::Config(format!("target must be haar or butterfly, got {other:?}"))),
    };
    let p = train_params(cfg, TrainParams::default())?;
    let seeds = seeds(cfg)?;
    let dir = out_dir(cfg, "rotation")?;
    let runs: Vec<RunResult> = rotation_replicas(n, target, &seeds, &p)?.into_iter().map(|(r, _)| r).collect();
    write_runs(&dir, &format!("rotation learning, n = {n}"), &runs)
}

pub fn nmu_sweep_cmd(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    cfg.check_keys(&allowed(&["n_mu"], true))?;
    let n: usize = cfg.get("n", 64)?;
    let default_grid: Vec<usize> = [0, 2, 5, 10, 16, 24, 32, 40, 48, 56, 62, 64].into_iter().filter(|&k| k <= n).collect();
    let n_mus = cfg.get_list("n_mu", &default_grid)?;
    let p = train_params(cfg, TrainParams::default())?;
    let seeds = if cfg.contains("seeds") { seeds(cfg)? } else { replica_seeds(cfg.get("seed", 0)?, 5) };
    let dir = out_dir(cfg, "nmu-sweep")?;
    let points = nmu_sweep(n, &n_mus, &seeds, &p)?;
    let summary = summarize_sweep(&points);
    write(
        &dir,
        "sweep.csv",
        table(
            &["n_mu", "seed", "final_angle_deg"],
            points.iter().map(|q| vec![q.n_mu.to_string(), q.seed.to_string(), q.final_angle.to_string()]),
        )?,
    )?;
    write(
        &dir,
        "summary.csv",
        table(
            &["n_mu", "mean_angle_deg", "std_angle_deg", "runs"],
            summary.iter().map(|s| {
                vec![s.n_mu.to_string(), s.mean_angle.to_string(), s.std_angle.to_string(), s.runs.to_string()]
            }),
        )?,
    )?;
    let mut plot = LinePlot::new(&format!("final angle versus n_mu, n = {n}"), "n_mu", "average angle (degrees)");
    plot.series.push(Series::new("mean", summary.iter().map(|s| (s.n_mu as f64, s.mean_angle)).collect()));
    write(&dir, "sweep.svg", plot.to_svg())?;
    let mut lines: Vec<String> = summary
        .iter()
        .map(|s| format!("n_mu {:>3}: {:.2} +- {:.2} deg ({} runs)", s.n_mu, s.mean_angle, s.std_angle, s.runs))
        .collect();
    lines.push(format!("outputs in {}", dir.display()));
    Ok(lines)
}

pub fn covariance_cmd(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    cfg.check_keys(&allowed(
        &["dataset", "format", "header", "max_rows", "data_fraction", "heatmap_cells"],
        true,
    ))?;
    let path = PathBuf::from(cfg.require::<String>("dataset")?);
    if !path.is_file() {
        return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
    }
    let format = match cfg.raw("format") {
        Some(f) => f.to_string(),
        None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => "csv".into(),
        None => "idx".into(),
    };
    let limit: Option<usize> = cfg.raw("max_rows").map(|_| cfg.require("max_rows")).transpose()?;
    let ds = match format.as_str() {
        "idx" => load_idx_images(&path, limit)?,
        "csv" => load_csv(&path, cfg.get("header", false)?, limit)?,
        other => return Err(CliError::Config(format!("format must be idx or csv, got {other:?}"))),
    };
    let defaults = CovarianceParams::default();
    let p = CovarianceParams {
        train: train_params(cfg, defaults.train)?,
        data_fraction: cfg.get("data_fraction", defaults.data_fraction)?,
        seed: cfg.get("seed", 0)?,
    };
    let cells: usize = cfg.get("heatmap_cells", 128)?;
    let dir = out_dir(cfg, "covariance")?;
    let res = covariance_run(ds, &p)?;
    write(&dir, "trace.csv", res.trace.to_csv())?;
    save_checkpoint(&dir.join("model.bfly"), &res.model, RecordFormat::Binary)?;
    write(
        &dir,
        "covariance.svg",
        heatmap_pair(&res.covariance, &res.learned_unpadded(), ("true covariance", "approximation"), cells),
    )?;
    let mut plot = LinePlot::new("covariance approximation", "epoch", "average angle (degrees)");
    plot.series.push(angle_series("unpadded angle".into(), &res.trace));
    write(&dir, "angle.svg", plot.to_svg())?;
    let (angle_line, angle_field) = match &res.angle {
        Ok(a) => (format!("final angle {:.2} deg ({} valid, {} skipped)", a.mean_deg, a.valid, a.skipped), a.mean_deg.to_string()),
        Err(Error::NoValidSamples { skipped }) => {
            (format!("angle undefined: no valid samples ({skipped} skipped, covariance output is zero)"), String::new())
        }
        Err(e) => return Err(e.clone().into()),
    };
    let report = format!(
        "provenance: {}\nn_raw: {}\nn_padded: {}\nfinal_angle_deg: {}\n",
        res.provenance, res.n_raw, res.n_pad, angle_field
    );
    write(&dir, "report.txt", report)?;
    Ok(vec![
        format!("data: {}", res.provenance),
        angle_line,
        format!("outputs in {}", dir.display()),
    ])
}

fn parse_mode(s: &str) -> CliResult<TrackingMode> {
    match s {
        "track" => Ok(TrackingMode::TrackHessian),
        "inverse" => Ok(TrackingMode::TrackInverseHessian),
        "gd" => Ok(TrackingMode::PlainGd),
        _ => Err(CliError::Config(format!("mode must be track, inverse or gd, got {s:?}"))),
    }
}

/// `full`, `recompute:SIZE` or `reuse:SIZE:R`.
pub fn parse_minibatch(s: &str) -> CliResult<MinibatchPolicy> {
    let bad = || CliError::Config(format!("minibatch must be full, recompute:SIZE or reuse:SIZE:R, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(bad);
    match parts.as_slice() {
        ["full"] => Ok(MinibatchPolicy::FullBatch),
        ["recompute", size] => Ok(MinibatchPolicy::RecomputePrev { size: num(size)? }),
        ["reuse", size, r] => Ok(MinibatchPolicy::Reuse { size: num(size)?, r: num(r)? }),
        _ => Err(bad()),
    }
}

pub fn optimize_params(cfg: &ExperimentConfig) -> CliResult<OptimizeParams> {
    let d = OptimizeParams::default();
    let betas = cfg.get_list("beta", &d.betas)?;
    Ok(OptimizeParams {
        objective: cfg.get::<String>("objective", "quadratic".into())?.parse().map_err(CliError::Config)?,
        n: cfg.get("n", d.n)?,
        cond: cfg.get("cond", d.cond)?,
        examples: cfg.get("examples", d.examples)?,
        lambda: cfg.get("lambda", d.lambda)?,
        noise: cfg.get("noise", d.noise)?,
        mode: parse_mode(cfg.raw("mode").unwrap_or("track"))?,
        descent: match cfg.raw("descent").unwrap_or("inverse") {
            "inverse" => DescentRule::InverseHessian,
            "literal" => DescentRule::LiteralHessian,
            other => return Err(CliError::Config(format!("descent must be inverse or literal, got {other:?}"))),
        },
        minibatch: parse_minibatch(cfg.raw("minibatch").unwrap_or("full"))?,
        gd_betas: cfg.get_list("gd_beta", &betas)?,
        betas,
        steps: cfg.get("steps", d.steps)?,
        target: cfg.raw("target").map(|_| cfg.require("target")).transpose()?,
        line_search: cfg.get("line_search", d.line_search)?,
        lr_q: cfg.get("lr_q", d.lr_q)?,
        lr_d: cfg.get("lr_d", d.lr_d)?,
        start_radius: cfg.get("start_radius", d.start_radius)?,
        seed: cfg.get("seed", d.seed)?,
    })
}

pub fn optimize_cmd(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    cfg.check_keys(&[
        "seed", "out", "n", "objective", "cond", "examples", "lambda", "noise", "mode", "descent", "minibatch", "beta",
        "gd_beta", "steps", "target", "line_search", "lr_q", "lr_d", "start_radius",
    ])?;
    let p = optimize_params(cfg)?;
    let dir = out_dir(cfg, "optimize")?;
    let res = optimize(&p)?;
    write(&dir, "runlog.csv", res.tracked.log.to_csv())?;
    write(&dir, "baseline_gd.csv", res.baseline.log.to_csv())?;
    let row = |name: &str, r: &OptimizeRun| {
        vec![
            name.to_string(),
            r.beta.to_string(),
            r.log.rows.len().to_string(),
            r.iterations_to_target.map(|i| i.to_string()).unwrap_or_default(),
            r.log.final_loss().map(|l| l.to_string()).unwrap_or_default(),
            r.grad_evals.to_string(),
        ]
    };
    let name = |m: TrackingMode| match m {
        TrackingMode::TrackHessian => "track",
        TrackingMode::TrackInverseHessian => "inverse",
        TrackingMode::PlainGd => "gd",
    };
    write(
        &dir,
        "comparison.csv",
        table(
            &["method", "beta", "steps", "iterations_to_target", "final_loss", "grad_evals"],
            [row(name(res.tracked.mode), &res.tracked), row("gd_baseline", &res.baseline)],
        )?,
    )?;
    let mut plot = LinePlot::new("loss versus iteration", "iteration", "loss");
    plot.log_y = true;
    for (label, r) in [(name(res.tracked.mode), &res.tracked), ("plain GD", &res.baseline)] {
        plot.series.push(Series::new(
            format!("{label} (beta {})", r.beta),
            r.log.rows.iter().map(|s| (s.t as f64, s.loss)).collect(),
        ));
    }
    write(&dir, "comparison.svg", plot.to_svg())?;
    let describe = |label: &str, r: &OptimizeRun| {
        let reach = r.iterations_to_target.map(|i| format!(", target reached at {i}")).unwrap_or_default();
        format!(
            "{label}: beta {}, final loss {:.3e}, {} gradient evaluations{reach}",
            r.beta,
            r.log.final_loss().unwrap_or(f64::NAN),
            r.grad_evals
        )
    };
    Ok(vec![
        describe(name(res.tracked.mode), &res.tracked),
        describe("plain GD", &res.baseline),
        format!("outputs in {}", dir.display()),
    ])
}

pub fn bench_cmd(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    cfg.check_keys(&["seed", "out", "sizes", "min_time_ms"])?;
    let sizes = cfg.get_list("sizes", &[256usize, 1024, 4096])?;
    let seed: u64 = cfg.get("seed", 0)?;
    let min_time = std::time::Duration::from_millis(cfg.get("min_time_ms", 200)?);
    let dir = out_dir(cfg, "bench")?;
    let counts = bench_counts(&sizes, seed)?;
    write(
        &dir,
        "bench.csv",
        table(
            &["n", "op", "mul_adds", "formula"],
            counts.iter().map(|r| vec![r.n.to_string(), r.op.to_string(), r.mul_adds.to_string(), r.formula.to_string()]),
        )?,
    )?;
    let timing = bench_timing(&sizes, seed, min_time)?;
    write(
        &dir,
        "timing.csv",
        table(
            &["n", "op", "ns_per_call"],
            timing.iter().map(|r| vec![r.n.to_string(), r.op.to_string(), format!("{:.1}", r.ns_per_call)]),
        )?,
    )?;
    let mut lines = vec![format!("{:>6} {:<16} {:>12} {:>12}", "n", "op", "mul_adds", "formula")];
    lines.extend(counts.iter().map(|r| format!("{:>6} {:<16} {:>12} {:>12}", r.n, r.op, r.mul_adds, r.formula)));
    lines.extend(timing.iter().map(|r| format!("{:>6} {:<16} {:>12.1} ns", r.n, r.op, r.ns_per_call)));
    lines.push(format!("outputs in {}", dir.display()));
    Ok(lines)
}
