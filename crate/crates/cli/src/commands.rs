//! Subcommand implementations. Every artifact a subcommand writes is a pure
//! function of (config, seed), so repeated invocations are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use delora_core::adapters::{
    checkpoint, merge, paired_reflection_delta, reflection_delta,
    two_sided_paired_reflection_delta, PretrainedLayer, Variant,
};
use delora_core::csvio;
use delora_core::grads::{grad_check_with_step, probe_instance, GradCheckReport};
use delora_core::numkit::{gaussian_matrix, numerical_rank, Rng};
use delora_core::trainkit::{
    column_norm_report, init_adapters_for_task, lr_sweep, make_task, norms_csv, sweep_csv,
    trace_csv, train, NormReportRow, OptimState, SweepPoint, TeacherTask,
};
use delora_core::Error;

use crate::config::ValidConfig;

/// Exit-code-carrying failure; messages go to stderr.
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match e {
            Error::Diverged { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

// Stream ids carve the seed into independent generators: sweeps use the run
// index directly, so fixed roles start above u32::MAX.
const TASK_STREAM: u64 = 1 << 32;
const INIT_STREAM: u64 = (1 << 32) + 1;
const PROBE_STREAM: u64 = (1 << 32) + 2;

fn build_task(cfg: &ValidConfig) -> Result<TeacherTask, Failure> {
    let raw = &cfg.raw;
    Ok(make_task(
        raw.d,
        raw.f,
        raw.depth,
        raw.n_samples,
        raw.perturb_scale,
        raw.noise_std,
        &mut Rng::stream(raw.seed, TASK_STREAM),
    )?)
}

fn out_dir(cfg: &ValidConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&cfg.raw.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)?;
    Ok(())
}

pub fn cmd_train(cfg: &ValidConfig) -> Result<(), Failure> {
    let raw = &cfg.raw;
    let dir = out_dir(cfg)?;
    write(&dir.join("config.json"), &crate::config::canonical(raw))?;
    let task = build_task(cfg)?;
    let (mut adapters, layers) = init_adapters_for_task(
        &task,
        cfg.variant,
        raw.rank,
        raw.lambda_init,
        raw.alpha,
        &mut Rng::stream(raw.seed, INIT_STREAM),
    )?;
    let mut opts: Vec<OptimState> = (0..task.depth())
        .map(|_| OptimState::new(cfg.optimizer, raw.lr_main, raw.lr_lambda))
        .collect();

    let records = train(&task, &mut adapters, &layers, &mut opts, raw.steps, raw.trace_every)?;
    write(&dir.join("trace.csv"), &trace_csv(&records))?;
    for (k, (adapter, layer)) in adapters.iter().zip(&layers).enumerate() {
        checkpoint::save_layer(&dir.join(format!("layer_{k}.bin")), layer)?;
        checkpoint::save_adapter(&dir.join(format!("adapter_{k}.bin")), adapter, layer)?;
    }

    let last = records.last().unwrap();
    println!(
        "trained {} for {} steps: loss {} -> {}",
        cfg.variant,
        last.step,
        records[0].loss,
        last.loss
    );
    for (k, dist) in last.dist_to_pretrained.iter().enumerate() {
        println!("  layer {k}: distance to pretrained {dist}");
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn cmd_sweep(cfg: &ValidConfig) -> Result<(), Failure> {
    let raw = &cfg.raw;
    let dir = out_dir(cfg)?;
    write(&dir.join("config.json"), &crate::config::canonical(raw))?;
    let task = build_task(cfg)?;
    let mut all_points: Vec<SweepPoint> = Vec::new();
    for &variant in &cfg.sweep_variants {
        let points = lr_sweep(
            &task,
            variant,
            raw.rank,
            raw.lambda_init,
            raw.alpha,
            cfg.optimizer,
            raw.lr_main,
            raw.lr_lambda,
            &raw.multipliers,
            cfg.sweep_axis,
            raw.steps,
            raw.trace_every,
            raw.seed,
        )?;
        for p in &points {
            let name = format!("trace_{}_x{}.csv", p.variant, p.multiplier);
            write(&dir.join(name), &trace_csv(&p.trace))?;
        }
        all_points.extend(points);
    }
    write(&dir.join("sweep.csv"), &sweep_csv(&all_points))?;

    println!(
        "{:<24} {:>6} {:>14} {:>14}  diverged",
        "variant", "mult", "final_loss", "max_dist"
    );
    for p in &all_points {
        let max_dist = p.final_distance.iter().copied().fold(0.0, f64::max);
        println!(
            "{:<24} {:>6} {:>14.6e} {:>14.6e}  {}",
            p.variant.name(),
            p.multiplier,
            p.final_loss,
            max_dist,
            if p.diverged { "yes" } else { "no" }
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn cmd_gradcheck(cfg: &ValidConfig, tolerance_override: Option<f64>) -> Result<(), Failure> {
    let raw = &cfg.raw;
    let dir = out_dir(cfg)?;
    let tolerance = tolerance_override.unwrap_or(raw.gradcheck_tolerance);
    if tolerance <= 0.0 {
        return Err(Failure::config("tolerance must be positive"));
    }
    // Small fixed probe dims: d=7, f=5, rank 4.
    let (d, f, rank) = (7, 5, 4);
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for (idx, variant) in Variant::ALL.into_iter().enumerate() {
        let mut rng = Rng::stream(raw.seed, PROBE_STREAM + 1 + idx as u64);
        let (adapter, layer) =
            probe_instance(variant, d, f, rank, raw.lambda_init, raw.alpha, &mut rng)?;
        reports.push(grad_check_with_step(
            &adapter,
            &layer,
            &mut rng,
            tolerance,
            raw.gradcheck_fd_step,
        )?);
    }

    println!(
        "{:<24} {:<8} {:>12} {:>12}  verdict",
        "variant", "param", "rel_err", "max_abs_err"
    );
    let mut rows: Vec<Vec<String>> = Vec::new();
    for report in &reports {
        for p in &report.params {
            println!(
                "{:<24} {:<8} {:>12.3e} {:>12.3e}  {}",
                report.variant,
                p.param,
                p.rel_err,
                p.max_abs_err,
                if p.rel_err < report.tolerance { "pass" } else { "FAIL" }
            );
            rows.push(vec![
                report.variant.clone(),
                p.param.clone(),
                csvio::number(p.rel_err),
                csvio::number(p.max_abs_err),
                csvio::number(report.fd_step),
                csvio::number(report.tolerance),
                (p.rel_err < report.tolerance).to_string(),
            ]);
        }
    }
    let header: Vec<String> = ["variant", "param", "rel_err", "max_abs_err", "fd_step", "tolerance", "passed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write(&dir.join("gradcheck.csv"), &csvio::write_table(&header, &rows))?;

    let failed: Vec<&GradCheckReport> = reports.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("gradcheck: all {} variants pass at tolerance {tolerance}", reports.len());
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "gradcheck: {} of {} variants failed at tolerance {tolerance}",
                failed.len(),
                reports.len()
            ),
        })
    }
}

pub fn cmd_rankcheck(cfg: &ValidConfig) -> Result<(), Failure> {
    let raw = &cfg.raw;
    let dir = out_dir(cfg)?;
    let instances = raw.rankcheck_instances;
    let (d, f) = (12, 9);
    let mut rng = Rng::stream(raw.seed, PROBE_STREAM);

    struct Row {
        transform: &'static str,
        max_rank: usize,
        bound: usize,
        exact: bool,
        ok: bool,
    }
    let mut rows: Vec<Row> = Vec::new();

    let mut run = |transform: &'static str,
                   bound: usize,
                   exact: bool,
                   rng: &mut Rng,
                   mut delta: Box<dyn FnMut(&mut Rng) -> delora_core::numkit::Matrix>|
     -> Result<(), Failure> {
        let mut max_rank = 0;
        let mut ok = true;
        for _ in 0..instances {
            let d_w = delta(rng);
            let rank = numerical_rank(&d_w, 1e-10)?;
            max_rank = max_rank.max(rank);
            ok &= if exact { rank == bound } else { rank <= bound };
        }
        rows.push(Row {
            transform,
            max_rank,
            bound,
            exact,
            ok,
        });
        Ok(())
    };

    run(
        "reflection (one-sided)",
        1,
        true,
        &mut rng,
        Box::new(move |rng| {
            let w = gaussian_matrix(d, f, rng);
            let u = gaussian_matrix(d, 1, rng);
            reflection_delta(&u, &w).unwrap()
        }),
    )?;
    run(
        "paired reflection (one-sided)",
        2,
        false,
        &mut rng,
        Box::new(move |rng| {
            let w = gaussian_matrix(d, f, rng);
            let u = gaussian_matrix(d, 1, rng);
            let v = gaussian_matrix(d, 1, rng);
            paired_reflection_delta(&u, &v, &w).unwrap()
        }),
    )?;
    run(
        "paired reflection (two-sided)",
        4,
        false,
        &mut rng,
        Box::new(move |rng| {
            let w = gaussian_matrix(d, f, rng);
            let u = gaussian_matrix(d, 1, rng);
            let v = gaussian_matrix(d, 1, rng);
            let u2 = gaussian_matrix(f, 1, rng);
            let v2 = gaussian_matrix(f, 1, rng);
            two_sided_paired_reflection_delta(&u, &v, &u2, &v2, &w).unwrap()
        }),
    )?;
    run(
        "degenerate paired (v = u)",
        0,
        true,
        &mut rng,
        Box::new(move |rng| {
            let w = gaussian_matrix(d, f, rng);
            let u = gaussian_matrix(d, 1, rng);
            paired_reflection_delta(&u, &u, &w).unwrap()
        }),
    )?;

    println!(
        "{:<32} {:>9} {:>6}  verdict",
        "transform", "max_rank", "bound"
    );
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    for r in &rows {
        let rel = if r.exact { "==" } else { "<=" };
        println!(
            "{:<32} {:>9} {rel}{:>4}  {}",
            r.transform,
            r.max_rank,
            r.bound,
            if r.ok { "pass" } else { "FAIL" }
        );
        csv_rows.push(vec![
            r.transform.to_string(),
            instances.to_string(),
            r.max_rank.to_string(),
            r.bound.to_string(),
            r.ok.to_string(),
        ]);
    }
    let header: Vec<String> = ["transform", "instances", "max_rank", "bound", "ok"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write(&dir.join("rankcheck.csv"), &csvio::write_table(&header, &csv_rows))?;

    if rows.iter().all(|r| r.ok) {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: "rankcheck: a structural rank bound was violated".into(),
        })
    }
}

pub fn cmd_norms(cfg: &ValidConfig) -> Result<(), Failure> {
    let dir = out_dir(cfg)?;
    let (layers, labels): (Vec<PretrainedLayer>, Vec<String>) =
        if let Some(layers_dir) = &cfg.raw.layers_dir {
            let mut paths: Vec<PathBuf> = fs::read_dir(layers_dir)
                .map_err(|e| Failure::config(format!("layers_dir {layers_dir}: {e}")))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().is_some_and(|ext| ext == "bin")
                        && p.file_stem()
                            .and_then(|s| s.to_str())
                            .is_some_and(|s| s.starts_with("layer_") || s.starts_with("merged_"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Failure::config(format!(
                    "layers_dir {layers_dir}: no layer_*.bin or merged_*.bin files"
                )));
            }
            let mut layers = Vec::new();
            let mut labels = Vec::new();
            for p in paths {
                layers.push(checkpoint::load_layer(&p)?);
                labels.push(p.file_stem().unwrap().to_string_lossy().into_owned());
            }
            (layers, labels)
        } else {
            let task = build_task(cfg)?;
            let labels = (0..task.depth()).map(|k| format!("layer_{k}")).collect();
            (task.layers, labels)
        };

    let rows: Vec<NormReportRow> = column_norm_report(&layers, &labels);
    println!("{:<20} {:>14} {:>14}", "label", "mean_col_norm", "std_col_norm");
    for r in &rows {
        println!("{:<20} {:>14.6e} {:>14.6e}", r.label, r.mean, r.std);
    }
    write(&dir.join("norms.csv"), &norms_csv(&rows))?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn cmd_merge(cfg: &ValidConfig) -> Result<(), Failure> {
    let dir = out_dir(cfg)?;
    let mut merged_any = false;
    for k in 0.. {
        let adapter_path = dir.join(format!("adapter_{k}.bin"));
        let layer_path = dir.join(format!("layer_{k}.bin"));
        if !adapter_path.exists() || !layer_path.exists() {
            break;
        }
        let adapter = checkpoint::load_adapter(&adapter_path)?;
        let layer = checkpoint::load_layer(&layer_path)?;
        let merged = merge(&adapter, &layer)?;
        let out = dir.join(format!("merged_{k}.bin"));
        checkpoint::save_layer(&out, &merged)?;
        println!("merged {} + {} -> {}", layer_path.display(), adapter_path.display(), out.display());
        merged_any = true;
    }
    if !merged_any {
        return Err(Failure::config(format!(
            "no adapter_*.bin / layer_*.bin checkpoint pairs in {}",
            dir.display()
        )));
    }
    Ok(())
}
