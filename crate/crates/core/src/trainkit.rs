//! Desk-scale training: synthetic teacher-student regression over frozen
//! layers, SGD/Adam with per-group learning rates, and per-step telemetry of
//! the distance between merged and pretrained weights.
//!
//! Training is full batch so invariant checks see no sampling noise. Sweep
//! points are independent (each run owns its adapters, optimizer, and RNG
//! stream) and are executed sequentially here; results are keyed by
//! multiplier.

use crate::adapters::{
    effective_boundary, forward, init_adapter, merge, Adapter, PretrainedLayer, Variant,
};
use crate::csvio;
use crate::error::{Error, Result};
use crate::grads::{backward, GradBundle};
use crate::numkit::{gaussian_matrix, kaiming_uniform, Matrix, Rng};

/// A run whose loss exceeds this (or goes non-finite) is flagged diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Synthetic regression task: frozen "pretrained" layers, a perturbed teacher
/// defining the targets, and a fixed full-batch dataset.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub layers: Vec<PretrainedLayer>,
    pub teacher_weights: Vec<Matrix>,
    pub inputs: Matrix,
    pub targets: Matrix,
    pub noise_std: f64,
}

impl TeacherTask {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// Ground-truth forward through the perturbed teacher weights, tanh
    /// between layers.
    pub fn teacher_forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (k, w) in self.teacher_weights.iter().enumerate() {
            let z = w.transpose_mul(&h)?;
            h = if k + 1 < self.teacher_weights.len() {
                tanh_matrix(&z)
            } else {
                z
            };
        }
        Ok(h)
    }
}

fn tanh_matrix(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = v.tanh();
    }
    out
}

/// Build a task: kaiming pretrained weights, a teacher perturbation of
/// Frobenius norm `perturb_scale * |W|` per layer, standard normal inputs,
/// and targets with iid Gaussian observation noise.
///
/// Layer 0 is d x f; deeper layers are f x f. Biases are zero.
pub fn make_task(
    d: usize,
    f: usize,
    depth: usize,
    n_samples: usize,
    perturb_scale: f64,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<TeacherTask> {
    if d == 0 || f == 0 || n_samples == 0 {
        return Err(Error::InvalidConfig("task dims must be at least 1".into()));
    }
    if !(1..=3).contains(&depth) {
        return Err(Error::InvalidConfig(format!(
            "depth must be 1..=3, got {depth}"
        )));
    }
    if perturb_scale < 0.0 {
        return Err(Error::InvalidConfig("perturb_scale must be >= 0".into()));
    }

    let mut layers = Vec::with_capacity(depth);
    let mut teacher_weights = Vec::with_capacity(depth);
    for k in 0..depth {
        let rows = if k == 0 { d } else { f };
        let mut layer_rng = rng.split();
        let w = kaiming_uniform(rows, f, &mut layer_rng);
        let p = if perturb_scale == 0.0 {
            Matrix::zeros(rows, f)
        } else {
            let raw = gaussian_matrix(rows, f, &mut layer_rng);
            let norm = raw.frobenius_norm();
            raw.scale(perturb_scale * w.frobenius_norm() / norm)
        };
        teacher_weights.push(w.add(&p)?);
        layers.push(PretrainedLayer::new(w, Matrix::zeros(f, 1))?);
    }

    let mut data_rng = rng.split();
    let inputs = gaussian_matrix(d, n_samples, &mut data_rng);
    let task = TeacherTask {
        layers,
        teacher_weights,
        inputs,
        targets: Matrix::zeros(f, n_samples),
        noise_std,
    };
    let clean = task.teacher_forward(&task.inputs)?;
    let noise = gaussian_matrix(f, n_samples, &mut data_rng).scale(noise_std);
    Ok(TeacherTask {
        targets: clean.add(&noise)?,
        ..task
    })
}

/// Mean squared error over all entries and its gradient `2 (pred - target)/N`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            want_rows: target.rows(),
            want_cols: target.cols(),
            got_rows: pred.rows(),
            got_cols: pred.cols(),
        });
    }
    let n = (pred.rows() * pred.cols()) as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimMethod {
    Sgd,
    Adam,
}

impl OptimMethod {
    pub fn name(self) -> &'static str {
        match self {
            OptimMethod::Sgd => "sgd",
            OptimMethod::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<OptimMethod> {
        match s {
            "sgd" => Some(OptimMethod::Sgd),
            "adam" => Some(OptimMethod::Adam),
            _ => None,
        }
    }
}

/// Optimizer state for one adapter. `lambda` entries update with `lr_lambda`,
/// everything else with `lr_main`.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub method: OptimMethod,
    pub lr_main: f64,
    pub lr_lambda: f64,
    step: u64,
    moments: Vec<(&'static str, Matrix, Matrix)>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimState {
    pub fn new(method: OptimMethod, lr_main: f64, lr_lambda: f64) -> Self {
        OptimState {
            method,
            lr_main,
            lr_lambda,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn moment_mut(&mut self, name: &'static str, rows: usize, cols: usize) -> &mut (&'static str, Matrix, Matrix) {
        if let Some(idx) = self.moments.iter().position(|(n, _, _)| *n == name) {
            &mut self.moments[idx]
        } else {
            self.moments
                .push((name, Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)));
            self.moments.last_mut().unwrap()
        }
    }
}

/// One full-batch parameter update on `adapter` from `grads`.
pub fn optim_step(opt: &mut OptimState, adapter: &mut Adapter, grads: &GradBundle) -> Result<()> {
    let expected = adapter.param_names();
    let got = grads.names();
    if expected != got {
        return Err(Error::KeyMismatch {
            detail: format!("adapter has {expected:?}, gradients have {got:?}"),
        });
    }
    opt.step += 1;
    let t = opt.step;
    for (name, g) in grads.iter() {
        let lr = if name == "lambda" {
            opt.lr_lambda
        } else {
            opt.lr_main
        };
        match opt.method {
            OptimMethod::Sgd => {
                let p = adapter.param_mut(name).unwrap();
                p.add_scaled_in_place(g, -lr)?;
            }
            OptimMethod::Adam => {
                let (_, m, v) = opt.moment_mut(name, g.rows(), g.cols());
                let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
                let p = adapter.param_mut(name).unwrap();
                for idx in 0..g.data().len() {
                    let gi = g.data()[idx];
                    let mi = ADAM_BETA1 * m.data()[idx] + (1.0 - ADAM_BETA1) * gi;
                    let vi = ADAM_BETA2 * v.data()[idx] + (1.0 - ADAM_BETA2) * gi * gi;
                    m.data_mut()[idx] = mi;
                    v.data_mut()[idx] = vi;
                    let m_hat = mi / bias1;
                    let v_hat = vi / bias2;
                    p.data_mut()[idx] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

/// One row of training telemetry. Distances are measured on materialized
/// merged weights against the original pretrained weights, never through the
/// factored shortcuts.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub dist_to_pretrained: Vec<f64>,
    /// NaN for variants without a lambda.
    pub lambda_value: Vec<f64>,
    /// +inf for unbounded variants.
    pub boundary: Vec<f64>,
}

/// Initialize one adapter per task layer, one derived RNG stream per layer.
pub fn init_adapters_for_task(
    task: &TeacherTask,
    variant: Variant,
    rank: usize,
    lambda_init: f64,
    alpha: f64,
    rng: &mut Rng,
) -> Result<(Vec<Adapter>, Vec<PretrainedLayer>)> {
    let mut adapters = Vec::with_capacity(task.depth());
    let mut layers = Vec::with_capacity(task.depth());
    for layer in &task.layers {
        let mut layer_rng = rng.split();
        let (adapter, adjusted) =
            init_adapter(variant, layer, rank, lambda_init, alpha, &mut layer_rng)?;
        adapters.push(adapter);
        layers.push(adjusted);
    }
    Ok((adapters, layers))
}

/// Adapted forward through the whole stack, tanh between layers.
pub fn stack_forward(
    adapters: &[Adapter],
    layers: &[PretrainedLayer],
    x: &Matrix,
) -> Result<Matrix> {
    let (_, out) = stack_forward_cached(adapters, layers, x)?;
    Ok(out)
}

/// Forward pass that also returns each layer's input, for backprop.
fn stack_forward_cached(
    adapters: &[Adapter],
    layers: &[PretrainedLayer],
    x: &Matrix,
) -> Result<(Vec<Matrix>, Matrix)> {
    let depth = adapters.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut h = x.clone();
    for k in 0..depth {
        inputs.push(h.clone());
        let z = forward(&adapters[k], &layers[k], &h)?;
        h = if k + 1 < depth { tanh_matrix(&z) } else { z };
    }
    Ok((inputs, h))
}

fn snapshot(
    step: usize,
    adapters: &[Adapter],
    layers: &[PretrainedLayer],
    task: &TeacherTask,
) -> Result<TraceRecord> {
    let pred = stack_forward(adapters, layers, &task.inputs)?;
    let (loss, _) = mse_loss(&pred, &task.targets)?;
    let mut dist = Vec::with_capacity(layers.len());
    let mut lambda = Vec::with_capacity(layers.len());
    let mut boundary = Vec::with_capacity(layers.len());
    for (adapter, layer) in adapters.iter().zip(layers) {
        let merged = merge(adapter, layer)?;
        dist.push(merged.w_bar().sub(layer.w_bar())?.frobenius_norm());
        lambda.push(adapter.lambda().unwrap_or(f64::NAN));
        boundary.push(effective_boundary(adapter, layer).as_f64());
    }
    Ok(TraceRecord {
        step,
        loss,
        dist_to_pretrained: dist,
        lambda_value: lambda,
        boundary,
    })
}

/// Full-batch training loop. Records a trace at step 0, every `trace_every`
/// steps, and at the final step; divergence aborts with the step index.
pub fn train(
    task: &TeacherTask,
    adapters: &mut [Adapter],
    layers: &[PretrainedLayer],
    opts: &mut [OptimState],
    steps: usize,
    trace_every: usize,
) -> Result<Vec<TraceRecord>> {
    let (records, diverged) = train_inner(task, adapters, layers, opts, steps, trace_every)?;
    if let Some((step, loss)) = diverged {
        return Err(Error::Diverged { step, loss });
    }
    Ok(records)
}

/// `(step, loss)` at which a run crossed the divergence threshold.
pub type Divergence = Option<(usize, f64)>;

/// Like [`train`] but reports divergence as data instead of an error, so
/// sweeps can record partial runs.
pub fn train_inner(
    task: &TeacherTask,
    adapters: &mut [Adapter],
    layers: &[PretrainedLayer],
    opts: &mut [OptimState],
    steps: usize,
    trace_every: usize,
) -> Result<(Vec<TraceRecord>, Divergence)> {
    let depth = adapters.len();
    if depth != layers.len() || depth != opts.len() || depth != task.layers.len() {
        return Err(Error::InvalidConfig(format!(
            "adapter/layer/optimizer counts disagree: {depth}/{}/{} for a depth-{} task",
            layers.len(),
            opts.len(),
            task.layers.len()
        )));
    }

    let mut records = vec![snapshot(0, adapters, layers, task)?];
    for step in 1..=steps {
        let (inputs, pred) = stack_forward_cached(adapters, layers, &task.inputs)?;
        let (loss, grad) = mse_loss(&pred, &task.targets)?;
        if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
            return Ok((records, Some((step, loss))));
        }

        // Backprop layer by layer, top down. The input gradient of layer k is
        // computed before its parameters move.
        let mut upstream = grad;
        for k in (0..depth).rev() {
            let bundle = backward(&adapters[k], &layers[k], &inputs[k], &upstream)?;
            if k > 0 {
                let dh = crate::adapters::apply_merged(&adapters[k], &layers[k], &upstream)?;
                // h_k = tanh(z_{k-1}), so tanh' = 1 - h_k^2 elementwise.
                let mut prev = dh;
                for (v, h) in prev.data_mut().iter_mut().zip(inputs[k].data()) {
                    *v *= 1.0 - h * h;
                }
                upstream = prev;
            }
            optim_step(&mut opts[k], &mut adapters[k], &bundle)?;
        }

        let traced = trace_every > 0 && step % trace_every == 0;
        if traced || step == steps {
            records.push(snapshot(step, adapters, layers, task)?);
        }
    }
    // A run that crosses the threshold on its very last update would otherwise
    // escape the in-loop check, which looks one step behind.
    let final_loss = records.last().unwrap().loss;
    if !final_loss.is_finite() || final_loss > DIVERGENCE_THRESHOLD {
        return Ok((records, Some((steps, final_loss))));
    }
    Ok((records, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Scale the main learning rate only.
    Main,
    /// Scale the lambda learning rate only.
    Lambda,
    /// Scale both groups.
    Both,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Main => "main",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "main" => Some(SweepAxis::Main),
            "lambda" => Some(SweepAxis::Lambda),
            "both" => Some(SweepAxis::Both),
            _ => None,
        }
    }
}

/// One sweep run: final metrics plus the full trace.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub variant: Variant,
    pub multiplier: f64,
    pub final_loss: f64,
    pub final_distance: Vec<f64>,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    pub trace: Vec<TraceRecord>,
}

/// Learning-rate robustness sweep: one independent run per multiplier with a
/// fresh init on stream `idx` of `seed`. Diverged runs are recorded, not
/// fatal.
#[allow(clippy::too_many_arguments)]
pub fn lr_sweep(
    task: &TeacherTask,
    variant: Variant,
    rank: usize,
    lambda_init: f64,
    alpha: f64,
    method: OptimMethod,
    base_lr_main: f64,
    base_lr_lambda: f64,
    multipliers: &[f64],
    axis: SweepAxis,
    steps: usize,
    trace_every: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if multipliers.is_empty() {
        return Err(Error::InvalidConfig("multipliers must be nonempty".into()));
    }
    if multipliers.iter().any(|m| *m <= 0.0) {
        return Err(Error::InvalidConfig("multipliers must be positive".into()));
    }
    let mut points = Vec::with_capacity(multipliers.len());
    for (idx, &mult) in multipliers.iter().enumerate() {
        let mut rng = Rng::stream(seed, idx as u64);
        let (mut adapters, layers) =
            init_adapters_for_task(task, variant, rank, lambda_init, alpha, &mut rng)?;
        let (lr_main, lr_lambda) = match axis {
            SweepAxis::Main => (base_lr_main * mult, base_lr_lambda),
            SweepAxis::Lambda => (base_lr_main, base_lr_lambda * mult),
            SweepAxis::Both => (base_lr_main * mult, base_lr_lambda * mult),
        };
        let mut opts: Vec<OptimState> = (0..task.depth())
            .map(|_| OptimState::new(method, lr_main, lr_lambda))
            .collect();
        let (records, diverged) =
            train_inner(task, &mut adapters, &layers, &mut opts, steps, trace_every)?;
        let last = records.last().expect("at least the init record");
        points.push(SweepPoint {
            variant,
            multiplier: mult,
            final_loss: diverged.map(|(_, l)| l).unwrap_or(last.loss),
            final_distance: last.dist_to_pretrained.clone(),
            diverged: diverged.is_some(),
            diverged_at: diverged.map(|(s, _)| s),
            trace: records,
        });
    }
    Ok(points)
}

/// Per-layer mean and population std of column norms.
#[derive(Debug, Clone, PartialEq)]
pub struct NormReportRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

pub fn column_norm_report(layers: &[PretrainedLayer], labels: &[String]) -> Vec<NormReportRow> {
    layers
        .iter()
        .zip(labels)
        .map(|(layer, label)| {
            let norms = layer.w_bar().column_norms();
            let n = norms.len() as f64;
            let mean = norms.iter().sum::<f64>() / n;
            let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            NormReportRow {
                label: label.clone(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Trace CSV: `step,loss`, then per-layer distance, lambda, boundary columns.
pub fn trace_csv(records: &[TraceRecord]) -> String {
    let depth = records.first().map_or(0, |r| r.dist_to_pretrained.len());
    let mut header = vec!["step".to_string(), "loss".to_string()];
    for k in 0..depth {
        header.push(format!("dist_l{k}"));
    }
    for k in 0..depth {
        header.push(format!("lambda_l{k}"));
    }
    for k in 0..depth {
        header.push(format!("boundary_l{k}"));
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.step.to_string(), csvio::number(r.loss)];
            row.extend(r.dist_to_pretrained.iter().map(|v| csvio::number(*v)));
            row.extend(r.lambda_value.iter().map(|v| csvio::number(*v)));
            row.extend(r.boundary.iter().map(|v| csvio::number(*v)));
            row
        })
        .collect();
    csvio::write_table(&header, &rows)
}

/// Sweep summary CSV; `final_distance` is the max over layers.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let header: Vec<String> = ["variant", "multiplier", "final_loss", "final_distance", "diverged"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let max_dist = p.final_distance.iter().copied().fold(0.0, f64::max);
            vec![
                p.variant.name().to_string(),
                csvio::number(p.multiplier),
                csvio::number(p.final_loss),
                csvio::number(max_dist),
                p.diverged.to_string(),
            ]
        })
        .collect();
    csvio::write_table(&header, &rows)
}

pub fn norms_csv(rows: &[NormReportRow]) -> String {
    let header: Vec<String> = ["label", "mean_column_norm", "std_column_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.label.clone(), csvio::number(r.mean), csvio::number(r.std)])
        .collect();
    csvio::write_table(&header, &body)
}
