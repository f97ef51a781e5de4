//! Analytic backward passes for every adapter variant, a central
//! finite-difference oracle, and the reporting harness that compares the two.
//!
//! The scalarization under differentiation is the inner product
//! `L = <upstream, forward(x)>`; with `G = x upstream^T` mapped to weight
//! space, every variant reduces to differentiating its raw update against G.
//! The normalized families (DeLoRA's Xi, the reflection norms, DoRA's column
//! normalization) all produce quotient-rule projections that remove the
//! radial component of the gradient.

use crate::adapters::{Adapter, PretrainedLayer, Variant};
use crate::error::{Error, Result};
use crate::numkit::{gaussian_matrix, Matrix, Rng};

/// Default step for the central-difference oracle at f64.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Gradients keyed by parameter name; the key set matches the adapter's
/// learnable parameters exactly.
#[derive(Debug, Clone)]
pub struct GradBundle {
    entries: Vec<(&'static str, Matrix)>,
}

impl GradBundle {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (*n, m))
    }

    #[cfg(test)]
    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }
}

/// Exact gradients of `L = <upstream, forward(x)>` with respect to every
/// learnable parameter.
pub fn backward(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<GradBundle> {
    if upstream.rows() != layer.output_dim() || upstream.cols() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            want_rows: layer.output_dim(),
            want_cols: x.cols(),
            got_rows: upstream.rows(),
            got_cols: upstream.cols(),
        });
    }
    // dL/d(raw update) in weight space.
    let g = x.mul_transpose(upstream)?; // d x f
    let eps = adapter.eps();
    let r = adapter.rank() as f64;

    let entries = match adapter.variant() {
        Variant::Lora => {
            let scale = adapter.alpha() / r;
            let (b, a) = (param(adapter, "B"), param(adapter, "A"));
            vec![
                ("B", g.mul_transpose(a)?.scale(scale)),
                ("A", b.transpose_mul(&g)?.scale(scale)),
            ]
        }
        Variant::Dora | Variant::DoraFixedMag => dora_backward(adapter, layer, &g)?,
        Variant::Delora | Variant::DeloraNoWeightScale => {
            let lambda = adapter.lambda().unwrap();
            let norm_scale = match adapter.variant() {
                Variant::Delora => layer.frob_w_bar() / r,
                _ => 1.0 / r,
            };
            let (b, a) = (param(adapter, "B"), param(adapter, "A"));
            let (gb, ga, inner) = xi_pair_backward(b, a, &g, lambda * norm_scale, eps)?;
            vec![
                ("B", gb),
                ("A", ga),
                ("lambda", scalar(norm_scale * inner)),
            ]
        }
        Variant::EtherOneSided => {
            let k = g.mul_transpose(layer.w_bar())?; // d x d
            let (gu, _) = reflection_backward(param(adapter, "u"), &k, -2.0, eps)?;
            vec![("u", gu)]
        }
        Variant::EtherPlusOneSided => {
            let k = g.mul_transpose(layer.w_bar())?;
            let (gu, _) = reflection_backward(param(adapter, "u"), &k, -1.0, eps)?;
            let (gv, _) = reflection_backward(param(adapter, "v"), &k, 1.0, eps)?;
            vec![("u", gu), ("v", gv)]
        }
        Variant::EtherPlusCtrl => {
            let k = g.mul_transpose(layer.w_bar())?;
            let half = adapter.lambda().unwrap() / 2.0;
            let (gu, su) = reflection_backward(param(adapter, "u"), &k, -half, eps)?;
            let (gv, sv) = reflection_backward(param(adapter, "v"), &k, half, eps)?;
            vec![("u", gu), ("v", gv), ("lambda", scalar((sv - su) / 2.0))]
        }
        Variant::EtherPlusHighRank => {
            let k = g.mul_transpose(layer.w_bar())?;
            let s = adapter.lambda().unwrap() / r;
            let (gu, su) = reflection_backward(param(adapter, "U"), &k, -s, eps)?;
            let (gv, sv) = reflection_backward(param(adapter, "V"), &k, s, eps)?;
            vec![("U", gu), ("V", gv), ("lambda", scalar((sv - su) / r))]
        }
        Variant::EtherPlusRelaxed => {
            let k = g.mul_transpose(layer.w_bar())?;
            let s = adapter.lambda().unwrap() / r;
            let (b, a) = (param(adapter, "B"), param(adapter, "A"));
            let (dm, c) = (param(adapter, "D"), param(adapter, "C"));
            let (gb, ga, inner_ba) = xi_pair_backward(b, a, &k, -s, eps)?;
            let (gd, gc, inner_dc) = xi_pair_backward(dm, c, &k, s, eps)?;
            vec![
                ("B", gb),
                ("A", ga),
                ("D", gd),
                ("C", gc),
                ("lambda", scalar(-(inner_ba - inner_dc) / r)),
            ]
        }
    };
    Ok(GradBundle { entries })
}

fn param<'a>(adapter: &'a Adapter, name: &str) -> &'a Matrix {
    adapter
        .param(name)
        .or_else(|| adapter.frozen_param(name))
        .expect("parameter present by construction")
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_vec(1, 1, vec![v]).unwrap()
}

/// Gradients of `s * sum_i b_i a_i^T / max(|b_i||a_i|, eps)` contracted with
/// `g`, plus the unscaled inner product `<g, B Xi A>` (reused for the lambda
/// gradient). The quotient rule removes the radial component: each returned
/// column/row is orthogonal to its parameter.
fn xi_pair_backward(
    b: &Matrix,
    a: &Matrix,
    g: &Matrix,
    s: f64,
    eps: f64,
) -> Result<(Matrix, Matrix, f64)> {
    let r = b.cols();
    let mut gb = Matrix::zeros(b.rows(), r);
    let mut ga = Matrix::zeros(r, a.cols());
    let mut inner = 0.0;
    for i in 0..r {
        let bi = Matrix::from_fn(b.rows(), 1, |row, _| b.get(row, i));
        let ai = Matrix::from_fn(a.cols(), 1, |col, _| a.get(i, col));
        let nb = bi.frobenius_norm();
        let na = ai.frobenius_norm();
        let prod = nb * na;
        let clamped = prod <= eps;
        let denom = prod.max(eps);

        let g_ai = g.matmul(&ai)?; // d x 1
        let gt_bi = g.transpose_mul(&bi)?; // f x 1
        let gi = bi.inner(&g_ai)?;
        inner += gi / denom;

        for row in 0..b.rows() {
            let radial = if clamped { 0.0 } else { gi * bi.get(row, 0) / (nb * nb) };
            gb.set(row, i, s / denom * (g_ai.get(row, 0) - radial));
        }
        for col in 0..a.cols() {
            let radial = if clamped { 0.0 } else { gi * ai.get(col, 0) / (na * na) };
            ga.set(i, col, s / denom * (gt_bi.get(col, 0) - radial));
        }
    }
    Ok((gb, ga, inner))
}

/// Gradient of `coeff * sum_i u_i^T K u_i / max(|u_i|^2, eps)` with respect to
/// the stacked vectors, plus the sum of the normalized quadratic forms.
fn reflection_backward(
    stack: &Matrix,
    k: &Matrix,
    coeff: f64,
    eps: f64,
) -> Result<(Matrix, f64)> {
    let mut grad = Matrix::zeros(stack.rows(), stack.cols());
    let mut sum_vals = 0.0;
    for i in 0..stack.cols() {
        let u = Matrix::from_fn(stack.rows(), 1, |r, _| stack.get(r, i));
        let nsq = u.inner(&u)?.max(eps);
        let ku = k.matmul(&u)?;
        let ktu = k.transpose_mul(&u)?;
        let val = u.inner(&ku)? / nsq;
        sum_vals += val;
        for row in 0..stack.rows() {
            let g = coeff * (ku.get(row, 0) + ktu.get(row, 0) - 2.0 * val * u.get(row, 0)) / nsq;
            grad.set(row, i, g);
        }
    }
    Ok((grad, sum_vals))
}

fn dora_backward(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    g: &Matrix,
) -> Result<Vec<(&'static str, Matrix)>> {
    let c = adapter.alpha() / adapter.rank() as f64;
    let (b, a) = (param(adapter, "B"), param(adapter, "A"));
    let m = param(adapter, "m");
    let eps = adapter.eps();

    let combined = layer.w_bar().add(&b.matmul(a)?.scale(c))?;
    let (d, f) = (combined.rows(), combined.cols());

    // Per-column quotient rule through m_j * w_j / max(|w_j|, eps).
    let mut g_tilde = Matrix::zeros(d, f);
    let mut gm = Matrix::zeros(f, 1);
    for j in 0..f {
        let mut nsq = 0.0;
        let mut wg = 0.0;
        for i in 0..d {
            let w = combined.get(i, j);
            nsq += w * w;
            wg += w * g.get(i, j);
        }
        let norm = nsq.sqrt();
        let clamped = norm <= eps;
        let denom = norm.max(eps);
        gm.set(j, 0, wg / denom);
        let mj = m.get(j, 0);
        for i in 0..d {
            let radial = if clamped {
                0.0
            } else {
                combined.get(i, j) * wg / (denom * denom * denom)
            };
            g_tilde.set(i, j, mj * (g.get(i, j) / denom - radial));
        }
    }

    let mut entries = vec![
        ("B", g_tilde.mul_transpose(a)?.scale(c)),
        ("A", b.transpose_mul(&g_tilde)?.scale(c)),
    ];
    if adapter.variant() == Variant::Dora {
        entries.push(("m", gm));
    }
    Ok(entries)
}

/// Scalar loss used by the finite-difference oracle.
fn loss_inner(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    x: &Matrix,
    upstream: &Matrix,
) -> Result<f64> {
    crate::adapters::forward(adapter, layer, x)?.inner(upstream)
}

/// Central finite differences `(L(p + h e) - L(p - h e)) / 2h` entry by entry
/// for the named learnable parameter.
pub fn fd_gradient(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    x: &Matrix,
    upstream: &Matrix,
    param_name: &str,
    h: f64,
) -> Result<Matrix> {
    if adapter.param(param_name).is_none() {
        return Err(Error::UnknownParam {
            name: param_name.to_string(),
        });
    }
    let mut probe = adapter.clone();
    let (rows, cols) = {
        let p = probe.param(param_name).unwrap();
        (p.rows(), p.cols())
    };
    let mut grad = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let original = probe.param(param_name).unwrap().get(i, j);
            probe.param_mut(param_name).unwrap().set(i, j, original + h);
            let plus = loss_inner(&probe, layer, x, upstream)?;
            probe.param_mut(param_name).unwrap().set(i, j, original - h);
            let minus = loss_inner(&probe, layer, x, upstream)?;
            probe.param_mut(param_name).unwrap().set(i, j, original);
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: String,
    /// `|g_analytic - g_fd|_F / max(|g_fd|_F, 1e-30)`
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub fd_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub variant: String,
    pub fd_step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn mean_rel_err(&self) -> f64 {
        if self.params.is_empty() {
            return 0.0;
        }
        self.params.iter().map(|p| p.rel_err).sum::<f64>() / self.params.len() as f64
    }
}

/// Random instance for gradient checking: a random layer, a freshly
/// initialized adapter, and a displacement of every learnable parameter.
///
/// The displacement matters: several variants initialize at degenerate points
/// (LoRA's B = 0, the paired reflections' v = u) where some true gradients
/// are exactly zero and a finite difference measures only rounding noise.
pub fn probe_instance(
    variant: Variant,
    d: usize,
    f: usize,
    rank: usize,
    lambda_init: f64,
    alpha: f64,
    rng: &mut Rng,
) -> Result<(Adapter, PretrainedLayer)> {
    let w = gaussian_matrix(d, f, rng);
    let bias = gaussian_matrix(f, 1, rng);
    let layer = PretrainedLayer::new(w, bias)?;
    let (mut adapter, layer) = crate::adapters::init_adapter(variant, &layer, rank, lambda_init, alpha, rng)?;
    for name in adapter.param_names() {
        let p = adapter.param_mut(name).unwrap();
        let noise = gaussian_matrix(p.rows(), p.cols(), rng).scale(0.3);
        p.add_scaled_in_place(&noise, 1.0)?;
    }
    Ok((adapter, layer))
}

/// Compare every analytic gradient of `adapter` against the central
/// finite-difference oracle on random probe data drawn from `rng`.
pub fn grad_check(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    rng: &mut Rng,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check_with_step(adapter, layer, rng, tolerance, DEFAULT_FD_STEP)
}

pub fn grad_check_with_step(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    rng: &mut Rng,
    tolerance: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let n = 3;
    let x = gaussian_matrix(layer.input_dim(), n, rng);
    let upstream = gaussian_matrix(layer.output_dim(), n, rng);
    let bundle = backward(adapter, layer, &x, &upstream)?;
    check_bundle(adapter, layer, &x, &upstream, &bundle, h, tolerance)
}

fn check_bundle(
    adapter: &Adapter,
    layer: &PretrainedLayer,
    x: &Matrix,
    upstream: &Matrix,
    bundle: &GradBundle,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut params = Vec::new();
    for (name, analytic) in bundle.iter() {
        let fd = fd_gradient(adapter, layer, x, upstream, name, h)?;
        let fd_norm = fd.frobenius_norm();
        let rel_err = analytic.sub(&fd)?.frobenius_norm() / fd_norm.max(1e-30);
        params.push(ParamCheck {
            param: name.to_string(),
            rel_err,
            max_abs_err: analytic.max_abs_diff(&fd),
            analytic_norm: analytic.frobenius_norm(),
            fd_norm,
        });
    }
    let passed = params.iter().all(|p| p.rel_err < tolerance);
    Ok(GradCheckReport {
        variant: adapter.variant().name().to_string(),
        fd_step: h,
        tolerance,
        params,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::PretrainedLayer;
    use crate::numkit::{gaussian_matrix, Rng};

    fn probe(
        variant: Variant,
        d: usize,
        f: usize,
        r: usize,
        seed: u64,
    ) -> (Adapter, PretrainedLayer, Matrix, Matrix) {
        let mut rng = Rng::new(seed);
        let (adapter, layer) = probe_instance(variant, d, f, r, 1.7, 8.0, &mut rng).unwrap();
        let x = gaussian_matrix(d, 3, &mut rng);
        let upstream = gaussian_matrix(f, 3, &mut rng);
        (adapter, layer, x, upstream)
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let (adapter, layer, x, _) = probe(Variant::Delora, 5, 4, 2, 1);
        let upstream = Matrix::zeros(4, 3);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        for (_, g) in bundle.iter() {
            assert_eq!(g.frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn delora_matches_finite_differences() {
        let (adapter, layer, x, upstream) = probe(Variant::Delora, 5, 4, 2, 2);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        for name in ["B", "A", "lambda"] {
            let fd = fd_gradient(&adapter, &layer, &x, &upstream, name, 1e-6).unwrap();
            let analytic = bundle.get(name).unwrap();
            let rel = analytic.sub(&fd).unwrap().frobenius_norm() / fd.frobenius_norm().max(1e-30);
            assert!(rel < 1e-5, "{name}: rel err {rel}");
        }
    }

    #[test]
    fn delora_forward_is_radially_insensitive() {
        // Directional derivative of the loss along b_i itself is zero: the
        // normalization makes the update degree-0 homogeneous in each factor,
        // so scaling a column leaves the loss identical and the finite
        // difference sees pure rounding. A coarse step keeps that floor low.
        let (adapter, layer, x, upstream) = probe(Variant::Delora, 5, 4, 2, 3);
        let b = adapter.param("B").unwrap().clone();
        let h = 1e-2;
        for i in 0..b.cols() {
            let mut plus = adapter.clone();
            let mut minus = adapter.clone();
            for row in 0..b.rows() {
                let v = b.get(row, i);
                let p = plus.param_mut("B").unwrap();
                p.set(row, i, v * (1.0 + h));
                let m = minus.param_mut("B").unwrap();
                m.set(row, i, v * (1.0 - h));
            }
            let lp = loss_inner(&plus, &layer, &x, &upstream).unwrap();
            let lm = loss_inner(&minus, &layer, &x, &upstream).unwrap();
            let directional = (lp - lm) / (2.0 * h);
            assert!(directional.abs() < 1e-10, "component {i}: {directional}");
        }
    }

    #[test]
    fn linear_parameter_fd_is_exact_to_roundoff() {
        // LoRA is linear in B for fixed A, so central differences have no
        // truncation term at all.
        let (adapter, layer, x, upstream) = probe(Variant::Lora, 5, 4, 2, 4);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        let fd = fd_gradient(&adapter, &layer, &x, &upstream, "B", 1e-5).unwrap();
        let analytic = bundle.get("B").unwrap();
        let rel = analytic.sub(&fd).unwrap().frobenius_norm() / fd.frobenius_norm();
        assert!(rel < 1e-9, "rel err {rel}");
    }

    #[test]
    fn lambda_scalar_fd_matches() {
        let (adapter, layer, x, upstream) = probe(Variant::Delora, 5, 4, 2, 5);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        let fd = fd_gradient(&adapter, &layer, &x, &upstream, "lambda", 1e-6).unwrap();
        let analytic = bundle.get("lambda").unwrap().get(0, 0);
        let rel = (analytic - fd.get(0, 0)).abs() / fd.get(0, 0).abs().max(1e-30);
        assert!(rel < 1e-7, "rel err {rel}");
    }

    #[test]
    fn fd_error_shrinks_quadratically_with_h() {
        let (adapter, layer, x, upstream) = probe(Variant::Delora, 5, 4, 2, 6);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        let analytic = bundle.get("B").unwrap();
        let err_at = |h: f64| {
            let fd = fd_gradient(&adapter, &layer, &x, &upstream, "B", h).unwrap();
            analytic.sub(&fd).unwrap().frobenius_norm()
        };
        let coarse = err_at(2e-3);
        let fine = err_at(1e-3);
        let ratio = coarse / fine;
        assert!(
            (2.8..6.0).contains(&ratio),
            "expected ~4x shrink, got {ratio} ({coarse} -> {fine})"
        );
    }

    #[test]
    fn every_variant_passes_grad_check() {
        for variant in Variant::ALL {
            for seed in 0..20 {
                let (adapter, layer, _, _) = probe(variant, 7, 5, 4, 42 + seed);
                let mut rng = Rng::new(1000 + 20 * variant.tag() as u64 + seed);
                let report = grad_check(&adapter, &layer, &mut rng, 1e-4).unwrap();
                assert!(
                    report.passed,
                    "{variant} seed {seed}: max rel err {}",
                    report.max_rel_err()
                );
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let (adapter, layer, x, upstream) = probe(Variant::Delora, 5, 4, 2, 7);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        let mut corrupted = bundle.clone();
        let flipped = -corrupted.entries[0].1.get(0, 0);
        corrupted.entries[0].1.set(0, 0, flipped);
        let report =
            check_bundle(&adapter, &layer, &x, &upstream, &corrupted, 1e-6, 1e-4).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn fixed_magnitude_dora_has_no_m_gradient() {
        let (adapter, layer, x, upstream) = probe(Variant::DoraFixedMag, 7, 5, 4, 8);
        let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
        assert_eq!(bundle.names(), vec!["B", "A"]);
        assert!(bundle.get("m").is_none());
        let mut rng = Rng::new(9);
        let report = grad_check(&adapter, &layer, &mut rng, 1e-4).unwrap();
        assert!(report.params.iter().all(|p| p.param != "m"));
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let (adapter, layer, x, upstream) = probe(Variant::Lora, 5, 4, 2, 10);
        let err = fd_gradient(&adapter, &layer, &x, &upstream, "Q", 1e-6).unwrap_err();
        assert!(err.to_string().contains("Q"));
    }

    #[test]
    fn degree_zero_homogeneity_of_b_gradient() {
        // <dL/db_i, b_i> = 0 for every component of DeLoRA's B.
        for seed in 0..20 {
            let (adapter, layer, x, upstream) = probe(Variant::Delora, 7, 5, 4, 100 + seed);
            let bundle = backward(&adapter, &layer, &x, &upstream).unwrap();
            let gb = bundle.get("B").unwrap();
            let b = adapter.param("B").unwrap();
            for i in 0..b.cols() {
                let mut dot = 0.0;
                let mut gn = 0.0;
                let mut bn = 0.0;
                for row in 0..b.rows() {
                    dot += gb.get(row, i) * b.get(row, i);
                    gn += gb.get(row, i) * gb.get(row, i);
                    bn += b.get(row, i) * b.get(row, i);
                }
                let bound = 1e-9 * gn.sqrt() * bn.sqrt();
                assert!(dot.abs() <= bound.max(1e-18), "component {i}: {dot}");
            }
        }
    }
}
