//! Run configuration: one JSON document, lowercase snake_case keys, every
//! field defaulted, unknown keys fatal.

use delora_core::adapters::Variant;
use delora_core::trainkit::{OptimMethod, SweepAxis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    // task
    pub d: usize,
    pub f: usize,
    pub depth: usize,
    pub n_samples: usize,
    pub perturb_scale: f64,
    pub noise_std: f64,

    // adapter
    pub variant: String,
    pub rank: usize,
    pub lambda_init: f64,
    pub alpha: f64,

    // optimizer
    pub optimizer: String,
    pub lr_main: f64,
    pub lr_lambda: f64,

    // loop
    pub steps: usize,
    pub trace_every: usize,

    // sweep
    pub multipliers: Vec<f64>,
    pub sweep_axis: String,
    /// Variants swept by `sweep`; empty means just `variant`.
    pub sweep_variants: Vec<String>,

    // verification
    pub gradcheck_tolerance: f64,
    pub gradcheck_fd_step: f64,
    pub rankcheck_instances: usize,

    // io
    pub out_dir: String,
    /// Saved layers consumed by `norms`; when unset a fresh task is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            d: 32,
            f: 32,
            depth: 2,
            n_samples: 256,
            perturb_scale: 0.3,
            noise_std: 0.01,
            variant: "delora".into(),
            rank: 4,
            lambda_init: 8.0,
            alpha: 8.0,
            optimizer: "adam".into(),
            lr_main: 3e-3,
            lr_lambda: 1.5e-3,
            steps: 2000,
            trace_every: 50,
            multipliers: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            sweep_axis: "main".into(),
            sweep_variants: Vec::new(),
            gradcheck_tolerance: 1e-4,
            gradcheck_fd_step: 1e-6,
            rankcheck_instances: 100,
            out_dir: "out".into(),
            layers_dir: None,
        }
    }
}

/// Config with the string fields resolved to their enums.
#[derive(Debug, Clone)]
pub struct ValidConfig {
    pub raw: RunConfig,
    pub variant: Variant,
    pub optimizer: OptimMethod,
    pub sweep_axis: SweepAxis,
    pub sweep_variants: Vec<Variant>,
}

pub fn parse(text: &str) -> Result<RunConfig, String> {
    serde_json::from_str(text).map_err(|e| format!("config: {e}"))
}

pub fn canonical(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"
}

pub fn validate(raw: RunConfig) -> Result<ValidConfig, String> {
    let variant = Variant::parse(&raw.variant)
        .ok_or_else(|| bad_name("variant", &raw.variant, Variant::ALL.map(|v| v.name())))?;
    let optimizer = OptimMethod::parse(&raw.optimizer)
        .ok_or_else(|| bad_name("optimizer", &raw.optimizer, ["sgd", "adam"]))?;
    let sweep_axis = SweepAxis::parse(&raw.sweep_axis)
        .ok_or_else(|| bad_name("sweep_axis", &raw.sweep_axis, ["main", "lambda", "both"]))?;
    let mut sweep_variants = Vec::new();
    for name in &raw.sweep_variants {
        sweep_variants.push(
            Variant::parse(name)
                .ok_or_else(|| bad_name("sweep_variants", name, Variant::ALL.map(|v| v.name())))?,
        );
    }
    if sweep_variants.is_empty() {
        sweep_variants.push(variant);
    }
    if raw.d == 0 || raw.f == 0 || raw.n_samples == 0 {
        return Err("config: d, f, n_samples must be at least 1".into());
    }
    if !(1..=3).contains(&raw.depth) {
        return Err(format!("config: depth must be 1..=3, got {}", raw.depth));
    }
    if raw.rank == 0 {
        return Err("config: rank must be at least 1".into());
    }
    if raw.trace_every == 0 {
        return Err("config: trace_every must be at least 1".into());
    }
    if raw.multipliers.is_empty() || raw.multipliers.iter().any(|m| *m <= 0.0) {
        return Err("config: multipliers must be nonempty and positive".into());
    }
    if raw.gradcheck_tolerance <= 0.0 || raw.gradcheck_fd_step <= 0.0 {
        return Err("config: gradcheck_tolerance and gradcheck_fd_step must be positive".into());
    }
    if raw.rankcheck_instances == 0 {
        return Err("config: rankcheck_instances must be at least 1".into());
    }
    Ok(ValidConfig {
        variant,
        optimizer,
        sweep_axis,
        sweep_variants,
        raw,
    })
}

fn bad_name(
    key: &str,
    got: &str,
    valid: impl IntoIterator<Item = &'static str>,
) -> String {
    let names: Vec<&str> = valid.into_iter().collect();
    format!("config: unknown {key} {got:?}, expected one of {names:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = validate(RunConfig::default()).unwrap();
        assert_eq!(cfg.variant, Variant::Delora);
        assert_eq!(cfg.sweep_variants, vec![Variant::Delora]);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let err = parse(r#"{"seed": 1, "sede": 2}"#).unwrap_err();
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = parse(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.d, 32);
        assert_eq!(cfg.multipliers, vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0]);
    }

    #[test]
    fn canonical_form_is_idempotent() {
        let text = r#"{"seed": 5, "variant": "lora", "steps": 10}"#;
        let once = canonical(&parse(text).unwrap());
        let twice = canonical(&parse(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn bad_variant_is_named_in_the_error() {
        let err = validate(RunConfig {
            variant: "lroa".into(),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.contains("lroa"), "{err}");
    }

    #[test]
    fn structural_limits_are_enforced() {
        for (mutate, needle) in [
            (
                Box::new(|c: &mut RunConfig| c.depth = 4) as Box<dyn Fn(&mut RunConfig)>,
                "depth",
            ),
            (Box::new(|c: &mut RunConfig| c.trace_every = 0), "trace_every"),
            (Box::new(|c: &mut RunConfig| c.multipliers = vec![]), "multipliers"),
            (Box::new(|c: &mut RunConfig| c.multipliers = vec![-1.0]), "multipliers"),
        ] {
            let mut cfg = RunConfig::default();
            mutate(&mut cfg);
            let err = validate(cfg).unwrap_err();
            assert!(err.contains(needle), "{err}");
        }
    }
}
