//! Central finite-difference verification of the analytic gradients.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, forward_tape, init_params, ModelConfig, ModelParams};
use crate::training::{bce_loss, bce_loss_grad};

/// Perturbation used for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences on an O(1)
/// loss carry roughly 1e-11 of rounding noise, so gradients below this floor
/// are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `loss` around `params`, every scalar.
pub fn compare_gradients<F>(params: &ModelParams<f64>, analytic: &ModelParams<f64>, loss: F, tolerance: f64) -> GradCheckReport
where
    F: Fn(&ModelParams<f64>) -> f64,
{
    let mut analytic_flat: Vec<(String, Vec<f64>)> = Vec::new();
    analytic.visit(|name, _, t| analytic_flat.push((name.to_string(), t.to_vec())));
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut max_abs = 0.0f64;
    for (tensor, (name, grads)) in analytic_flat.iter().enumerate() {
        for (idx, &a) in grads.iter().enumerate() {
            let original = get(&mut probe, tensor, idx);
            set(&mut probe, tensor, idx, original + FD_STEP);
            let plus = loss(&probe);
            set(&mut probe, tensor, idx, original - FD_STEP);
            let minus = loss(&probe);
            set(&mut probe, tensor, idx, original);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(a, numeric);
            checked += 1;
            max_abs = max_abs.max((a - numeric).abs());
            if err > worst.0 || !err.is_finite() {
                worst = (err, format!("{name}[{idx}]"));
            }
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        max_abs_error: max_abs,
        worst_param: worst.1,
        checked,
        tolerance,
        passed: worst.0 < tolerance,
    }
}

fn get(p: &mut ModelParams<f64>, tensor: usize, idx: usize) -> f64 {
    p.tensors_mut()[tensor][idx]
}

fn set(p: &mut ModelParams<f64>, tensor: usize, idx: usize, v: f64) {
    p.tensors_mut()[tensor][idx] = v;
}

/// Random input, targets and parameters for `config` with `n_steps` outputs.
pub fn random_problem(config: &ModelConfig, n_steps: usize, seed: u64) -> (Array2<f64>, Array1<f64>, ModelParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let l_f = n_steps * config.effective_gamma();
    let mel = Array2::from_shape_fn((config.n_mels, l_f), |_| rng.random_range(0.0..1.0));
    let targets = Array1::from_shape_fn(n_steps, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    (mel, targets, init_params::<f64>(config, seed))
}

/// Gradient check of the whole network under weighted BCE, in 64-bit arithmetic.
pub fn check_gradients(config: &ModelConfig, n_steps: usize, seed: u64, tolerance: f64) -> GradCheckReport {
    let (mel, targets, params) = random_problem(config, n_steps, seed);
    let pos_weight = 2.0;
    let (logits, tape) = forward_tape(mel.view(), &params, config).expect("valid gradient-check problem");
    let d_logits = bce_loss_grad(&logits, &targets, pos_weight);
    let analytic = backward(&params, config, &tape, &d_logits);
    compare_gradients(
        &params,
        &analytic,
        |p| {
            let z = forward(mel.view(), p, config).expect("valid gradient-check problem");
            bce_loss(&z, &targets, pos_weight)
        },
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Toggles;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            lstm_hidden: 8,
            lstm_layers: 1,
            gamma: 4,
            n_mels: 16,
            mlp_hidden: None,
            toggles: Toggles::default(),
        }
    }

    #[test]
    fn tiny_network_gradients() {
        let report = check_gradients(&tiny(), 6, 3, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn ablated_networks_gradients() {
        for toggles in [
            Toggles { use_lstm: false, ..Default::default() },
            Toggles { use_pe: false, use_dssm_sum: false, ..Default::default() },
            Toggles { use_agg: false, ..Default::default() },
        ] {
            let cfg = ModelConfig { toggles, ..tiny() };
            let report = check_gradients(&cfg, 6, 5, 1e-4);
            assert!(report.passed, "{toggles:?}: {report:?}");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let cfg = tiny();
        let (mel, targets, params) = random_problem(&cfg, 6, 9);
        let (z, tape) = forward_tape(mel.view(), &params, &cfg).unwrap();
        let mut analytic = backward(&params, &cfg, &tape, &bce_loss_grad(&z, &targets, 1.0));
        analytic.lstm[0].w_hh[[3, 2]] += 0.05;
        let report = compare_gradients(
            &params,
            &analytic,
            |p| bce_loss(&forward(mel.view(), p, &cfg).unwrap(), &targets, 1.0),
            1e-4,
        );
        assert!(!report.passed);
        assert_eq!(report.worst_param, "lstm.0.w_hh[26]");
    }
}
