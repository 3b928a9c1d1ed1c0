//! Central-difference check of the analytic backward pass.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::layers::cross_entropy_row;
use super::model::{batch_loss_and_grads, forward, ModelState, Sample, SubitNetSpec};
use super::tensor::Tensor;
use super::Result;
use crate::exec::Execution;
use crate::seed;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub spec: SubitNetSpec,
    pub batch_size: usize,
    pub seed: u64,
    /// Perturbation size.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor (all of them when the tensor is
    /// smaller). Coordinates sitting on a kink do not count.
    pub coords_per_param: usize,
    /// Denominator floor of the per-coordinate error and of the kink test,
    /// so that near-zero slopes are judged on absolute differences.
    pub error_floor: f64,
    pub zero_input: bool,
    /// Negates the analytic gradient of this tensor (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            spec: SubitNetSpec {
                input_side: 8,
                in_channels: 3,
                block_channels: vec![3, 4, 5],
                kernel: 3,
                num_classes: 5,
            },
            batch_size: 3,
            seed: 0,
            step: 1e-3,
            tolerance: 1e-2,
            coords_per_param: 64,
            error_floor: 1e-2,
            zero_input: false,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool switch
    /// (the one-sided slopes disagree), where the function is not
    /// differentiable at the scale of the step.
    pub skipped_kinks: usize,
    /// `||a - n|| / max(||a||, ||n||)` over the checked coordinates, with
    /// `a` the analytic and `n` the numeric gradient.
    pub rel_error: f64,
    /// Largest single-coordinate error, `|a - n| / max(|a|, |n|, floor)`.
    /// Diagnostic only: in 32-bit arithmetic a few coordinates with tiny
    /// slopes are dominated by rounding noise.
    pub worst_coordinate_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Largest `rel_error` over all tensors.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub gradients_finite: bool,
    pub passed: bool,
}

fn batch_loss(state: &ModelState, batch: &[Sample<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let (logits, _) = forward(state, s.input)?;
        total += cross_entropy_row(logits.data(), s.label).0;
    }
    Ok(total / batch.len() as f64)
}

pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let spec = &cfg.spec;
    let mut state = ModelState::fresh(spec, seed::derive(cfg.seed, &[1]))?;
    // Non-zero biases so no layer sits exactly on a ReLU kink.
    let mut rng = seed::rng(seed::derive(cfg.seed, &[2]));
    for p in state.params.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let side = spec.input_side;
    let inputs: Vec<Tensor> = (0..cfg.batch_size)
        .map(|_| {
            let n = spec.in_channels * side * side;
            let data = if cfg.zero_input {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
            };
            Tensor::new(vec![spec.in_channels, side, side], data)
        })
        .collect::<Result<_>>()?;
    let batch: Vec<Sample> = inputs
        .iter()
        .enumerate()
        .map(|(i, input)| Sample {
            input,
            label: i % spec.num_classes,
        })
        .collect();

    let (_, mut grads) = batch_loss_and_grads(&state, &batch, false, Execution::Sequential)?;
    let gradients_finite = grads.tensors.iter().flatten().all(|g| g.is_finite());
    if let Some(name) = &cfg.corrupt {
        if let Some(i) = state.params.iter().position(|p| &p.name == name) {
            if let Some(g) = grads.tensors[i].as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = -*v);
            }
        }
    }

    let h = cfg.step as f32;
    let mut report = Vec::new();
    for pi in 0..state.params.len() {
        let len = state.params[pi].value.len();
        // Visit coordinates in random order until enough smooth ones are
        // checked.
        let coords = sample(&mut rng, len, len).into_vec();
        let analytic = grads.tensors[pi].as_ref().expect("full backward").data().to_vec();
        let mut check = ParamCheck {
            name: state.params[pi].name.clone(),
            checked: 0,
            skipped_kinks: 0,
            rel_error: 0.0,
            worst_coordinate_error: 0.0,
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &c in &coords {
            if check.checked >= cfg.coords_per_param {
                break;
            }
            let w0 = state.params[pi].value.data()[c];
            let eval = |st: &mut ModelState, w: f32| -> Result<f64> {
                st.params[pi].value.data_mut()[c] = w;
                batch_loss(st, &batch)
            };
            let lp = eval(&mut state, w0 + h)?;
            let lm = eval(&mut state, w0 - h)?;
            let l0 = eval(&mut state, w0)?;
            let hp = ((w0 + h) - w0) as f64;
            let hm = (w0 - (w0 - h)) as f64;
            let numeric = (lp - lm) / (hp + hm);
            let right = (lp - l0) / hp;
            let left = (l0 - lm) / hm;
            let a = analytic[c] as f64;
            // A kink inside the stencil shows up as one-sided slopes that
            // disagree far beyond rounding noise.
            let kink_gap = (right - left).abs();
            let scale = right.abs().max(left.abs()).max(cfg.error_floor);
            if kink_gap / scale > cfg.tolerance && kink_gap > 5.0 * f32::EPSILON as f64 / cfg.step {
                check.skipped_kinks += 1;
                continue;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.error_floor);
            check.worst_coordinate_error = check.worst_coordinate_error.max(err);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            check.checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        check.rel_error = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
        report.push(check);
    }
    let max_rel_error = report.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    let all_checked = report.iter().all(|p| p.checked > 0);
    Ok(GradCheckReport {
        passed: gradients_finite && all_checked && max_rel_error <= cfg.tolerance,
        params: report,
        max_rel_error,
        tolerance: cfg.tolerance,
        gradients_finite,
    })
}
