//! Finite-difference verification of analytic gradients.
//!
//! The numeric side recomputes the loss twice per probed coordinate through
//! the ordinary forward path and never touches the backward code, so it is
//! an independent oracle for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{LabelSet, ScraperModel};
use crate::scalar::Scalar;
use crate::tokenizer::TokenIds;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates probed, across every weight tensor.
    pub checked: usize,
    /// Coordinates that failed the tolerance.
    pub failures: Vec<GradCheckFailure>,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Probe at least `min_coords` random weight coordinates spread over every
/// parameter tensor and compare analytic gradients of the chunk loss to
/// central finite differences.
///
/// A coordinate passes when `|a - n| <= atol + rtol·max(|a|, |n|)`; the
/// absolute floor absorbs finite-difference noise on structurally zero
/// gradients (key-projection biases cancel in softmax exactly).
pub fn check_model_gradients<F: Scalar>(
    model: &mut ScraperModel<F>,
    nodes: &[TokenIds],
    labels: &[LabelSet],
    min_coords: usize,
    seed: u64,
    rtol: f64,
    atol: f64,
) -> GradCheckReport {
    model.zero_grads();
    let _ = model
        .train_step_chunk(nodes, labels)
        .expect("gradcheck forward/backward");
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        grads.push((name, p.grad.data().iter().map(|g| g.as_f64()).collect()));
    });

    let n_tensors = grads.len();
    let per_tensor = min_coords.div_ceil(n_tensors).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan: Vec<(usize, usize)> = Vec::new();
    for (ti, (_, g)) in grads.iter().enumerate() {
        for _ in 0..per_tensor {
            plan.push((ti, rng.random_range(0..g.len())));
        }
    }

    // epsilon scaled against the weight magnitude; loss is recomputed at
    // the model's own precision
    let base_eps = if std::mem::size_of::<F>() == 4 { 5e-3 } else { 1e-5 };

    let mut failures = Vec::new();
    let mut max_rel_err = 0.0f64;
    for &(ti, ci) in &plan {
        let mut original = F::zero();
        visit_indexed(model, ti, &mut |p| {
            original = p.value.data()[ci];
        });
        let eps = F::cast(base_eps * (original.as_f64().abs() + 1.0));

        visit_indexed(model, ti, &mut |p| p.value.data_mut()[ci] = original + eps);
        let loss_plus = chunk_loss(model, nodes, labels);
        visit_indexed(model, ti, &mut |p| p.value.data_mut()[ci] = original - eps);
        let loss_minus = chunk_loss(model, nodes, labels);
        visit_indexed(model, ti, &mut |p| p.value.data_mut()[ci] = original);

        let numeric = (loss_plus - loss_minus) / (2.0 * eps.as_f64());
        let analytic = grads[ti].1[ci];
        let err = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        // report relative error only where the relative regime applies
        if denom > 50.0 * atol {
            max_rel_err = max_rel_err.max(err / denom);
        }
        if err > atol + rtol * denom {
            failures.push(GradCheckFailure {
                tensor: grads[ti].0.clone(),
                coord: ci,
                analytic,
                numeric,
            });
        }
    }
    GradCheckReport {
        checked: plan.len(),
        failures,
        max_rel_err,
    }
}

fn visit_indexed<F: Scalar>(
    model: &mut ScraperModel<F>,
    target: usize,
    f: &mut dyn FnMut(&mut crate::nn::tensor::Param<F>),
) {
    let mut idx = 0;
    model.visit_params_mut(&mut |_, p| {
        if idx == target {
            f(p);
        }
        idx += 1;
    });
}

/// Loss for the numeric side: per-label terms come from the model's own
/// forward at its own precision, but the sum is accumulated in f64 so the
/// finite difference is not polluted by summation rounding.
fn chunk_loss<F: Scalar>(model: &ScraperModel<F>, nodes: &[TokenIds], labels: &[LabelSet]) -> f64 {
    let (probs, _) = model.forward_chunk(nodes).expect("gradcheck forward");
    let mut sum = 0.0f64;
    for (p, y) in probs.iter().zip(labels) {
        for k in 0..crate::model::NUM_LABELS {
            let pk = p.p[k].as_f64();
            sum -= if y.bits[k] { pk.ln() } else { (1.0 - pk).ln() };
        }
    }
    sum
}
