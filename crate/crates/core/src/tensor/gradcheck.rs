//! Finite-difference verification of recorded gradients.
//!
//! Two flavors: per-coordinate central differences for small inputs, and
//! Rademacher directional probes for large parameter sets, where the
//! directional derivative concentrates well away from the round-off floor.

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::Result;
use crate::rng::{Prng, Stream};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Below this magnitude (both sides) the comparison switches to absolute error.
const ABS_REGIME: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// |a - n| / max(|a|, |n|, 1e-8), absolute when both magnitudes are tiny.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_REGIME && numeric.abs() < ABS_REGIME {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
    }
}

/// Record the computation once and pull analytic gradients for every input.
pub fn analytic_gradients<F>(build: F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &ids)?;
    let grads = graph.backward(root)?;
    Ok(ids
        .iter()
        .map(|&id| grads.get(id).expect("leaf gradient").clone())
        .collect())
}

fn eval_scalar<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &ids)?;
    graph.value(root).scalar_value()
}

/// Per-coordinate central differences over every element of every input.
pub fn numeric_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut out = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(input.shape());
        for coord in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[coord] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[coord] -= step;
            let f_plus = eval_scalar(&build, &plus)?;
            let f_minus = eval_scalar(&build, &minus)?;
            grad.data_mut()[coord] = (f_plus - f_minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Elementwise comparison of analytic vs numeric gradients.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tolerance: f64) -> GradCheckReport {
    let mut per_input = Vec::with_capacity(analytic.len());
    let mut max_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let mut worst: f64 = 0.0;
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(grad_error(av, nv));
        }
        per_input.push(worst);
        max_err = max_err.max(worst);
    }
    GradCheckReport {
        max_rel_error: max_err,
        per_input,
        tolerance,
    }
}

/// Full per-coordinate check with the default step.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    let numeric = numeric_gradients(&build, inputs, DEFAULT_STEP)?;
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}

/// Directional probe check: for each input tensor, compare the analytic
/// directional derivative g.v against a central difference of f along a
/// random +-1 direction v. Costs 2 evaluations per probe instead of 2 per
/// coordinate, and the probe magnitude tracks the gradient norm, which keeps
/// the comparison far from the floating-point noise floor on deep graphs.
pub fn directional_check<F>(
    build: F,
    inputs: &[Tensor],
    step: f64,
    probes_per_input: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    let mut rng = Prng::new(seed, Stream::Init);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_err: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for _ in 0..probes_per_input {
            let direction: Vec<f64> = (0..input.numel())
                .map(|_| if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 })
                .collect();
            let d_analytic: f64 = analytic[which]
                .data()
                .iter()
                .zip(&direction)
                .map(|(&g, &v)| g * v)
                .sum();
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            for (i, &v) in direction.iter().enumerate() {
                plus[which].data_mut()[i] += step * v;
                minus[which].data_mut()[i] -= step * v;
            }
            let d_numeric = (eval_scalar(&build, &plus)? - eval_scalar(&build, &minus)?) / (2.0 * step);
            worst = worst.max(grad_error(d_analytic, d_numeric));
        }
        per_input.push(worst);
        max_err = max_err.max(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        per_input,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layer_passes_at_1e4() {
        let mut rng = Prng::new(17, Stream::Init);
        let x = Tensor::from_fn(&[2, 4], |_| rng.normal());
        let w = Tensor::from_fn(&[4, 3], |_| rng.normal());
        let b = Tensor::from_fn(&[3], |_| rng.normal());
        let report = check_gradients(
            |g, ids| {
                let mm = g.matmul(ids[0], ids[1])?;
                let out = g.add_bias(mm, ids[2])?;
                let act = g.relu(out);
                Ok(g.sum_all(act))
            },
            &[x, w, b],
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.pass(), "max err {}", report.max_rel_error);
    }

    #[test]
    fn composition_of_core_ops_passes() {
        let mut rng = Prng::new(23, Stream::Init);
        let a = Tensor::from_fn(&[3, 3], |_| rng.normal());
        let b = Tensor::from_fn(&[3, 3], |_| rng.normal());
        let report = check_gradients(
            |g, ids| {
                let prod = g.matmul(ids[0], ids[1])?;
                let act = g.tanh(prod);
                let mixed = g.mul(act, ids[0])?;
                let sig = g.sigmoid(mixed);
                Ok(g.mean_all(sig))
            },
            &[a, b],
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.pass(), "max err {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_analytic_gradient_fails() {
        let mut rng = Prng::new(29, Stream::Init);
        let x = Tensor::from_fn(&[5], |_| rng.normal() + 2.0);
        let build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        };
        let mut analytic = analytic_gradients(build, std::slice::from_ref(&x)).unwrap();
        let numeric = numeric_gradients(build, std::slice::from_ref(&x), DEFAULT_STEP).unwrap();
        // Scale the analytic gradient by 2: the checker must flag it.
        analytic[0] = analytic[0].scale(2.0);
        let report = compare_gradients(&analytic, &numeric, DEFAULT_TOLERANCE);
        assert!(!report.pass());
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn directional_probes_agree_on_mlp() {
        let mut rng = Prng::new(31, Stream::Init);
        let x = Tensor::from_fn(&[4, 6], |_| rng.normal());
        let w1 = Tensor::from_fn(&[6, 5], |_| rng.normal() * 0.5);
        let w2 = Tensor::from_fn(&[5, 1], |_| rng.normal() * 0.5);
        let report = directional_check(
            |g, ids| {
                let h = g.matmul(ids[0], ids[1])?;
                let a = g.tanh(h);
                let out = g.matmul(a, ids[2])?;
                Ok(g.sum_all(out))
            },
            &[x, w1, w2],
            DEFAULT_STEP,
            3,
            DEFAULT_TOLERANCE,
            77,
        )
        .unwrap();
        assert!(report.pass(), "max err {}", report.max_rel_error);
    }
}
