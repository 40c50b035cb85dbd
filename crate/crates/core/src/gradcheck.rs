//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::models::{SplitModel, SplitModelSpec};
use crate::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat coordinate holding `max_rel_error`.
    pub worst: Option<(ParamId, usize)>,
    /// Parameters with at least one coordinate above tolerance.
    pub offending: Vec<ParamId>,
    pub coordinates_checked: usize,
    /// Coordinates whose perturbation moved some relu input across zero;
    /// the central difference is meaningless there.
    pub coordinates_skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Runs `backward` on `loss` and checks every parameter coordinate with
/// `(f(p+h) - f(p-h)) / 2h`. The graph is restored before returning.
pub fn finite_difference_check(
    graph: &mut Graph,
    loss: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = graph.backward(loss)?;
    check_gradients(graph, loss, &analytic, step, tolerance)
}

/// Like [`finite_difference_check`] but compares against caller-supplied
/// gradients, which is how a faulty gradient rule is simulated in tests.
pub fn check_gradients(
    graph: &mut Graph,
    loss: NodeId,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 || step.is_nan() {
        return Err(Error::Validation(format!("step must be > 0, got {step}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        offending: Vec::new(),
        coordinates_checked: 0,
        coordinates_skipped: 0,
        tolerance,
    };
    graph.recompute()?;
    let kinks = graph.relu_pattern();
    for (node, pid) in graph.params() {
        let original = graph.value(node).clone();
        let grad = analytic
            .get(pid)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {pid:?}")))?;
        let mut flagged = false;
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe.data_mut()[i] = original.data()[i] + step;
            let plus = eval_at(graph, node, probe, loss)?;
            let crossed = graph.relu_pattern() != kinks;
            let mut probe = original.clone();
            probe.data_mut()[i] = original.data()[i] - step;
            let minus = eval_at(graph, node, probe, loss)?;
            if crossed || graph.relu_pattern() != kinks {
                report.coordinates_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pid, i));
            }
            if err > tolerance {
                flagged = true;
            }
        }
        graph.set_value(node, original)?;
        if flagged && !report.offending.contains(&pid) {
            report.offending.push(pid);
        }
    }
    graph.recompute()?;
    Ok(report)
}

fn eval_at(
    graph: &mut Graph,
    node: NodeId,
    value: Tensor,
    loss: NodeId,
) -> Result<f64> {
    graph.set_value(node, value)?;
    graph.recompute()?;
    Ok(graph.value(loss).item())
}

/// Every op (wrapped in `tanh` and a reduction where it is not a loss
/// itself) plus small MLP and CNN composites, on random values drawn from
/// `seed`.
pub fn standard_suite(seed: u64, step: f64, tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cases: [&str; 11] = [
        "matmul", "conv2d", "add_bias", "add", "relu", "tanh", "flatten", "mean", "sum",
        "softmax_cross_entropy", "sigmoid_binary_cross_entropy",
    ];
    for name in cases {
        let mut g = Graph::new();
        let p = |g: &mut Graph, id: usize, shape: &[usize], rng: &mut ChaCha8Rng| {
            g.param(ParamId(id), Tensor::uniform(shape, -1.0, 1.0, rng))
        };
        let y = match name {
            "matmul" => {
                let a = p(&mut g, 0, &[3, 4], &mut rng);
                let b = p(&mut g, 1, &[4, 2], &mut rng);
                g.matmul(a, b)?
            }
            "conv2d" => {
                let x = p(&mut g, 0, &[2, 5, 4, 2], &mut rng);
                let k = p(&mut g, 1, &[3, 3, 2, 3], &mut rng);
                g.conv2d(x, k)?
            }
            "add_bias" => {
                let x = p(&mut g, 0, &[3, 4], &mut rng);
                let b = p(&mut g, 1, &[4], &mut rng);
                g.add_bias(x, b)?
            }
            "add" => {
                let a = p(&mut g, 0, &[3, 4], &mut rng);
                let b = p(&mut g, 1, &[3, 4], &mut rng);
                g.add(a, b)?
            }
            "relu" => {
                let x = p(&mut g, 0, &[3, 4], &mut rng);
                g.relu(x)?
            }
            "tanh" | "sum" => p(&mut g, 0, &[3, 4], &mut rng),
            "flatten" => {
                let x = p(&mut g, 0, &[2, 3, 3, 2], &mut rng);
                g.flatten(x)?
            }
            "mean" => {
                let x = p(&mut g, 0, &[3, 4], &mut rng);
                let t = g.tanh(x)?;
                let m = g.mean(t)?;
                out.push((name.to_string(), finite_difference_check(&mut g, m, step, tolerance)?));
                continue;
            }
            "softmax_cross_entropy" => {
                let z = p(&mut g, 0, &[4, 5], &mut rng);
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
                let l = g.softmax_cross_entropy(z, &labels)?;
                out.push((name.to_string(), finite_difference_check(&mut g, l, step, tolerance)?));
                continue;
            }
            _ => {
                let z = p(&mut g, 0, &[4, 3], &mut rng);
                let t: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
                let l = g.sigmoid_binary_cross_entropy(z, Tensor::new(vec![4, 3], t)?)?;
                out.push((name.to_string(), finite_difference_check(&mut g, l, step, tolerance)?));
                continue;
            }
        };
        let t = g.tanh(y)?;
        let loss = g.sum(t)?;
        out.push((name.to_string(), finite_difference_check(&mut g, loss, step, tolerance)?));
    }

    let mlp_depth = rng.random_range(0..=3);
    let mut mlp = SplitModelSpec::mlp(3, mlp_depth, 6, vec![3, 4], vec![5]);
    mlp.use_bias = true;
    let cnn_depth = rng.random_range(0..=2);
    let cnn = SplitModelSpec::cnn(2, cnn_depth, 4, 6, vec![3, 2], vec![5, 5, 2]);
    for (name, spec) in [("mlp-4-layer", mlp), ("cnn-3-layer", cnn)] {
        let mut model = SplitModel::build(&spec, rng.random())?;
        // Zero biases put pre-activations exactly on the relu kink whenever
        // all inputs to a unit are dead; jitter every parameter off it.
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let mut shape = vec![3];
        shape.extend_from_slice(&spec.input_shape);
        let x = Tensor::uniform(&shape, -0.5, 0.5, &mut rng);
        let labels: Vec<Vec<usize>> = (0..3)
            .map(|_| spec.classes_per_factor.iter().map(|&c| rng.random_range(0..c)).collect())
            .collect();
        let mut g = Graph::new();
        let params = model.attach(&mut g);
        let xi = g.input(x);
        let logits = model.forward(&mut g, &params, xi)?;
        let loss = model.loss(&mut g, &logits, &labels)?;
        out.push((format!("{name}-s{}", spec.shared_depth), finite_difference_check(&mut g, loss, step, tolerance)?));
    }
    Ok(out)
}
