//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            checked: self.checked + other.checked,
            passed: self.passed + other.passed,
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Maximum coordinates sampled per tensor.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tol: 1e-3,
            floor: 1e-8,
            max_per_tensor: 24,
            seed: 0,
        }
    }
}

/// Compares backprop gradients of a scalar `loss` against central
/// differences, for every input tensor and every trainable parameter.
///
/// `loss` builds the scalar from a graph over `store` and the input leaves.
pub fn check(
    store: &mut ParamStore,
    inputs: &[Tensor],
    opts: GradCheckOptions,
    loss: impl Fn(&Graph, &[Var]) -> Var,
) -> GradCheckReport {
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let g = Graph::new(store, false, ChaCha8Rng::seed_from_u64(opts.seed));
        let vars: Vec<Var> = inputs.iter().cloned().map(Var::constant).collect();
        loss(&g, &vars).data()[0]
    };

    let (input_grads, param_grads) = {
        let g = Graph::new(store, false, ChaCha8Rng::seed_from_u64(opts.seed));
        let vars: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
        let l = loss(&g, &vars);
        assert_eq!(l.numel(), 1);
        l.backward();
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect();
        (ig, g.grads())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
    };
    let mut record = |a: f64, n: f64| {
        let r = relative_error(a, n, opts.floor);
        report.checked += 1;
        if r < opts.tol {
            report.passed += 1;
        }
        report.max_rel_err = report.max_rel_err.max(r);
    };

    let mut inputs: Vec<Tensor> = inputs.to_vec();
    for t in 0..inputs.len() {
        let n = inputs[t].numel();
        for i in coords(n, opts.max_per_tensor, &mut rng) {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + opts.step;
            let fp = eval(store, &inputs);
            inputs[t].data_mut()[i] = orig - opts.step;
            let fm = eval(store, &inputs);
            inputs[t].data_mut()[i] = orig;
            record(input_grads[t][i], (fp - fm) / (2.0 * opts.step));
        }
    }
    for (id, grad) in &param_grads {
        let id: ParamId = *id;
        let n = grad.len();
        for i in coords(n, opts.max_per_tensor, &mut rng) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let fp = eval(store, &inputs);
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let fm = eval(store, &inputs);
            store.value_mut(id).data_mut()[i] = orig;
            record(grad[i], (fp - fm) / (2.0 * opts.step));
        }
    }
    report
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}
