use crate::tensor::{Graph, ParamSet, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so that entries whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares autodiff gradients of the scalar built by `builder` against
/// central finite differences for every parameter in `params`.
///
/// `params` is restored to its original values on return.
pub fn gradient_check<F>(
    params: &mut ParamSet,
    builder: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: for<'g, 'p> Fn(&'g mut Graph<'p>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let root = builder(&mut g);
        g.backward(root)
            .expect("gradient check needs a scalar loss");
        g.param_grads()
    };
    let eval = |ps: &ParamSet| -> f64 {
        let mut g = Graph::new(ps);
        let root = builder(&mut g);
        g.scalar(root)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        entries_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).requires_grad() {
            continue;
        }
        let len = params.get(id).len();
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let auto = analytic.get(id).map_or(0.0, |g| g[i]);
            let denom = auto.abs().max(numeric.abs()).max(opts.floor);
            let rel = (auto - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = Some(params.name(id).to_string());
                report.worst_index = i;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::glorot(4, 3, &mut rng));
        let x = Tensor::uniform(2, 4, 1.0, &mut rng);
        let report = gradient_check(
            &mut ps,
            |g| {
                let xv = g.input(&x);
                let wv = g.param(w);
                let y = g.matmul(xv, wv);
                g.sum(y)
            },
            // any step is exact for a linear loss; a large one keeps
            // cancellation error out of the comparison
            &GradCheckOptions {
                step: 1e-2,
                ..GradCheckOptions::default()
            },
        );
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
        assert_eq!(report.entries_checked, 12);
    }

    #[test]
    fn tanh_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let w1 = ps.add("w1", Tensor::glorot(3, 5, &mut rng));
        let w2 = ps.add("w2", Tensor::glorot(5, 2, &mut rng));
        let x = Tensor::uniform(4, 3, 1.0, &mut rng);
        let report = gradient_check(
            &mut ps,
            |g| {
                let xv = g.input(&x);
                let a = g.param(w1);
                let h = g.matmul(xv, a);
                let h = g.tanh(h);
                let b = g.param(w2);
                let o = g.matmul(h, b);
                let o = g.sigmoid(o);
                g.sum(o)
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn parameters_are_restored() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::row(vec![0.1, 0.2, 0.3]));
        let before = ps.clone();
        gradient_check(
            &mut ps,
            |g| {
                let v = g.param(w);
                let e = g.exp(v);
                g.sum(e)
            },
            &GradCheckOptions::default(),
        );
        assert_eq!(ps, before);
    }
}
