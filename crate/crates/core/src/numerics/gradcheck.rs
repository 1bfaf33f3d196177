//! Central finite-difference gradient checking in `f64`.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per parameter (evenly strided).
    pub max_per_param: usize,
    /// Evaluate in a training graph with this dropout seed (identical masks on
    /// every evaluation).
    pub train_seed: Option<u64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            floor: 1e-6,
            max_per_param: usize::MAX,
            train_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter, element, analytic, numeric) at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// for every trainable parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore<f64>, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let new_graph = || match opts.train_seed {
        Some(seed) => Graph::training(seed),
        None => Graph::new(),
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = new_graph();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut analytic = store.clone();
    {
        let mut g = new_graph();
        let l = loss_fn(&mut g, &analytic)?;
        g.backward_into(l, &mut analytic)?;
    }

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let stride = n.div_ceil(opts.max_per_param.min(n)).max(1);
        let grad = analytic.get(id).tensor.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for j in (0..n).step_by(stride) {
            let orig = probe.tensor(id).data()[j];
            probe.get_mut(id).tensor.data_mut()[j] = orig + opts.h;
            let up = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = orig - opts.h;
            let down = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let err = relative_error(grad[j], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), j, grad[j], numeric));
            }
        }
    }
    Ok(report)
}
