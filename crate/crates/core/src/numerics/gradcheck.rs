//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::optim::{Gradients, ParamStore};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter block, by name.
    pub per_block: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn worst_block(&self) -> Option<(&str, f64)> {
        self.per_block
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `analytic` against central differences of `loss` around the
/// current values in `store`.
///
/// At most `max_per_block` elements of each parameter are probed (evenly
/// strided); `None` probes every element. `store` is restored afterwards.
pub fn finite_diff_check(
    store: &mut ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    analytic: &Gradients<f64>,
    tolerance: f64,
    max_per_block: Option<usize>,
) -> Result<GradCheckReport> {
    let mut per_block = BTreeMap::new();
    let mut checked = 0;
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let n = store.value(id).len();
        let stride = match max_per_block {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss(store);
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
        per_block.insert(name, worst);
    }
    let max_rel_err = per_block.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_block,
        max_rel_err,
        tolerance,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::tensor::Tensor;

    fn linear_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(3, 2, vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1]));
        s.add("b", Tensor::matrix(1, 2, vec![0.3, -0.2]));
        s
    }

    fn linear_loss(s: &ParamStore<f64>) -> (f64, Gradients<f64>) {
        let mut g = Graph::new(s);
        let x = g.input(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0.5, 0.]));
        let y = g.linear(x, s.id("w").unwrap(), s.id("b"));
        let l = g.sum_all(y);
        let v = g.value(l).data()[0];
        (v, g.backward(l).params)
    }

    #[test]
    fn linear_model_matches() {
        let mut s = linear_store();
        let (_, grads) = linear_loss(&s);
        let r = finite_diff_check(&mut s, |s| Ok(linear_loss(s).0), &grads, 1e-8, None).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut s = linear_store();
        let (_, mut grads) = linear_loss(&s);
        grads.scale(1.01);
        let r = finite_diff_check(&mut s, |s| Ok(linear_loss(s).0), &grads, 1e-4, None).unwrap();
        assert!(!r.passed());
    }
}
