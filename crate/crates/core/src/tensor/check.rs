use super::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::{invalid, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(alloc::string::String, usize)>,
    pub entries_checked: usize,
}

/// Relative error floor: gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of `build_loss` with central differences
/// `(f(w+ε) − f(w−ε)) / 2ε` on up to `per_tensor` evenly strided entries of
/// every parameter. The relative error of one entry is
/// `|a − n| / max(|a|, |n|, 1e-4)`; entries whose gradients are both zero
/// contribute 0.
pub fn grad_check<T, F>(params: &mut ParamStore<T>, mut build_loss: F, eps: f64, per_tensor: usize) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> FnMut(&mut Graph<'g, T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid!("finite-difference step must be positive"));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build_loss(&mut g)?;
        let grads = g.backward(loss)?;
        params
            .ids()
            .map(|id| grads.param(id).map(<[T]>::to_vec))
            .collect::<alloc::vec::Vec<_>>()
    };
    let mut eval = |params: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = build_loss(&mut g)?;
        Ok(g.scalar(loss).as_f64())
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let ids: alloc::vec::Vec<ParamId> = params.ids().collect();
    for id in ids {
        let len = params.get(id).len();
        let count = per_tensor.min(len).max(1);
        for s in 0..count {
            let j = s * len / count;
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = T::of(orig.as_f64() + eps);
            let up = eval(params)?;
            params.get_mut(id).data_mut()[j] = T::of(orig.as_f64() - eps);
            let down = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[j].as_f64());
            let err = if a == 0.0 && numeric == 0.0 {
                0.0
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR)
            };
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).into(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]])).unwrap();
        let rep = grad_check(
            &mut s,
            |g| {
                let a = g.param(w);
                let sq = g.mul(a, a)?;
                let sc = g.scale(sq, 1.5);
                Ok(g.sum(sc))
            },
            1e-4,
            64,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
        assert_eq!(rep.entries_checked, 4);
    }

    #[test]
    fn independent_parameter_has_zero_error() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::from_rows(&[&[1.0, 2.0]])).unwrap();
        s.add("unused", Tensor::from_rows(&[&[5.0]])).unwrap();
        let w2 = s.add("w2", Tensor::from_rows(&[&[4.0]])).unwrap();
        let rep = grad_check(&mut s, |g| {
            let a = g.param(w2);
            let _ = g.param(w);
            Ok(g.scale(a, 0.0))
        }, 1e-5, 8)
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert_eq!(rep.entries_checked, 4);
    }
}
