//! Central finite-difference check of the tape's gradients.

use super::{Graph, ParamSet, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every compared coordinate.
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Parameters skipped because they are frozen.
    pub frozen_skipped: usize,
}

/// Compares `backward()` against `(f(p + eps) - f(p - eps)) / 2eps` for every
/// coordinate of every unfrozen parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// vanishing gradients from producing meaningless ratios. `max_coords`
/// limits how many evenly spaced coordinates of each parameter are probed.
pub fn grad_check<F>(params: &mut ParamSet<f64>, f: F, eps: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    const FLOOR: f64 = 1e-6;
    let grads = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::inference(params);
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0])
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0, frozen_skipped: 0 };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        if params.get(id).frozen {
            report.frozen_skipped += 1;
            continue;
        }
        let n = params.get(id).value.len();
        let stride = match max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map(|g| g.data()[j]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((params.get(id).name.clone(), j));
                }
            }
        }
    }
    Ok(report)
}
