use serde::Serialize;

use crate::error::{Error, Result};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Absolute difference below which a component counts as matching regardless
/// of its relative error.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub components: usize,
    pub pass: bool,
    /// Set when the function could not be evaluated at some perturbed point.
    pub error: Option<String>,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<NodeId>, Vec<NodeId>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<Vec<NodeId>>,
{
    let mut tape = Tape::new();
    let ids = params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let losses = f(&mut tape, &ids)?;
    for &l in &losses {
        if tape.value(l).len() != 1 {
            return Err(Error::NotScalar(tape.value(l).shape().to_vec()));
        }
    }
    Ok((tape, losses, ids))
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// with step `h`, componentwise over every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut reports = grad_check_many(|t, p| Ok(vec![f(t, p)?]), params, h, tol)?;
    Ok(reports.remove(0))
}

/// [`grad_check`] for several scalar outputs of one computation; each
/// perturbed evaluation is shared by all of them. One report per output.
pub fn grad_check_many<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<Vec<NodeId>>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let failed = |msg: String| {
        vec![GradCheckReport {
            max_rel_err: f64::INFINITY,
            max_abs_err: f64::INFINITY,
            components: 0,
            pass: false,
            error: Some(msg),
        }]
    };

    let (tape, losses, ids) = match eval(&f, params) {
        Ok(v) => v,
        Err(e) => return Ok(failed(e.to_string())),
    };
    let grads = match losses.iter().map(|&l| tape.backward(l)).collect::<Result<Vec<_>>>() {
        Ok(g) => g,
        Err(e) => return Ok(failed(e.to_string())),
    };
    let values = |tape: &Tape, ls: &[NodeId]| ls.iter().map(|&l| tape.value(l).item()).collect::<Vec<_>>();

    let mut work: Vec<Tensor> = params.to_vec();
    let n = losses.len();
    let (mut max_rel, mut max_abs) = (vec![0.0f64; n], vec![0.0f64; n]);
    let mut count = 0usize;
    for (pi, id) in ids.iter().enumerate() {
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&f, &work).map(|(t, l, _)| values(&t, &l));
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&f, &work).map(|(t, l, _)| values(&t, &l));
            work[pi].data_mut()[k] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return Ok(failed(e.to_string())),
            };
            for o in 0..n {
                let numeric = (plus[o] - minus[o]) / (2.0 * h);
                let a = grads[o].get(*id).expect("every param has a gradient").data()[k];
                if !numeric.is_finite() || !a.is_finite() {
                    return Ok(failed(format!("non-finite gradient component {k} of param {pi}")));
                }
                let abs = (a - numeric).abs();
                max_abs[o] = max_abs[o].max(abs);
                if abs >= ABS_FALLBACK {
                    max_rel[o] = max_rel[o].max(abs / a.abs().max(numeric.abs()));
                }
            }
            count += 1;
        }
    }
    Ok((0..n)
        .map(|o| GradCheckReport {
            max_rel_err: max_rel[o],
            max_abs_err: max_abs[o],
            components: count,
            pass: max_rel[o] < tol,
            error: None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_hand_gradient() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &mut Tape, p: &[NodeId]| {
            let sq = t.mul(p[0], p[0])?;
            let m = t.reduce_mean(sq)?;
            t.scale(m, 2.0)
        };
        let report = grad_check(f, std::slice::from_ref(&w), 1e-5, 1e-8).unwrap();
        assert!(report.pass, "{report:?}");

        let mut tape = Tape::new();
        let id = tape.param(w).unwrap();
        let loss = f(&mut tape, &[id]).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(id).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let w = Tensor::new(vec![3], vec![0.5, -0.1, 4.0]).unwrap();
        let f = |t: &mut Tape, _p: &[NodeId]| t.constant(Tensor::scalar(3.0));
        let report = grad_check(f, &[w], 1e-5, 1e-8).unwrap();
        assert!(report.pass);
        assert!(report.max_abs_err <= 1e-8);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let w = Tensor::scalar(1.0);
        assert!(grad_check(|t: &mut Tape, p: &[NodeId]| t.reduce_mean(p[0]), &[w], 1e-2, 1e-5).is_err());
    }

    #[test]
    fn overflow_is_reported_not_panicked() {
        let w = Tensor::scalar(1e200);
        let f = |t: &mut Tape, p: &[NodeId]| t.mul(p[0], p[0]);
        let report = grad_check(f, &[w], 1e-5, 1e-5).unwrap();
        assert!(!report.pass);
        assert!(report.error.is_some());
    }
}
