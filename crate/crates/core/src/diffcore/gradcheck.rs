//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One checked scalar coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Largest relative error per parameter tensor.
    pub fn per_param_max(&self, n_params: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; n_params];
        for c in &self.coords {
            out[c.param] = out[c.param].max(c.rel_error);
        }
        out
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare reverse-mode gradients of `f` against central differences over
/// every coordinate of every tensor in `params`.
///
/// `f` receives a fresh tape and one `Var` per parameter and must return a
/// scalar. It is evaluated once with gradients and twice per coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::arg(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        let v = t.value(l).item()?;
        if !v.is_finite() {
            return Err(Error::numeric("perturbed evaluation is not finite"));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut coords = Vec::new();
    for (pi, var) in vars.iter().enumerate() {
        let analytic_t = grads.get(*var);
        for idx in 0..params[pi].numel() {
            let orig = params[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = analytic_t.map_or(0.0, |g| g.data()[idx]);
            coords.push(CoordCheck {
                param: pi,
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let passed = coords.iter().all(|c| c.rel_error <= tolerance);
    Ok(GradCheckReport {
        coords,
        tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.worst());
        assert!((r.coords[0].analytic - 6.0).abs() < 1e-15);
    }

    #[test]
    fn linear_function_machine_precision() {
        let w = Tensor::new(&[3], vec![0.5, -2.0, 4.0]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                t.sum(p)
            },
            &[w, x],
            1e-3,
            1e-10,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-10, "{}", r.max_rel_error());
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let r = grad_check(
            |t, v| {
                let l = t.ln(v[0])?;
                t.sum(l)
            },
            &[Tensor::scalar(1e-7)],
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_bad_eps() {
        let r = grad_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0, 1.0);
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
