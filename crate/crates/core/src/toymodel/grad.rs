//! Objective interface, gradient evaluation and finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LayeredParams;

/// A scalar function of a parameter vector with an analytic gradient.
pub trait Objective: Sync {
    fn value(&self, params: &LayeredParams) -> Result<f64>;

    fn value_and_grad(&self, params: &LayeredParams) -> Result<(f64, LayeredParams)>;
}

/// Gradient of `objective` at `params`, rejecting non-finite values.
pub fn grad_params(objective: &dyn Objective, params: &LayeredParams) -> Result<LayeredParams> {
    let (v, g) = objective.value_and_grad(params)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite ({v})")));
    }
    if !g.is_finite() {
        return Err(Error::Numeric("gradient has non-finite entries".into()));
    }
    Ok(g)
}

/// Central difference `(f(p + h e_i) - f(p - h e_i)) / 2h` at a flat coordinate.
pub fn central_difference(objective: &dyn Objective, params: &LayeredParams, coord: usize, h: f64) -> Result<f64> {
    let mut p = params.clone();
    let x0 = p.get_flat(coord);
    p.set_flat(coord, x0 + h);
    let fp = objective.value(&p)?;
    p.set_flat(coord, x0 - h);
    let fm = objective.value(&p)?;
    Ok((fp - fm) / (2.0 * h))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCheck {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Compares analytic and central-difference derivatives on `coords`.
///
/// The relative error is taken against the larger magnitude of the two
/// derivatives, floored at `floor` so coordinates with a vanishing
/// derivative are judged on absolute error instead.
pub fn gradient_check(
    objective: &dyn Objective,
    params: &LayeredParams,
    coords: &[usize],
    h: f64,
    floor: f64,
) -> Result<Vec<GradientCheck>> {
    let g = grad_params(objective, params)?;
    coords
        .iter()
        .map(|&coord| {
            let numeric = central_difference(objective, params, coord, h)?;
            let analytic = g.get_flat(coord);
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            Ok(GradientCheck { coord, analytic, numeric, relative_error: (analytic - numeric).abs() / scale })
        })
        .collect()
}

/// `||theta - center||^2`, used to exercise the optimizers.
pub struct QuadraticBowl {
    pub center: LayeredParams,
}

impl Objective for QuadraticBowl {
    fn value(&self, params: &LayeredParams) -> Result<f64> {
        let d = params.checked_sub(&self.center)?;
        d.dot(&d)
    }

    fn value_and_grad(&self, params: &LayeredParams) -> Result<(f64, LayeredParams)> {
        let d = params.checked_sub(&self.center)?;
        Ok((d.dot(&d)?, d.scaled(2.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl Objective for Constant {
        fn value(&self, _: &LayeredParams) -> Result<f64> {
            Ok(3.0)
        }
        fn value_and_grad(&self, p: &LayeredParams) -> Result<(f64, LayeredParams)> {
            Ok((3.0, LayeredParams::zeros(&p.layout())?))
        }
    }

    struct Broken;
    impl Objective for Broken {
        fn value(&self, _: &LayeredParams) -> Result<f64> {
            Ok(f64::NAN)
        }
        fn value_and_grad(&self, p: &LayeredParams) -> Result<(f64, LayeredParams)> {
            Ok((f64::NAN, LayeredParams::zeros(&p.layout())?))
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = LayeredParams::new(vec![vec![1.0, 2.0], vec![3.0]]).unwrap();
        assert_eq!(grad_params(&Constant, &p).unwrap().l2_norm(), 0.0);
    }

    #[test]
    fn quadratic_gradient_is_twice_offset() {
        let center = LayeredParams::new(vec![vec![1.0, -1.0], vec![0.5]]).unwrap();
        let p = LayeredParams::new(vec![vec![2.0, 1.0], vec![0.0]]).unwrap();
        let g = grad_params(&QuadraticBowl { center: center.clone() }, &p).unwrap();
        assert_eq!(g, p.checked_sub(&center).unwrap().scaled(2.0));
        let checks = gradient_check(&QuadraticBowl { center }, &p, &[0, 1, 2], 1e-5, 1e-8).unwrap();
        assert!(checks.iter().all(|c| c.relative_error < 1e-8));
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let p = LayeredParams::zeros(&[2]).unwrap();
        assert!(matches!(grad_params(&Broken, &p), Err(Error::Numeric(_))));
    }
}
