//! Central finite-difference verification of recorded backward rules.

use crate::graphcore::graph::{Graph, Var};
use crate::graphcore::tensor::Tensor;
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation applied to each coordinate in turn.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients near
    /// zero are judged on absolute agreement.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar function `f` at `point` with
/// central differences, coordinate by coordinate, over every input tensor.
///
/// `f` receives a fresh graph and one leaf per input tensor and returns the scalar output node.
pub fn grad_check<S, F>(
    point: &[Tensor<S>],
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, GraphError>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, GraphError>,
{
    let eval = |inputs: Vec<Tensor<S>>, with_grad: bool| -> Result<(f64, Vec<Tensor<S>>), GraphError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs
            .into_iter()
            .map(|t| if with_grad { g.leaf(t) } else { g.constant(t) })
            .collect();
        let out = f(&mut g, &leaves)?;
        let value = g.value(out).item().to_f64().unwrap_or(f64::NAN);
        if !with_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(out)?;
        Ok((value, leaves.iter().map(|&l| grads.wrt(&g, l)).collect()))
    };

    let (_, analytic) = eval(point.to_vec(), true)?;
    let h = S::lit(cfg.step);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (which, tensor) in point.iter().enumerate() {
        for idx in 0..tensor.numel() {
            let mut plus = point.to_vec();
            plus[which].data_mut()[idx] += h;
            let mut minus = point.to_vec();
            minus[which].data_mut()[idx] -= h;
            let (fp, _) = eval(plus, false)?;
            let (fm, _) = eval(minus, false)?;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[which].data()[idx].to_f64().unwrap_or(f64::NAN);
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::<f64>::from_f64(&[5], &[0.3, -1.2, 2.0, 0.0, 1.7]).unwrap();
        let report = grad_check(
            &[x],
            |g, v| {
                let sq = g.square(v[0])?;
                g.sum(sq)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        use crate::graphcore::graph::{BackwardCtx, Op};
        struct Broken;
        impl Op<f64> for Broken {
            fn name(&self) -> &'static str {
                "broken"
            }
            fn backward(&self, ctx: &BackwardCtx<'_, f64>) -> Vec<Option<Tensor<f64>>> {
                vec![Some(ctx.grad.map(|g| 3.0 * g))]
            }
        }
        let x = Tensor::<f64>::from_f64(&[1], &[0.7]).unwrap();
        let report = grad_check(
            &[x],
            |g, v| {
                let value = g.value(v[0]).map(|x| x * x);
                let y = g.record(&[v[0]], value, Broken)?;
                g.sum(y)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }
}
