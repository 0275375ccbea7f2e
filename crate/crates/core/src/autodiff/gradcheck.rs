//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Largest discrepancy found by [`check`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Elements whose `±h` stencil crossed a kink and were re-checked with
    /// a smaller step (only counted by [`check_piecewise`]).
    pub kinked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of `build` against central differences with
/// step `h`, perturbing every element of every input. `build` must return a
/// scalar and be deterministic in its inputs.
pub fn check<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = GradReport {
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
        kinked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let err = rel_error(a, numeric, floor);
            if err > worst.rel_error || (i == 0 && e == 0) {
                worst = GradReport {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: err,
                    kinked: 0,
                };
            }
        }
    }
    Ok(worst)
}

/// Like [`check`], for functions built from piecewise-smooth ops.
///
/// A central difference is only meaningful when `x - h`, `x` and `x + h`
/// sit on the same smooth piece. Where the stencil changes the graph's
/// [`Graph::kink_pattern`], the step is halved until it no longer does
/// (down to `h / 2^20`); such elements are counted in `kinked`.
pub fn check_piecewise<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g.value(out).item()?, g.kink_pattern()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let centre = g.kink_pattern();

    let mut worst = GradReport {
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
        kinked: 0,
    };
    let mut kinked = 0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            let mut step = h;
            let numeric = loop {
                work[i].data_mut()[e] = orig + step;
                let (plus, kp) = eval(&work)?;
                work[i].data_mut()[e] = orig - step;
                let (minus, km) = eval(&work)?;
                let smooth = kp == centre && km == centre;
                if smooth || step < h / f64::from(1u32 << 20) {
                    if step != h {
                        kinked += 1;
                    }
                    break (plus - minus) / (2.0 * step);
                }
                step /= 2.0;
            };
            work[i].data_mut()[e] = orig;
            let a = analytic.data()[e];
            let err = rel_error(a, numeric, floor);
            if err > worst.rel_error || (i == 0 && e == 0) {
                worst = GradReport {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: err,
                    kinked: 0,
                };
            }
        }
    }
    worst.kinked = kinked;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_sum(g: &mut Graph, v: &[Var]) -> Result<Var> {
        let r = g.relu(v[0])?;
        Ok(g.sum_all(r))
    }

    #[test]
    fn plain_check_trips_on_a_kink_inside_the_stencil() {
        let x = [Tensor::new(&[2], vec![3e-5, 0.7]).unwrap()];
        let plain = check(&x, 1e-4, 1e-4, relu_sum).unwrap();
        assert!(plain.rel_error > 0.1);
        let piecewise = check_piecewise(&x, 1e-4, 1e-4, relu_sum).unwrap();
        assert!(piecewise.rel_error < 1e-9, "{piecewise:?}");
        assert_eq!(piecewise.kinked, 1);
    }

    #[test]
    fn smooth_functions_use_the_full_step() {
        let x = [Tensor::new(&[3], vec![0.2, -1.0, 0.5]).unwrap()];
        let report = check_piecewise(&x, 1e-4, 1e-4, |g, v| {
            let e = g.exp(v[0])?;
            Ok(g.sum_all(e))
        })
        .unwrap();
        assert_eq!(report.kinked, 0);
        assert!(report.rel_error < 1e-7);
    }
}
