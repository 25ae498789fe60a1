//! Central finite-difference check of graph gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_error: f64,
    /// `(input, element)` at which the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared on an absolute scale of `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradient of `Σ w ⊙ f(inputs)` computed by [`Graph::backward`]
/// against central differences with step `h`. `weights` must have one entry
/// per element of the output.
pub fn gradcheck<F>(inputs: &[Tensor], weights: &[f64], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let scalarize = |g: &mut Graph, out: Var| -> Result<Var> {
        if g.value(out).numel() != weights.len() {
            return Err(Error::Shape(format!(
                "gradcheck weights: {} for output of {} elements",
                weights.len(),
                g.value(out).numel()
            )));
        }
        let w = Tensor::new(g.value(out).shape().to_vec(), weights.to_vec())?;
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let loss = scalarize(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i][j], numeric, floor);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: (i, j),
                    analytic: analytic[i][j],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
