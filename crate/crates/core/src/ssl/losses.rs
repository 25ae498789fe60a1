use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, Graph, Tensor, Var};

const NORMALIZE_EPS: f64 = 1e-12;

/// Backward of the NT-Xent loss with respect to already-normalized rows.
///
/// With `S = Zn·Znᵀ` and `G = ∂L/∂S`, `∂L/∂Zn = (G + Gᵀ)·Zn`.
struct NtXentRule {
    tau: f64,
    /// Row-wise softmax over `k ≠ i` of `S_ik / τ`.
    probs: Vec<f64>,
}

impl BackwardRule for NtXentRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let zn = inputs[0];
        let (n2, d) = (zn.shape()[0], zn.shape()[1]);
        let scale = grad_output[0] / (n2 as f64 * self.tau);
        let mut gsym = vec![0.0; n2 * n2];
        for i in 0..n2 {
            for k in 0..n2 {
                let mut gik = self.probs[i * n2 + k];
                if k == i ^ 1 {
                    gik -= 1.0;
                }
                gsym[i * n2 + k] += scale * gik;
                gsym[k * n2 + i] += scale * gik;
            }
        }
        let z = zn.data();
        let mut dz = vec![0.0; n2 * d];
        for i in 0..n2 {
            let row = &mut dz[i * d..(i + 1) * d];
            for k in 0..n2 {
                let g = gsym[i * n2 + k];
                if g != 0.0 {
                    row.iter_mut()
                        .zip(&z[k * d..(k + 1) * d])
                        .for_each(|(r, v)| *r += g * v);
                }
            }
        }
        Ok(vec![Some(dz)])
    }
}

/// Normalized temperature-scaled cross-entropy over `2N` rows where rows
/// `2m` and `2m+1` are the two views of sample `m`.
///
/// Rows are l2-normalized; for anchor `i` with partner `j`,
/// `ℓ_i = −log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))`, and the loss is the mean
/// of `ℓ_i` over all `2N` anchors.
pub fn nt_xent(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("nt_xent expects a 2N×D matrix, got {shape:?}")));
    }
    let n2 = shape[0];
    if n2 % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "nt_xent needs an even number of rows, got {n2}"
        )));
    }
    if n2 < 4 {
        return Err(Error::BatchTooSmall { got: n2, need: 4 });
    }
    let zn = g.l2_normalize(z, NORMALIZE_EPS)?;
    let d = shape[1];
    let v = g.value(zn).data();
    let mut probs = vec![0.0; n2 * n2];
    let mut total = 0.0;
    let mut logits = vec![0.0; n2];
    for i in 0..n2 {
        let a = &v[i * d..(i + 1) * d];
        for (k, l) in logits.iter_mut().enumerate() {
            let b = &v[k * d..(k + 1) * d];
            *l = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
        let max = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..n2).filter(|&k| k != i) {
            let e = (logits[k] - max).exp();
            probs[i * n2 + k] = e;
            denom += e;
        }
        probs[i * n2..(i + 1) * n2].iter_mut().for_each(|p| *p /= denom);
        total += max + denom.ln() - logits[i ^ 1];
    }
    let loss = Tensor::scalar(total / n2 as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("nt_xent"));
    }
    g.custom(&[zn], loss, Box::new(NtXentRule { tau, probs }))
}

/// Mean cross-entropy of `[B×4]` rotation logits against labels in `0..4`.
pub fn rotnet_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(Error::Shape(format!("rotation logits must be B×4, got {shape:?}")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= 4) {
        return Err(Error::LabelOutOfRange { label, classes: 4 });
    }
    let logp = g.log_softmax(logits)?;
    g.cross_entropy(logp, labels)
}
