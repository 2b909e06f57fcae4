use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Entries compared across all inputs.
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// entries whose gradient magnitude exceeds [`FLOOR`].
    pub max_rel_error: f64,
    /// Largest absolute difference over every entry.
    pub max_abs_error: f64,
    /// `(input, index, analytic, numeric)` of the worst relative entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    /// Every entry above [`FLOOR`] agrees to within `rel_tol`.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Magnitude below which entries are compared absolutely only.
pub const FLOOR: f64 = 1e-6;

/// Fixed, non-uniform weights that turn a tensor output into a scalar.
fn probe_weight(i: usize) -> f64 {
    ((i * 37 % 11) as f64 - 5.0) / 5.0 + 0.05
}

fn scalarize(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let (r, c) = g.shape(out);
    if r * c == 1 {
        return Ok(out);
    }
    let w = g.constant(r, c, (0..r * c).map(probe_weight).collect())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Compares reverse-mode gradients of `f` with central differences of step
/// `h`. Non-scalar outputs are reduced with fixed probe weights.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheck>
where
    F: for<'p> Fn(&mut Graph<'p>, &[Var]) -> Result<Var>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out)?;
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t, false)).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out)?;
        Ok(g.scalar_value(loss))
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let x = work[k].data()[i];
            work[k].data_mut()[i] = x + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let diff = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            let scale = a.abs().max(numeric.abs());
            if scale > FLOOR && diff / scale > report.max_rel_error {
                report.max_rel_error = diff / scale;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_matches() {
        let x = Tensor::vector(vec![0.5, -1.25, 2.0]);
        let r = check_gradients(
            &[x],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-8), "{r:?}");
    }

    #[test]
    fn scale_and_bad_step() {
        let x = Tensor::vector(vec![0.3]);
        let r = check_gradients(&[x], |g, v| g.scale(v[0], 2.0), 1e-5).unwrap();
        assert!(r.passes(1e-8));
        assert!(check_gradients(&[Tensor::vector(vec![1.0])], |g, v| g.scale(v[0], 1.0), 0.0).is_err());
    }
}
