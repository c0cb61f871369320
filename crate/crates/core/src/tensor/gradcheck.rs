//! Central finite-difference checks of [`Graph`] gradients.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Below this norm a gradient is treated as zero and the absolute difference
/// is reported instead of the relative one.
pub const TINY_NORM: f64 = 1e-8;

/// `‖a - n‖ / (‖a‖ + ‖n‖)`, or `‖a - n‖` when both norms are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic) + norm(numeric);
    if scale < TINY_NORM {
        diff
    } else {
        diff / scale
    }
}

/// `max_k |a_k - n_k| / max(1, |n_k|)`.
pub fn scaled_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Both error measures of one comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradError {
    /// [`relative_error`] over all entries.
    pub relative: f64,
    /// [`scaled_error`], the worst single entry.
    pub scaled: f64,
}

impl GradError {
    pub fn between(analytic: &[f64], numeric: &[f64]) -> Self {
        GradError {
            relative: relative_error(analytic, numeric),
            scaled: scaled_error(analytic, numeric),
        }
    }

    pub fn worst(self) -> f64 {
        self.relative.max(self.scaled)
    }
}

/// Gradient of `sum(f(inputs) ⊙ R)` for a random fixed `R`, by backward pass
/// and by central differences over every input entry, compared over all
/// inputs together.
///
/// `f` must be deterministic: any randomness it uses has to be reseeded on
/// every call.
pub fn check_fn<F>(inputs: &[Tensor], f: F, step: f64, rng: &mut impl Rng) -> Result<GradError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = Tensor::uniform(&probe_shape, 1.0, rng);
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let s = g.sum(prod);
        Ok(g.value(s).data()[0])
    };

    let mut analytic = Vec::new();
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let s = g.sum(prod);
        g.backward(s)?;
        for (v, t) in vars.iter().zip(inputs) {
            match g.grad(*v) {
                Some(grad) => analytic.extend_from_slice(grad.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut values = inputs.to_vec();
    for k in 0..values.len() {
        for idx in 0..values[k].numel() {
            let x0 = values[k].data()[idx];
            values[k].data_mut()[idx] = x0 + step;
            let plus = eval(&values)?;
            values[k].data_mut()[idx] = x0 - step;
            let minus = eval(&values)?;
            values[k].data_mut()[idx] = x0;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }
    if numeric.iter().chain(&analytic).any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite value in gradient check".into()));
    }
    Ok(GradError::between(&analytic, &numeric))
}
