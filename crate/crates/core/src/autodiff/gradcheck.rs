//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |autodiff_i - fd_i| / max(max_i |autodiff_i|, max_i |fd_i|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a leaky-relu kink.
    pub skipped: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the autodiff gradient of scalar `f` at `x` against central differences
/// over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, &all, h, tol)
}

/// Like [`grad_check`], restricted to the listed flat coordinates.
///
/// The error is normalized by the largest gradient magnitude seen on the checked
/// coordinates, so coordinates with near-zero gradient do not dominate.
///
/// When the `+h` or `-h` evaluation flips the sign of any leaky-relu input, the
/// difference quotient straddles a kink, so the step is retried at `h/10`,
/// `h/100` and `h/1000`. A coordinate that crosses a kink at every step is
/// skipped. The check fails if every coordinate is skipped.
pub fn grad_check_at<F>(
    f: F,
    x: &Tensor,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        Ok((scalar_of(&g, y)?, g.kink_pattern()))
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let pattern = g.kink_pattern();
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut skipped = 0;
    for &i in coords {
        let mut numeric = None;
        for step in [h, h / 10.0, h / 100.0, h / 1000.0] {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let (yp, kp) = eval(plus)?;
            let (ym, km) = eval(minus)?;
            if kp == pattern && km == pattern {
                numeric = Some((yp - ym) / (2.0 * step));
                break;
            }
        }
        let Some(numeric) = numeric else {
            skipped += 1;
            continue;
        };
        let a = analytic.data()[i];
        max_abs = max_abs.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    let max_rel_error = if scale > 0.0 { max_abs / scale } else { 0.0 };
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error: max_abs,
        checked: coords.len() - skipped,
        skipped,
        tol,
        passed: max_rel_error <= tol && (coords.is_empty() || skipped < coords.len()),
    })
}

fn scalar_of(g: &Graph, y: Var) -> Result<f64> {
    let t = g.value(y);
    if t.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
