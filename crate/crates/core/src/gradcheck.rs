//! Central finite-difference oracle for checking tape gradients.

use crate::error::{Error, Result};
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`,
/// so coordinates with gradients below the floor are compared absolutely.
/// Float-32 forward passes cannot resolve relative error on gradients much
/// smaller than this.
pub const REL_FLOOR: f64 = 1.0;

/// Divisors of `eps` tried in turn while a coordinate's perturbation
/// straddles a relu or max-pool branch boundary.
const STEP_SCHEDULE: [f32; 4] = [1.0, 4.0, 16.0, 64.0];

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Vec<f64>,
    /// Largest relative error over the smooth coordinates.
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    /// Coordinates with a max-pool or relu branch boundary on both sides
    /// within `eps / 64`. No difference quotient estimates the derivative
    /// there, so they are left out of `max_rel_error` (their `numeric` entry
    /// is NaN).
    pub straddled: Vec<usize>,
}

impl GradCheck {
    pub fn straddled_fraction(&self) -> f64 {
        self.straddled.len() as f64 / self.numeric.len().max(1) as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar function `f` at `at` against
/// central differences `(f(x+εe) − f(x−εe)) / (x+ε − (x−ε))` per coordinate.
///
/// The denominator uses the perturbation actually representable in `f32`, and
/// the scalar is read through [`Tape::scalar_f64`] so a loss reduced in `f64`
/// is not quantised to `f32` steps before differencing. Non-finite values anywhere in `f` surface as errors. When `x ± ε` takes a
/// different relu or max-pool branch than `x`, a second-order one-sided
/// stencil on the smooth side is used instead; if both sides cross, the step
/// shrinks (down to `ε / 64`). Coordinates that straddle a boundary
/// throughout are listed in [`GradCheck::straddled`] instead of being scored.
pub fn finite_diff_check<F>(f: F, at: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    check_impl(&f, at, eps, None)
}

/// Like [`finite_diff_check`] for a tensor-valued `f`, reduced to a scalar as
/// `Σ projection ⊙ f(x)`. The reduction happens in `f64` outside the tape,
/// which keeps float-32 rounding of a large scalar out of the differences.
pub fn finite_diff_check_projected<F>(
    f: F,
    at: &Tensor,
    eps: f32,
    projection: &Tensor,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    check_impl(&f, at, eps, Some(projection))
}

fn check_impl<F>(f: &F, at: &Tensor, eps: f32, projection: Option<&Tensor>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::contract(
            "finite_diff_check",
            format!("eps must be positive, got {eps}"),
        ));
    }

    let mut tape = Tape::new();
    let x = tape.variable(at.clone());
    let y = f(&mut tape, x)?;
    let base_signature = tape.branch_signature();
    let grads = match projection {
        None => tape.backward(y)?,
        Some(p) => tape.backward_with(y, p.clone())?,
    };
    let analytic = grads
        .get(x)
        .cloned()
        .ok_or_else(|| Error::contract("finite_diff_check", "input received no gradient"))?;

    let eval = |point: Tensor| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let x = t.constant(point);
        let y = f(&mut t, x)?;
        let sig = t.branch_signature();
        let out = t.value(y);
        let value = match projection {
            None => t.scalar_f64(y)?,
            Some(p) => {
                if p.shape() != out.shape() {
                    return Err(Error::contract(
                        "finite_diff_check",
                        format!(
                            "projection shape {:?} differs from output {:?}",
                            p.shape(),
                            out.shape()
                        ),
                    ));
                }
                p.data()
                    .iter()
                    .zip(out.data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            }
        };
        Ok((value, sig))
    };

    let base_value = eval(at.clone())?.0;
    let evaluated = par::map_indices(at.numel(), |i| -> Result<(f64, bool)> {
        let x0 = at.data()[i];
        // Value and branch signature at coordinate i set to x0 + offset; the
        // offset actually applied in f32 is returned alongside.
        let probe = |offset: f32| -> Result<(f64, f64, bool)> {
            let mut p = at.clone();
            p.data_mut()[i] = x0 + offset;
            let d = p.data()[i] as f64 - x0 as f64;
            let (v, sig) = eval(p)?;
            Ok((d, v, sig == base_signature))
        };
        let finite = |d: f64| -> Result<f64> {
            if d.is_finite() {
                Ok(d)
            } else {
                Err(Error::NonFinite {
                    op: format!("finite difference at coordinate {i}"),
                })
            }
        };
        for shrink in STEP_SCHEDULE {
            let h = eps / shrink;
            let (dp, fp, smooth_p) = probe(h)?;
            let (dm, fm, smooth_m) = probe(-h)?;
            if dp == 0.0 || dm == 0.0 {
                break;
            }
            if smooth_p && smooth_m {
                return Ok((finite((fp - fm) / (dp - dm))?, false));
            }
            // One side crosses a branch boundary: second-order one-sided
            // stencil through x, x+s, x+2s on the smooth side.
            for (smooth, sign) in [(smooth_p, 1.0f32), (smooth_m, -1.0)] {
                if !smooth {
                    continue;
                }
                let (d1, f1, _) = probe(sign * h)?;
                let (d2, f2, ok2) = probe(sign * 2.0 * h)?;
                if ok2 && d2 != d1 {
                    let df = -(d1 + d2) / (d1 * d2) * base_value + d2 / (d1 * (d2 - d1)) * f1
                        - d1 / (d2 * (d2 - d1)) * f2;
                    return Ok((finite(df)?, false));
                }
            }
        }
        Ok((f64::NAN, true))
    })
    .into_iter()
    .collect::<Result<Vec<(f64, bool)>>>()?;
    let numeric: Vec<f64> = evaluated.iter().map(|e| e.0).collect();
    let straddled: Vec<usize> = (0..evaluated.len()).filter(|&i| evaluated[i].1).collect();

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(&evaluated)
        .map(|(&a, &(n, crossed))| {
            if crossed {
                0.0
            } else {
                relative_error(a as f64, n)
            }
        })
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );

    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        straddled,
    })
}
