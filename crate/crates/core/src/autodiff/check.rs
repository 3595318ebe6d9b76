//! Central-difference gradient checking.
//!
//! Meant for `f64` graphs. `f` must be deterministic: it is re-run once per
//! perturbed coordinate and any randomness inside it makes the comparison
//! meaningless.

use super::graph::{Graph, Var};
use super::tensor::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Builds a scalar from one input on a fresh graph.
pub trait ScalarFn<S: Scalar>: Fn(&mut Graph<S>, Var) -> Result<Var> {}
impl<S: Scalar, F: Fn(&mut Graph<S>, Var) -> Result<Var>> ScalarFn<S> for F {}

/// Autodiff gradient of `f` at `x`.
pub fn autodiff_grad<S: Scalar>(f: &impl ScalarFn<S>, x: &Tensor<S>) -> Result<Vec<S>> {
    let mut g = Graph::new();
    let xv = g.variable(x);
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    Ok(grads.wrt(xv).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); x.numel()]))
}

fn eval<S: Scalar>(f: &impl ScalarFn<S>, x: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar-valued function".into()));
    }
    Ok(g.scalar_value(y))
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad<S: Scalar>(f: &impl ScalarFn<S>, x: &Tensor<S>, h: f64) -> Result<Vec<S>> {
    let h = lit::<S>(h);
    let two_h = h + h;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Ok(out)
}

/// Ridders' extrapolation of `central(h)` toward h = 0: a Neville tableau
/// over steps shrinking by 1.4, keeping the entry with the smallest
/// estimated error. Returns the estimate and its error.
pub fn ridders(mut central: impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    let mut tab = [[0.0f64; ROWS]; ROWS];
    let mut h = h0;
    tab[0][0] = central(h)?;
    let (mut best, mut err) = (tab[0][0], f64::INFINITY);
    for i in 1..ROWS {
        h /= SHRINK;
        tab[0][i] = central(h)?;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (tab[j][i] - tab[j - 1][i]).abs().max((tab[j][i] - tab[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = tab[j][i];
            }
        }
        if (tab[i][i] - tab[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}

/// [`ridders`] from starting steps `h0`, `h0/10` and `h0/100`, keeping the
/// result with the smallest estimated error. A single start fails when `h0`
/// already exceeds the scale on which the function curves.
pub fn extrapolate(mut central: impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<f64> {
    let mut best = (f64::NAN, f64::INFINITY);
    for k in 0..3 {
        let r = ridders(&mut central, h0 / 10f64.powi(k))?;
        if r.1 < best.1 {
            best = r;
        }
    }
    Ok(best.0)
}

/// [`numeric_grad`] with each coordinate extrapolated by [`extrapolate`]
/// from starting step `h0`.
pub fn extrapolated_grad<S: Scalar>(f: &impl ScalarFn<S>, x: &Tensor<S>, h0: f64) -> Result<Vec<S>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let d = extrapolate(
            |h| {
                probe.data_mut()[i] = orig + lit::<S>(h);
                let up = eval(f, &probe)?;
                probe.data_mut()[i] = orig - lit::<S>(h);
                let down = eval(f, &probe)?;
                probe.data_mut()[i] = orig;
                Ok((up - down).to_f64().unwrap_or(f64::NAN) / (2.0 * h))
            },
            h0,
        )?;
        out.push(lit::<S>(d));
    }
    Ok(out)
}

/// Largest relative disagreement between the autodiff and the
/// central-difference gradient, with denominator `max(|g|, 1e-8)` where `g`
/// is the autodiff value.
pub fn finite_diff_check<S: Scalar>(f: impl ScalarFn<S>, x: &Tensor<S>, h: f64) -> Result<f64> {
    let analytic = autodiff_grad(&f, x)?;
    let numeric = numeric_grad(&f, x, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// [`finite_diff_check`] against [`extrapolated_grad`].
pub fn extrapolated_diff_check<S: Scalar>(f: impl ScalarFn<S>, x: &Tensor<S>, h0: f64) -> Result<f64> {
    let analytic = autodiff_grad(&f, x)?;
    let numeric = extrapolated_grad(&f, x, h0)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let a = a.to_f64().unwrap();
            let n = n.to_f64().unwrap();
            (a - n).abs() / a.abs().max(1e-8)
        })
        .fold(0.0, f64::max)
}
