//! Central finite-difference verification of tape gradients.
//!
//! The reported metric per coordinate is
//! `|analytic - numeric| / (|analytic| + |numeric| + floor)` with
//! `numeric = (f(p + h) - f(p - h)) / 2h`, or the fourth-order central
//! stencil `(8(f(p+h) - f(p-h)) - (f(p+2h) - f(p-2h))) / 12h` when
//! [`Stencil::FourPoint`] is selected; a check returns the maximum.
//! The floor keeps coordinates whose true gradient is zero (a key bias under
//! softmax, say) from reporting pure rounding noise as a relative error.
//!
//! In [`Precision::F64`] both sides run in `f64`. In [`Precision::F32`] the
//! analytic gradient comes from the `f32` tape and is compared against the
//! `f64` difference quotient taken at the same (f32-rounded) point, since an
//! `f32` difference quotient is dominated by rounding noise at `h = 1e-3`.

use crate::error::{Error, Result};
use crate::par;
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DENOM_FLOOR: f64 = 1e-8;

/// A scalar function of a list of parameter tensors, expressed once and
/// evaluated at any precision.
pub trait Objective: Sync {
    fn eval<F: Scalar>(&self, tape: &mut GradTape<F>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    TwoPoint,
    FourPoint,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub precision: Precision,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Added to the relative-error denominator.
    pub floor: f64,
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-3,
            precision: Precision::F32,
            max_coords_per_tensor: None,
            floor: DENOM_FLOOR,
            stencil: Stencil::TwoPoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Worst relative error within each tensor.
    pub per_tensor: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, DENOM_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + floor)
}

fn value_at<F: Scalar, O: Objective>(obj: &O, params: &[Tensor<F>]) -> Result<f64> {
    let mut tape = GradTape::<F>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let root = obj.eval(&mut tape, &vars)?;
    let v = tape.value(root);
    if !v.is_scalar() {
        return Err(Error::contract("objective must return a scalar"));
    }
    let x = v.item().to_f64_lossy();
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(x)
}

fn analytic_grads<F: Scalar, O: Objective>(obj: &O, params: &[Tensor<F>]) -> Result<Vec<Vec<f64>>> {
    let mut tape = GradTape::<F>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = obj.eval(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match grads.get(v) {
            Some(g) => g.data().iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect())
}

fn numeric_partial<F: Scalar, O: Objective>(
    obj: &O,
    params: &[Tensor<F>],
    tensor: usize,
    coord: usize,
    h: f64,
    stencil: Stencil,
) -> Result<f64> {
    let mut p = params.to_vec();
    let x0 = p[tensor].data()[coord];
    let mut at = |dx: f64| -> Result<f64> {
        p[tensor].data_mut()[coord] = x0 + F::lit(dx);
        value_at(obj, &p)
    };
    let d1 = at(h)? - at(-h)?;
    match stencil {
        Stencil::TwoPoint => Ok(d1 / (2.0 * h)),
        Stencil::FourPoint => {
            let d2 = at(2.0 * h)? - at(-2.0 * h)?;
            Ok((8.0 * d1 - d2) / (12.0 * h))
        }
    }
}

fn coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len && c > 0 => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

/// Runs the check and returns the worst coordinate.
pub fn grad_check<O: Objective>(obj: &O, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let (analytic, base): (Vec<Vec<f64>>, Vec<Tensor<f64>>) = match opts.precision {
        Precision::F64 => (analytic_grads(obj, params)?, params.to_vec()),
        Precision::F32 => {
            let p32: Vec<Tensor<f32>> = params.iter().map(Tensor::cast).collect();
            let g = analytic_grads(obj, &p32)?;
            (g, p32.iter().map(Tensor::cast).collect())
        }
    };
    let jobs: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .flat_map(|(t, p)| coords(p.len(), opts.max_coords_per_tensor).into_iter().map(move |c| (t, c)))
        .collect();
    let numeric = par::map(&jobs, |&(t, c)| numeric_partial(obj, &base, t, c, opts.h, opts.stencil));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: jobs.len(),
        per_tensor: vec![0.0; base.len()],
    };
    for (&(t, c), num) in jobs.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[t][c];
        let err = relative_error_with_floor(ana, num, opts.floor);
        if err > report.per_tensor[t] || err.is_nan() {
            report.per_tensor[t] = err;
        }
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = (t, c);
            report.analytic = ana;
            report.numeric = num;
        }
    }
    Ok(report)
}
