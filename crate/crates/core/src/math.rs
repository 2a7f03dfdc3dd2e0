//! Flat parameter vectors and the log-cosh smooth ℓ1 penalty.
//!
//! Every reduction here walks indices in ascending order so results are
//! bit-reproducible regardless of how callers schedule work.

use std::f64::consts::LN_2;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Default magnitude below which a parameter counts as zero.
pub const DEFAULT_EPS_ZERO: f64 = 1e-3;

/// Dense model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector must be non-empty"));
        }
        let v = ParamVector(values);
        v.ensure_finite("constructor input")?;
        Ok(v)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter dimension must be positive");
        ParamVector(vec![0.0; dim])
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new((0..dim).map(f).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some(i) => Err(Error::invalid(format!(
                "{what}: entry {i} is not finite ({})",
                self.0[i]
            ))),
        }
    }

    pub fn ensure_dim(&self, dim: usize) -> Result<()> {
        check_dim(dim, self.dim())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// `self += a * x`
    pub(crate) fn axpy(&mut self, a: f64, x: &ParamVector) {
        debug_assert_eq!(self.dim(), x.dim());
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += a * v;
        }
    }

    pub(crate) fn scale(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Smoothing level of the log-cosh penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothL1Config {
    pub rho: f64,
}

impl SmoothL1Config {
    pub fn new(rho: f64) -> Result<Self> {
        if rho > 0.0 && rho.is_finite() {
            Ok(Self { rho })
        } else {
            Err(Error::invalid(format!("rho must be positive, got {rho}")))
        }
    }
}

/// `log(cosh(z))` without overflow: `|z| + log1p(exp(-2|z|)) - ln 2`.
#[inline]
pub fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// `rho * sum_n log cosh(x_n / rho)`.
pub fn log_cosh_penalty(x: &ParamVector, cfg: SmoothL1Config) -> Result<f64> {
    x.ensure_finite("log_cosh_penalty")?;
    Ok(penalty_unchecked(x.as_slice(), cfg.rho))
}

pub(crate) fn penalty_unchecked(x: &[f64], rho: f64) -> f64 {
    rho * x.iter().map(|&v| log_cosh(v / rho)).sum::<f64>()
}

/// Elementwise `tanh(x_n / rho)`, the gradient of [`log_cosh_penalty`].
pub fn log_cosh_grad(x: &ParamVector, cfg: SmoothL1Config) -> Result<ParamVector> {
    x.ensure_finite("log_cosh_grad")?;
    let mut out = vec![0.0; x.dim()];
    add_penalty_grad(&mut out, x.as_slice(), 1.0, cfg.rho);
    Ok(ParamVector(out))
}

/// `out += gamma * tanh(x / rho)`; a no-op when `gamma == 0`.
pub(crate) fn add_penalty_grad(out: &mut [f64], x: &[f64], gamma: f64, rho: f64) {
    if gamma == 0.0 {
        return;
    }
    let inv = 1.0 / rho;
    for (o, &v) in out.iter_mut().zip(x) {
        *o += gamma * (v * inv).tanh();
    }
}

/// `a * x + b * y`.
pub fn affine_combine(a: f64, x: &ParamVector, b: f64, y: &ParamVector) -> Result<ParamVector> {
    check_dim(x.dim(), y.dim())?;
    let out = ParamVector(
        x.0.iter()
            .zip(&y.0)
            .map(|(xv, yv)| a * xv + b * yv)
            .collect(),
    );
    out.ensure_finite("affine_combine")?;
    Ok(out)
}

/// Count of entries with `|x_n| >= eps_zero` and that count as a fraction of `dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sparsity {
    pub nonzero: usize,
    pub ratio: f64,
}

pub fn sparsity_ratio(x: &[f64], eps_zero: f64) -> Result<Sparsity> {
    if x.is_empty() {
        return Err(Error::invalid("sparsity of an empty vector"));
    }
    if !(eps_zero > 0.0) {
        return Err(Error::invalid(format!("eps_zero must be positive, got {eps_zero}")));
    }
    let nonzero = x.iter().filter(|v| v.abs() >= eps_zero).count();
    Ok(Sparsity {
        nonzero,
        ratio: nonzero as f64 / x.len() as f64,
    })
}

/// Index-ordered mean of equally sized vectors.
pub(crate) fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a ParamVector>) -> ParamVector {
    let mut iter = vectors.into_iter();
    let first = iter.next().expect("mean of zero vectors");
    let mut iter = iter.peekable();
    if iter.peek().is_none() {
        return first.clone();
    }
    let mut acc = vec![0.0; first.dim()];
    let mut count = 0usize;
    for v in std::iter::once(first).chain(iter) {
        debug_assert_eq!(v.dim(), acc.len());
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    for a in &mut acc {
        *a *= inv;
    }
    ParamVector(acc)
}
