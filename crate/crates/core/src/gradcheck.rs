//! Finite-difference check of the analytic MLP gradient.
//!
//! The reference loss is an independent forward pass evaluated in
//! double-double arithmetic (about 32 significant digits), so the central
//! difference `(f(w + h e_i) - f(w - h e_i)) / 2h` carries no visible
//! round-off at `h = 1e-5` and only the truncation term remains.

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{init_params, loss_and_grad, Activation, Batch, Matrix, MlpSpec};

/// An unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl DoubleDouble {
    pub const ZERO: Self = DoubleDouble { hi: 0.0, lo: 0.0 };
    pub const ONE: Self = DoubleDouble { hi: 1.0, lo: 0.0 };

    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        DoubleDouble { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Exact multiplication by `2^k`.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        DoubleDouble {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn max(self, other: Self) -> Self {
        if (self.hi, self.lo) >= (other.hi, other.lo) {
            self
        } else {
            other
        }
    }

    /// `(p, k)` with `exp(self) = (1 + p) * 2^k`; `k = 0` whenever `|self| < ln2 / 2`.
    fn exp_parts(self) -> (Self, i32) {
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * k).ldexp(-10);
        // Taylor series of expm1 on |r| < 3.4e-4.
        let mut p = r;
        let mut term = r;
        for n in 2..30 {
            term = term * r / n as f64;
            p = p + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        // expm1(2x) = expm1(x) * (2 + expm1(x)).
        for _ in 0..10 {
            p = p * 2.0 + p * p;
        }
        (p, k as i32)
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return DoubleDouble::new(f64::INFINITY, 0.0);
        }
        if self.hi < -745.0 {
            return Self::ZERO;
        }
        let (p, k) = self.exp_parts();
        (p + 1.0).ldexp(k)
    }

    fn expm1(self) -> Self {
        if self.hi < -745.0 {
            return -Self::ONE;
        }
        match self.exp_parts() {
            (p, 0) => p,
            (p, k) => (p + 1.0).ldexp(k) - 1.0,
        }
    }

    /// Natural log of a positive value, by Newton iteration on `exp`.
    pub fn ln(self) -> Self {
        // Split off the binary exponent so exp(-y) stays in the normal range.
        let e = self.hi.log2().floor() as i32;
        let m = self.ldexp(-e);
        let mut y = DoubleDouble::from(m.hi.ln());
        for _ in 0..2 {
            y = y + m * (-y).exp() - 1.0;
        }
        y + LN2 * e as f64
    }

    pub fn tanh(self) -> Self {
        if self.hi == 0.0 {
            return Self::ZERO;
        }
        let t = self.abs();
        // tanh(t) = -expm1(-2t) / (2 + expm1(-2t)), free of cancellation.
        let e = (t * -2.0).expm1();
        let r = -e / (e + 2.0);
        if self.hi < 0.0 {
            -r
        } else {
            r
        }
    }
}

impl From<f64> for DoubleDouble {
    fn from(v: f64) -> Self {
        DoubleDouble { hi: v, lo: 0.0 }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        DoubleDouble { hi, lo }
    }
}

impl Add<f64> for DoubleDouble {
    type Output = Self;
    fn add(self, b: f64) -> Self {
        self + DoubleDouble::from(b)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + -b
    }
}

impl Sub<f64> for DoubleDouble {
    type Output = Self;
    fn sub(self, b: f64) -> Self {
        self + DoubleDouble::from(-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (hi, lo) = quick_two_sum(p, e);
        DoubleDouble { hi, lo }
    }
}

impl Mul<f64> for DoubleDouble {
    type Output = Self;
    fn mul(self, b: f64) -> Self {
        self * DoubleDouble::from(b)
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DoubleDouble { hi, lo } + q3
    }
}

impl Div<f64> for DoubleDouble {
    type Output = Self;
    fn div(self, b: f64) -> Self {
        self / DoubleDouble::from(b)
    }
}

/// Mean softmax cross-entropy of an MLP, evaluated in double-double.
///
/// Reads the flat parameter vector layer by layer: a `fan_in x fan_out`
/// row-major weight block followed by `fan_out` biases; every layer but the
/// last applies the activation.
pub fn reference_loss(
    widths: &[usize],
    activation: Activation,
    w: &[DoubleDouble],
    inputs: &Matrix,
    labels: &[usize],
) -> DoubleDouble {
    let n_layers = widths.len() - 1;
    let mut total = DoubleDouble::ZERO;
    for (r, &label) in labels.iter().enumerate() {
        let mut a: Vec<DoubleDouble> = inputs.row(r).iter().map(|&x| x.into()).collect();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bias = offset + fan_in * fan_out;
            let mut z: Vec<DoubleDouble> = w[bias..bias + fan_out].to_vec();
            for (i, &ai) in a.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = *zj + ai * w[offset + i * fan_out + j];
                }
            }
            if l + 1 < n_layers {
                for zj in z.iter_mut() {
                    *zj = match activation {
                        Activation::Relu => zj.max(DoubleDouble::ZERO),
                        Activation::Tanh => zj.tanh(),
                    };
                }
            }
            a = z;
            offset = bias + fan_out;
        }
        let m = a.iter().copied().fold(a[0], DoubleDouble::max);
        let sum = a.iter().fold(DoubleDouble::ZERO, |s, &z| s + (z - m).exp());
        total = total + sum.ln() + m - a[label];
    }
    total / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    /// Relative bound for components larger than `small`.
    pub rel: f64,
    /// Absolute bound for components at most `small` in magnitude.
    pub abs: f64,
    pub small: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-5,
            rel: 1e-6,
            abs: 1e-8,
            small: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub widths: Vec<usize>,
    pub batch_size: usize,
    /// Largest relative error over components above the small threshold.
    pub max_rel_err: f64,
    /// Largest absolute error over near-zero components.
    pub max_abs_err: f64,
    pub failures: Vec<usize>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Numeric gradient of [`reference_loss`] by central differences.
pub fn numeric_gradient(spec: &MlpSpec, w: &[f64], batch: &Batch, step: f64) -> Vec<f64> {
    let mut wd: Vec<DoubleDouble> = w.iter().map(|&v| v.into()).collect();
    let loss = |wd: &[DoubleDouble]| {
        reference_loss(spec.widths(), spec.activation(), wd, &batch.inputs, &batch.labels)
    };
    (0..w.len())
        .map(|i| {
            let base = wd[i];
            wd[i] = base + step;
            let up = loss(&wd);
            wd[i] = base - step;
            let down = loss(&wd);
            wd[i] = base;
            ((up - down) / (2.0 * step)).to_f64()
        })
        .collect()
}

/// Scores `analytic` against `numeric` component by component.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: &Tolerance) -> (f64, f64, Vec<usize>) {
    let (mut max_rel, mut max_abs, mut failures) = (0.0f64, 0.0f64, Vec::new());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let ok = if scale > tol.small {
            let rel = diff / scale;
            max_rel = max_rel.max(rel);
            rel <= tol.rel
        } else {
            max_abs = max_abs.max(diff);
            diff <= tol.abs
        };
        if !ok {
            failures.push(i);
        }
    }
    (max_rel, max_abs, failures)
}

/// Compares the analytic gradient against the reference central difference.
pub fn check_case(spec: &MlpSpec, w: &[f64], batch: &Batch, tol: &Tolerance) -> Result<CaseReport> {
    let (_, analytic) = loss_and_grad(spec, w, batch)?;
    let numeric = numeric_gradient(spec, w, batch, tol.step);
    let (max_rel_err, max_abs_err, failures) = compare(&analytic, &numeric, tol);
    Ok(CaseReport {
        widths: spec.widths().to_vec(),
        batch_size: batch.len(),
        max_rel_err,
        max_abs_err,
        failures,
    })
}

/// A random small network, weight vector, and batch.
pub fn random_case(activation: Activation, seed: u64) -> Result<(MlpSpec, Vec<f64>, Batch)> {
    let mut r = rng::stream(seed, &[]);
    let depth = r.random_range(1..=3);
    let mut widths = vec![r.random_range(1..=6)];
    widths.extend((1..depth).map(|_| r.random_range(1..=6)));
    widths.push(r.random_range(2..=5));
    let spec = MlpSpec::new(widths, activation)?;
    let mut w = init_params(&spec, &mut r).into_vec();
    for layer in spec.layers() {
        for b in &mut w[layer.bias_offset..layer.end()] {
            *b = 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
        }
    }
    let n = r.random_range(1..=8);
    let data: Vec<f64> = (0..n * spec.input_dim())
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..spec.output_dim())).collect();
    let batch = Batch::new(Matrix::new(n, spec.input_dim(), data)?, labels)?;
    Ok((spec, w, batch))
}

/// Runs `n_cases` random cases derived from `seed`.
pub fn run_suite(n_cases: usize, seed: u64, activation: Activation, tol: &Tolerance) -> Result<Vec<CaseReport>> {
    if n_cases == 0 {
        return Err(Error::InvalidArgument("gradient check needs at least one case".into()));
    }
    (0..n_cases)
        .map(|c| {
            let (spec, w, batch) = random_case(activation, rng::derive_seed(seed, &[c as u64]))?;
            check_case(&spec, &w, &batch, tol)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: DoubleDouble, hi: f64, lo: f64, tol: f64) -> bool {
        ((a.hi - hi) + (a.lo - lo)).abs() <= tol
    }

    #[test]
    fn exp_of_one_matches_e() {
        let e = DoubleDouble::ONE.exp();
        assert!(close(e, std::f64::consts::E, 1.445_646_891_729_250_2e-16, 1e-30), "{e:?}");
    }

    #[test]
    fn ln_of_two() {
        assert!(close(DoubleDouble::from(2.0).ln(), LN2.hi, LN2.lo, 1e-31));
    }

    #[test]
    fn exp_ln_round_trip() {
        for &x in &[1e-300, 1e-8, 0.3, 1.0, 7.5, 1e10, 1e300] {
            let v = DoubleDouble::from(x);
            let back = v.ln().exp();
            let err = ((back - v) / v).to_f64().abs();
            // exp turns the absolute error of ln into relative error.
            assert!(err < 1e-31 * x.ln().abs().max(1.0), "{x}: {err:e}");
        }
    }

    #[test]
    fn tanh_identities() {
        for &x in &[1e-12, 0.01, 0.5, 2.0, 20.0] {
            let t = DoubleDouble::from(x).tanh();
            assert!((t.to_f64() - x.tanh()).abs() <= 2.0 * f64::EPSILON * x.tanh());
            // tanh(2x) = 2 tanh(x) / (1 + tanh(x)^2)
            let t2 = DoubleDouble::from(2.0 * x).tanh();
            let id = t * 2.0 / (t * t + 1.0);
            assert!(((t2 - id) / t2).to_f64().abs() < 1e-29, "{x}");
            assert_eq!(DoubleDouble::from(-x).tanh(), -t);
        }
    }

    #[test]
    fn division_is_exact_enough() {
        let q = DoubleDouble::ONE / 3.0;
        let back = q * 3.0 - 1.0;
        assert!(back.to_f64().abs() < 1e-32);
    }

    #[test]
    fn reference_loss_on_zero_weights_is_ln_k() {
        let spec = MlpSpec::new(vec![2, 4], Activation::Tanh).unwrap();
        let w = vec![DoubleDouble::ZERO; spec.param_count()];
        let x = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let l = reference_loss(spec.widths(), spec.activation(), &w, &x, &[3]);
        let ln4 = DoubleDouble::from(4.0).ln();
        assert!((l - ln4).to_f64().abs() < 1e-31);
    }

    #[test]
    fn reference_loss_agrees_with_f64_forward() {
        for seed in 0..10 {
            let (spec, w, batch) = random_case(Activation::Relu, seed).unwrap();
            let (l, _) = loss_and_grad(&spec, &w, &batch).unwrap();
            let wd: Vec<DoubleDouble> = w.iter().map(|&v| v.into()).collect();
            let r = reference_loss(spec.widths(), spec.activation(), &wd, &batch.inputs, &batch.labels);
            assert!((r.to_f64() - l).abs() <= 1e-13 * l.abs().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn single_softmax_layer_gradient() {
        // One linear layer: dL/db = softmax(z) - onehot(y).
        let spec = MlpSpec::new(vec![1, 2], Activation::Tanh).unwrap();
        let w = [0.0, 0.0, 0.5, -0.5];
        let batch = Batch::new(Matrix::from_rows(&[[0.0]]).unwrap(), vec![0]).unwrap();
        let g = numeric_gradient(&spec, &w, &batch, 1e-5);
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g[2] - (p0 - 1.0)).abs() < 1e-10);
        assert!((g[3] - (1.0 - p0)).abs() < 1e-10);
        assert_eq!(&g[..2], &[0.0, 0.0]);
    }

    #[test]
    fn small_tanh_suite_passes() {
        let reports = run_suite(10, 7, Activation::Tanh, &Tolerance::default()).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn compare_flags_each_regime() {
        let tol = Tolerance::default();
        let (_, _, f) = compare(&[1.0, 1e-9, 0.5], &[1.0 + 2e-6, 5e-9, 0.5], &tol);
        assert_eq!(f, vec![0]);
        let (_, _, f) = compare(&[1e-9, 1e-3], &[2.5e-8, 1e-3 * (1.0 + 5e-7)], &tol);
        assert_eq!(f, vec![0]);
    }

    #[test]
    fn a_perturbed_gradient_is_caught() {
        let (spec, w, batch) = random_case(Activation::Tanh, 3).unwrap();
        let (_, g) = loss_and_grad(&spec, &w, &batch).unwrap();
        let numeric = numeric_gradient(&spec, &w, &batch, 1e-5);
        let tol = Tolerance::default();
        assert!(compare(&g, &numeric, &tol).2.is_empty());
        let mut bad = g.into_vec();
        let i = bad.len() / 2;
        bad[i] += 1e-4;
        assert_eq!(compare(&bad, &numeric, &tol).2, vec![i]);
    }

    #[test]
    fn zero_cases_rejected() {
        assert!(run_suite(0, 0, Activation::Tanh, &Tolerance::default()).is_err());
    }
}
