//! Dense multilayer perceptrons with hand-derived backpropagation.
//!
//! Everything here works on a flat parameter vector with a fixed layout:
//! for each layer in order, the weight matrix (`fan_in x fan_out`, row-major)
//! followed by the bias vector (`fan_out`). A layer maps `a -> a W + b`, and
//! every layer except the last is followed by the configured activation.
//!
//! The layout is load-bearing: index sets that carve a simple model out of a
//! complex one refer to positions in this vector.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

macro_rules! flat_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Default)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                $name(values)
            }

            pub fn zeros(len: usize) -> Self {
                $name(vec![0.0; len])
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn all_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn l2_norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                $name(values)
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }
    };
}

flat_vector!(
    /// Flat parameter vector of one architecture.
    WeightVector
);
flat_vector!(
    /// Gradient with the same layout as the weights it differentiates.
    GradientVector
);

/// Placement of one dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

/// Parameter count of a plain stack of dense layers with the given widths.
pub fn stack_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerShape>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let shape = LayerShape {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            };
            offset = shape.end();
            layers.push(shape);
        }
        Ok(MlpSpec {
            widths,
            activation,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.last().map_or(0, LayerShape::end)
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "weight vector",
                expected: self.param_count(),
                actual: w.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input features",
                expected: self.input_dim(),
                actual: inputs.cols(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                what: "batch labels",
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> WeightVector {
    let mut w = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for v in &mut w[layer.weight_offset..layer.bias_offset] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    WeightVector(w)
}

#[inline]
fn affine_into(out: &mut [f64], a_row: &[f64], w: &[f64], bias: &[f64], fan_out: usize) {
    out.copy_from_slice(bias);
    for (i, &x) in a_row.iter().enumerate() {
        let w_row = &w[i * fan_out..(i + 1) * fan_out];
        for (o, &wij) in out.iter_mut().zip(w_row) {
            *o += x * wij;
        }
    }
}

/// Pre-activations and activations of every layer, kept for backprop.
struct Trace {
    /// `pre[l]` is the pre-activation of layer `l` (batch x fan_out).
    pre: Vec<Vec<f64>>,
    /// `post[l]` is the activated output of layer `l`; absent for the last layer.
    post: Vec<Vec<f64>>,
}

fn forward_trace(spec: &MlpSpec, w: &[f64], inputs: &Matrix) -> Trace {
    let rows = inputs.rows();
    let n_layers = spec.layers().len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers.saturating_sub(1));
    for (l, layer) in spec.layers().iter().enumerate() {
        let prev: &[f64] = if l == 0 {
            inputs.as_slice()
        } else {
            &post[l - 1]
        };
        let weights = &w[layer.weight_offset..layer.bias_offset];
        let bias = &w[layer.bias_offset..layer.end()];
        let mut z = vec![0.0; rows * layer.fan_out];
        for r in 0..rows {
            affine_into(
                &mut z[r * layer.fan_out..(r + 1) * layer.fan_out],
                &prev[r * layer.fan_in..(r + 1) * layer.fan_in],
                weights,
                bias,
                layer.fan_out,
            );
        }
        if l + 1 < n_layers {
            let act = spec.activation();
            post.push(z.iter().map(|&v| act.apply(v)).collect());
        }
        pre.push(z);
    }
    Trace { pre, post }
}

pub fn forward_logits(spec: &MlpSpec, w: &[f64], inputs: &Matrix) -> Result<Matrix> {
    spec.check_weights(w)?;
    spec.check_inputs(inputs)?;
    let mut trace = forward_trace(spec, w, inputs);
    let logits = trace.pre.pop().expect("at least one layer");
    Matrix::new(inputs.rows(), spec.output_dim(), logits)
}

/// `ln(sum(exp(z)))`, shifted by the row max.
#[inline]
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.cols())?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let z = logits.row(r);
            log_sum_exp(z) - z[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy loss of the batch and its exact gradient.
pub fn loss_and_grad(spec: &MlpSpec, w: &[f64], batch: &Batch) -> Result<(f64, GradientVector)> {
    spec.check_weights(w)?;
    spec.check_inputs(&batch.inputs)?;
    check_labels(&batch.labels, spec.output_dim())?;
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("weights"));
    }

    let rows = batch.len();
    let inv_rows = 1.0 / rows as f64;
    let trace = forward_trace(spec, w, &batch.inputs);
    let layers = spec.layers();
    let n_out = spec.output_dim();

    // dL/dz for the output layer: (softmax - onehot) / batch.
    let logits = trace.pre.last().expect("at least one layer");
    let mut delta = vec![0.0; rows * n_out];
    let mut loss = 0.0;
    for r in 0..rows {
        let z = &logits[r * n_out..(r + 1) * n_out];
        let lse = log_sum_exp(z);
        let y = batch.labels[r];
        loss += lse - z[y];
        let d = &mut delta[r * n_out..(r + 1) * n_out];
        for (dj, &zj) in d.iter_mut().zip(z) {
            *dj = (zj - lse).exp() * inv_rows;
        }
        d[y] -= inv_rows;
    }
    loss *= inv_rows;

    let mut grad = vec![0.0; spec.param_count()];
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
        let prev: &[f64] = if l == 0 {
            batch.inputs.as_slice()
        } else {
            &trace.post[l - 1]
        };

        let (gw, gb) = grad[layer.weight_offset..layer.end()].split_at_mut(fan_in * fan_out);
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            let a = &prev[r * fan_in..(r + 1) * fan_in];
            for (i, &ai) in a.iter().enumerate() {
                let g_row = &mut gw[i * fan_out..(i + 1) * fan_out];
                for (g, &dj) in g_row.iter_mut().zip(d) {
                    *g += ai * dj;
                }
            }
            for (g, &dj) in gb.iter_mut().zip(d) {
                *g += dj;
            }
        }

        if l == 0 {
            break;
        }
        let weights = &w[layer.weight_offset..layer.bias_offset];
        let act = spec.activation();
        let z_prev = &trace.pre[l - 1];
        let a_prev = &trace.post[l - 1];
        let mut next = vec![0.0; rows * fan_in];
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for i in 0..fan_in {
                let w_row = &weights[i * fan_out..(i + 1) * fan_out];
                let back: f64 = w_row.iter().zip(d).map(|(&wij, &dj)| wij * dj).sum();
                let k = r * fan_in + i;
                next[k] = back * act.derivative(z_prev[k], a_prev[k]);
            }
        }
        delta = next;
    }

    Ok((loss, GradientVector(grad)))
}

/// Rescales `g` so its Euclidean norm does not exceed `max_norm`.
///
/// The output norm, recomputed the same way, is guaranteed `<= max_norm`,
/// which makes clipping bitwise idempotent.
pub fn clip_global_norm(g: &GradientVector, max_norm: f64) -> Result<GradientVector> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    if !g.all_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let norm = g.l2_norm();
    if norm <= max_norm {
        return Ok(g.clone());
    }
    let mut scale = max_norm / norm;
    loop {
        let clipped = GradientVector(g.iter().map(|v| v * scale).collect());
        if clipped.l2_norm() <= max_norm {
            return Ok(clipped);
        }
        scale = scale.next_down();
    }
}

pub fn sgd_update(w: &WeightVector, g: &GradientVector, eta: f64) -> Result<WeightVector> {
    if w.len() != g.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: w.len(),
            actual: g.len(),
        });
    }
    if eta.is_nan() || eta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be non-negative, got {eta}"
        )));
    }
    Ok(WeightVector(
        w.iter().zip(g.iter()).map(|(&wi, &gi)| wi - eta * gi).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(widths: &[usize], act: Activation) -> MlpSpec {
        MlpSpec::new(widths.to_vec(), act).unwrap()
    }

    #[test]
    fn init_zero_biases_and_count() {
        let s = spec(&[2, 3], Activation::Relu);
        let w = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(w.len(), 9);
        assert!(w[6..].iter().all(|&b| b == 0.0));
        let w2 = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(w, w2);

        let s = spec(&[4, 8, 3], Activation::Relu);
        assert_eq!(init_params(&s, &mut ChaCha8Rng::seed_from_u64(9)).len(), 67);
        assert_eq!(s.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn init_within_glorot_bound() {
        let s = spec(&[5, 7, 2], Activation::Relu);
        let w = init_params(&s, &mut ChaCha8Rng::seed_from_u64(3));
        for layer in s.layers() {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(w[layer.weight_offset..layer.bias_offset]
                .iter()
                .all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let s = spec(&[3, 4, 2], Activation::Tanh);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.3, 9.0]]).unwrap();
        let out = forward_logits(&s, &vec![0.0; s.param_count()], &x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let s = spec(&[2, 2], Activation::Relu);
        let w = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let x = Matrix::from_rows(&[[3.0, -1.0]]).unwrap();
        assert_eq!(forward_logits(&s, &w, &x).unwrap().row(0), &[3.0, -1.0]);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let s = spec(&[2, 2], Activation::Relu);
        let x = Matrix::from_rows(&[[3.0, -1.0, 2.0]]).unwrap();
        assert!(matches!(
            forward_logits(&s, &[0.0; 6], &x),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(forward_logits(&s, &[0.0; 5], &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn uniform_softmax_loss_is_ln2() {
        let s = spec(&[3, 2], Activation::Relu);
        let batch = Batch::new(
            Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let (loss, _) = loss_and_grad(&s, &[0.0; 8], &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grad() {
        let s = spec(&[3, 4, 3], Activation::Tanh);
        let w = init_params(&s, &mut ChaCha8Rng::seed_from_u64(5));
        let rows = [[0.1, -0.7, 0.3], [0.9, 0.2, -0.4]];
        let b1 = Batch::new(Matrix::from_rows(&rows).unwrap(), vec![2, 0]).unwrap();
        let doubled = [rows[0], rows[1], rows[0], rows[1]];
        let b2 = Batch::new(Matrix::from_rows(&doubled).unwrap(), vec![2, 0, 2, 0]).unwrap();
        let (l1, g1) = loss_and_grad(&s, &w, &b1).unwrap();
        let (l2, g2) = loss_and_grad(&s, &w, &b2).unwrap();
        assert!((l1 - l2).abs() <= 1e-15 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn loss_rejects_non_finite_weights_and_bad_labels() {
        let s = spec(&[1, 2], Activation::Relu);
        let batch = Batch::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![1]).unwrap();
        let w = [f64::NAN, 0.0, 0.0, 0.0];
        assert!(matches!(
            loss_and_grad(&s, &w, &batch),
            Err(Error::NonFinite(_))
        ));
        let bad = Batch::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![2]).unwrap();
        assert!(loss_and_grad(&s, &[0.0; 4], &bad).is_err());
    }

    #[test]
    fn clip_examples() {
        let g = GradientVector::new(vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&g, 10.0).unwrap(), g);
        let g = GradientVector::new(vec![30.0, 40.0]);
        assert_eq!(clip_global_norm(&g, 10.0).unwrap().as_slice(), &[6.0, 8.0]);
        let z = GradientVector::zeros(5);
        assert_eq!(clip_global_norm(&z, 0.5).unwrap(), z);
        assert!(clip_global_norm(&GradientVector::new(vec![f64::INFINITY]), 1.0).is_err());
        assert!(clip_global_norm(&z, 0.0).is_err());
    }

    #[test]
    fn sgd_examples() {
        let w = WeightVector::new(vec![1.0, 1.0]);
        let out = sgd_update(&w, &GradientVector::zeros(2), 0.1).unwrap();
        assert_eq!(out, w);
        let w = WeightVector::new(vec![1.0, 2.0]);
        let g = GradientVector::new(vec![10.0, -10.0]);
        assert_eq!(sgd_update(&w, &g, 0.1).unwrap().as_slice(), &[0.0, 3.0]);
        assert!(sgd_update(&w, &GradientVector::zeros(3), 0.1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn ulp_distance(a: f64, b: f64) -> u64 {
            let (a, b) = (a.to_bits() as i64, b.to_bits() as i64);
            (a - b).unsigned_abs()
        }

        proptest! {
            #[test]
            fn clip_is_idempotent(g in prop::collection::vec(-1e3f64..1e3, 1..40), m in 1e-3f64..50.0) {
                let g = GradientVector::new(g);
                let once = clip_global_norm(&g, m).unwrap();
                prop_assert!(once.l2_norm() <= m);
                let twice = clip_global_norm(&once, m).unwrap();
                prop_assert_eq!(
                    once.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    twice.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }

            #[test]
            fn sgd_inverse_within_one_ulp(
                pairs in prop::collection::vec((-10f64..10.0, -10f64..10.0), 1..30),
                eta in 1e-3f64..1.0,
            ) {
                let w = WeightVector::new(pairs.iter().map(|p| p.0).collect());
                let g = GradientVector::new(pairs.iter().map(|p| p.1).collect());
                let neg = GradientVector::new(g.iter().map(|v| -v).collect());
                let back = sgd_update(&sgd_update(&w, &g, eta).unwrap(), &neg, eta).unwrap();
                for ((a, b), gi) in w.iter().zip(back.iter()).zip(g.iter()) {
                    // One ulp of the larger operand of the intermediate subtraction.
                    let scale = a.abs().max((eta * gi).abs());
                    prop_assert!(ulp_distance(*a, *b) <= 1 || (a - b).abs() <= scale * f64::EPSILON);
                }
            }

            #[test]
            fn loss_is_non_negative(seed in 0u64..500, rows in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = MlpSpec::new(vec![3, 5, 4], Activation::Relu).unwrap();
                let w: Vec<f64> = (0..s.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let x: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
                let b = Batch::new(Matrix::new(rows, 3, x).unwrap(), y).unwrap();
                let (l, _) = loss_and_grad(&s, &w, &b).unwrap();
                prop_assert!(l >= 0.0);
            }
        }
    }
}
