//! Nested simple/complex architecture pairs.
//!
//! The complex parameter vector is laid out as four consecutive blocks:
//!
//! ```text
//! [ trunk | exit head | extension | complex head ]
//! ```
//!
//! The simple model is `trunk + exit head`, so its parameters are exactly the
//! coordinates in the index set `M` (the first two blocks). The complex
//! model's own forward path is `trunk + extension + complex head`; the exit
//! head is an auxiliary branch that only the side objective and simple-model
//! evaluation ever touch. When both the extension and the complex head are
//! empty the two architectures coincide and `M` covers everything.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    self, stack_param_count, Activation, Batch, GradientVector, Matrix, MlpSpec, WeightVector,
};

/// Strictly increasing indices into a complex weight vector.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(
                "index set must be strictly increasing".into(),
            ));
        }
        Ok(IndexSet(indices))
    }

    pub fn from_range(range: Range<usize>) -> Self {
        IndexSet(range.collect())
    }

    /// Union of disjoint ranges given in increasing order.
    pub fn from_ranges(ranges: &[Range<usize>]) -> Result<Self> {
        IndexSet::new(ranges.iter().cloned().flatten().collect())
    }

    /// Indices in `0..len` that are not in `self`.
    pub fn complement(&self, len: usize) -> IndexSet {
        let mut out = Vec::with_capacity(len.saturating_sub(self.0.len()));
        let mut it = self.0.iter().peekable();
        for i in 0..len {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        IndexSet(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    fn check_bound(&self, len: usize) -> Result<()> {
        match self.0.last() {
            Some(&max) if max >= len => Err(Error::IndexOutOfRange { index: max, len }),
            _ => Ok(()),
        }
    }
}

/// A complex architecture with an embedded simple architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NestedArchSpec {
    trunk: Vec<usize>,
    exit_head: Vec<usize>,
    extension: Vec<usize>,
    complex_head: Vec<usize>,
    n_classes: usize,
    activation: Activation,

    simple: MlpSpec,
    complex_path: MlpSpec,
    /// `[trunk | exit | extension | complex head]` block boundaries.
    blocks: [Range<usize>; 4],
}

fn check_chain(name: &str, widths: &[usize], from: usize) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "{name} needs at least two widths, got {widths:?}"
        )));
    }
    if widths[0] != from {
        return Err(Error::InvalidSpec(format!(
            "{name} starts at width {} but its input has width {from}",
            widths[0]
        )));
    }
    Ok(())
}

fn chain(parts: &[&[usize]]) -> Vec<usize> {
    let mut out = parts[0].to_vec();
    for p in &parts[1..] {
        out.extend_from_slice(&p[1..]);
    }
    out
}

impl NestedArchSpec {
    pub fn new(
        trunk: Vec<usize>,
        exit_head: Vec<usize>,
        extension: Vec<usize>,
        complex_head: Vec<usize>,
        n_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidSpec("n_classes must be positive".into()));
        }
        if trunk.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "trunk needs at least two widths, got {trunk:?}"
            )));
        }
        let trunk_out = *trunk.last().expect("checked");
        check_chain("exit head", &exit_head, trunk_out)?;
        if *exit_head.last().expect("checked") != n_classes {
            return Err(Error::InvalidSpec(format!(
                "exit head must end in {n_classes} classes, got {exit_head:?}"
            )));
        }

        let complex_widths = match (extension.is_empty(), complex_head.is_empty()) {
            (true, true) => chain(&[&trunk, &exit_head]),
            (_, true) => {
                return Err(Error::InvalidSpec(
                    "an extension requires a complex head".into(),
                ))
            }
            (ext_empty, false) => {
                let head_in = if ext_empty {
                    trunk_out
                } else {
                    check_chain("extension", &extension, trunk_out)?;
                    *extension.last().expect("checked")
                };
                check_chain("complex head", &complex_head, head_in)?;
                if *complex_head.last().expect("checked") != n_classes {
                    return Err(Error::InvalidSpec(format!(
                        "complex head must end in {n_classes} classes, got {complex_head:?}"
                    )));
                }
                if ext_empty {
                    chain(&[&trunk, &complex_head])
                } else {
                    chain(&[&trunk, &extension, &complex_head])
                }
            }
        };

        let sizes = [
            stack_param_count(&trunk),
            stack_param_count(&exit_head),
            stack_param_count(&extension),
            stack_param_count(&complex_head),
        ];
        let mut start = 0;
        let blocks = sizes.map(|n| {
            let r = start..start + n;
            start += n;
            r
        });

        let simple = MlpSpec::new(chain(&[&trunk, &exit_head]), activation)?;
        let complex_path = MlpSpec::new(complex_widths, activation)?;
        Ok(NestedArchSpec {
            trunk,
            exit_head,
            extension,
            complex_head,
            n_classes,
            activation,
            simple,
            complex_path,
            blocks,
        })
    }

    pub fn trunk(&self) -> &[usize] {
        &self.trunk
    }

    pub fn exit_head(&self) -> &[usize] {
        &self.exit_head
    }

    pub fn extension(&self) -> &[usize] {
        &self.extension
    }

    pub fn complex_head(&self) -> &[usize] {
        &self.complex_head
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0]
    }

    /// The simple model as a standalone MLP (trunk followed by the exit head).
    pub fn simple_spec(&self) -> &MlpSpec {
        &self.simple
    }

    /// The complex model's own forward path as a standalone MLP.
    pub fn complex_path_spec(&self) -> &MlpSpec {
        &self.complex_path
    }

    pub fn trunk_param_count(&self) -> usize {
        self.blocks[0].end
    }

    pub fn simple_param_count(&self) -> usize {
        self.blocks[1].end
    }

    pub fn complex_param_count(&self) -> usize {
        self.blocks[3].end
    }

    /// Whether simple and complex architectures coincide.
    pub fn is_degenerate(&self) -> bool {
        self.extension.is_empty() && self.complex_head.is_empty()
    }

    /// Coordinates of the complex vector used by the complex forward path,
    /// in the order [`Self::complex_path_spec`] expects them.
    pub fn complex_path_indices(&self) -> IndexSet {
        if self.is_degenerate() {
            IndexSet::from_range(0..self.complex_param_count())
        } else {
            let [trunk, _, ext, head] = self.blocks.clone();
            IndexSet::from_ranges(&[trunk, ext, head]).expect("blocks are ordered")
        }
    }

    /// Glorot-initialized complex weights.
    pub fn init_complex<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector {
        let mut w = tensor::init_params(&self.simple, rng).into_vec();
        if !self.is_degenerate() {
            let rest = chain(&[&self.extension_or_trunk_out(), &self.complex_head]);
            let rest = MlpSpec::new(rest, self.activation).expect("validated");
            w.extend(tensor::init_params(&rest, rng).into_vec());
        }
        WeightVector::new(w)
    }

    fn extension_or_trunk_out(&self) -> Vec<usize> {
        if self.extension.is_empty() {
            vec![*self.trunk.last().expect("validated")]
        } else {
            self.extension.clone()
        }
    }
}

/// Splits the complex index range into `M` (simple model) and its complement.
pub fn build_index_map(spec: &NestedArchSpec) -> (IndexSet, IndexSet) {
    let m = IndexSet::from_range(0..spec.simple_param_count());
    let m_prime = m.complement(spec.complex_param_count());
    (m, m_prime)
}

/// Gathers `w_c[M]` in index order.
pub fn project(w_c: &[f64], m: &IndexSet) -> Result<WeightVector> {
    m.check_bound(w_c.len())?;
    Ok(WeightVector::new(m.as_slice().iter().map(|&i| w_c[i]).collect()))
}

/// Returns `w_c` with the coordinates in `M` overwritten by `w_s`.
pub fn embed_into(w_c: &[f64], m: &IndexSet, w_s: &[f64]) -> Result<WeightVector> {
    if w_s.len() != m.len() {
        return Err(Error::DimensionMismatch {
            what: "embedded vector",
            expected: m.len(),
            actual: w_s.len(),
        });
    }
    m.check_bound(w_c.len())?;
    let mut out = w_c.to_vec();
    for (&i, &v) in m.as_slice().iter().zip(w_s) {
        out[i] = v;
    }
    Ok(WeightVector::new(out))
}

/// Full-length vector holding `values` on `M` and zeros elsewhere.
pub fn scatter(values: &[f64], m: &IndexSet, len: usize) -> Result<GradientVector> {
    let zeros = vec![0.0; len];
    Ok(GradientVector::new(embed_into(&zeros, m, values)?.into_vec()))
}

fn check_complex(spec: &NestedArchSpec, w_c: &[f64]) -> Result<()> {
    if w_c.len() != spec.complex_param_count() {
        return Err(Error::DimensionMismatch {
            what: "complex weight vector",
            expected: spec.complex_param_count(),
            actual: w_c.len(),
        });
    }
    Ok(())
}

/// Logits of the embedded simple model read out of complex weights.
pub fn simple_forward(spec: &NestedArchSpec, w_c: &[f64], inputs: &Matrix) -> Result<Matrix> {
    check_complex(spec, w_c)?;
    // M is the leading prefix of the layout.
    tensor::forward_logits(spec.simple_spec(), &w_c[..spec.simple_param_count()], inputs)
}

/// Logits of the complex model's own forward path.
pub fn complex_forward(spec: &NestedArchSpec, w_c: &[f64], inputs: &Matrix) -> Result<Matrix> {
    check_complex(spec, w_c)?;
    let path = project(w_c, &spec.complex_path_indices())?;
    tensor::forward_logits(spec.complex_path_spec(), &path, inputs)
}

/// Complex-path loss and its gradient over the full complex vector (zero on
/// the exit head).
pub fn complex_loss_and_grad(
    spec: &NestedArchSpec,
    w_c: &[f64],
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    check_complex(spec, w_c)?;
    let idx = spec.complex_path_indices();
    let path = project(w_c, &idx)?;
    let (loss, g) = tensor::loss_and_grad(spec.complex_path_spec(), &path, batch)?;
    Ok((loss, scatter(&g, &idx, w_c.len())?))
}

/// Loss of the embedded simple model and its gradient scattered into a
/// full-length vector with zeros on `M'`.
pub fn side_loss_and_grad(
    spec: &NestedArchSpec,
    w_c: &[f64],
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    check_complex(spec, w_c)?;
    let n = spec.simple_param_count();
    let (loss, g) = tensor::loss_and_grad(spec.simple_spec(), &w_c[..n], batch)?;
    let mut full = g.into_vec();
    full.resize(w_c.len(), 0.0);
    Ok((loss, GradientVector::new(full)))
}

/// `||w_s - w_c[M]||^2`.
pub fn constraint_residual(w_s: &[f64], w_c: &[f64], m: &IndexSet) -> Result<f64> {
    if w_s.len() != m.len() {
        return Err(Error::DimensionMismatch {
            what: "simple vector",
            expected: m.len(),
            actual: w_s.len(),
        });
    }
    let proj = project(w_c, m)?;
    Ok(w_s
        .iter()
        .zip(proj.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
