//! Device-side local training: plain SGD and SGD with the side objective.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, NestedArchSpec};
use crate::rng;
use crate::tensor::{self, Batch, GradientVector, MlpSpec, WeightVector};

#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Weight of the side-objective gradient on complex devices.
    pub side_coeff: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            epochs: 5,
            eta: 0.1,
            batch_size: 50,
            clip_norm: Some(10.0),
            side_coeff: 1.0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("eta", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("clip_norm", "must be positive or `none`"));
            }
        }
        if !(self.side_coeff.is_finite() && self.side_coeff >= 0.0) {
            return Err(Error::config("side_coeff", "must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Number of SGD steps per epoch for a shard of `shard_len` points.
    pub fn steps_per_epoch(&self, shard_len: usize) -> usize {
        shard_len.div_ceil(self.batch_size)
    }
}

/// Gradients computed for one side-objective step, before combination.
#[derive(Debug)]
pub struct SideStep<'a> {
    pub batch: &'a Batch,
    /// Complex-path gradient over the full complex vector.
    pub full: &'a GradientVector,
    /// Embedded simple-model gradient, zero outside `M`.
    pub side: &'a GradientVector,
}

/// Weight vector returned by a device whose training diverged.
fn failed(len: usize) -> WeightVector {
    WeightVector::new(vec![f64::NAN; len])
}

/// Shared epoch/batch loop. `grad` returns the raw (unclipped) update
/// direction for the current weights and batch.
fn run_epochs<F>(
    w_start: &WeightVector,
    ds: &Dataset,
    shard: &[usize],
    cfg: &ClientConfig,
    seed: u64,
    mut grad: F,
) -> Result<WeightVector>
where
    F: FnMut(&[f64], &Batch) -> Result<GradientVector>,
{
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::InvalidArgument("empty shard".into()));
    }
    let mut w = w_start.clone();
    let mut order = shard.to_vec();
    for epoch in 0..cfg.epochs {
        order.copy_from_slice(shard);
        order.shuffle(&mut rng::stream(seed, &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let batch = ds.batch(&members)?;
            let g = match grad(&w, &batch) {
                Ok(g) => g,
                Err(Error::NonFinite(_)) => return Ok(failed(w.len())),
                Err(e) => return Err(e),
            };
            let g = match cfg.clip_norm {
                Some(max) => match tensor::clip_global_norm(&g, max) {
                    Ok(g) => g,
                    Err(Error::NonFinite(_)) => return Ok(failed(w.len())),
                    Err(e) => return Err(e),
                },
                None => g,
            };
            for (wi, gi) in w.iter_mut().zip(g.iter()) {
                *wi -= cfg.eta * gi;
            }
        }
    }
    Ok(w)
}

/// Plain local SGD on one MLP, starting from `w_start`.
///
/// `seed` identifies this device's stream for the round; epoch `e` shuffles
/// with the stream derived from `(seed, e)`. A diverged run yields a NaN
/// vector instead of an error.
pub fn client_training(
    w_start: &WeightVector,
    ds: &Dataset,
    shard: &[usize],
    spec: &MlpSpec,
    cfg: &ClientConfig,
    seed: u64,
) -> Result<WeightVector> {
    run_epochs(w_start, ds, shard, cfg, seed, |w, b| {
        Ok(tensor::loss_and_grad(spec, w, b)?.1)
    })
}

/// Local SGD of a complex device on its own forward path only.
pub fn client_training_complex(
    w_start: &WeightVector,
    ds: &Dataset,
    shard: &[usize],
    spec: &NestedArchSpec,
    cfg: &ClientConfig,
    seed: u64,
) -> Result<WeightVector> {
    run_epochs(w_start, ds, shard, cfg, seed, |w, b| {
        Ok(model::complex_loss_and_grad(spec, w, b)?.1)
    })
}

/// Local SGD on the complex loss plus `side_coeff` times the loss of the
/// embedded simple model, both evaluated on the same batch. Clipping applies
/// to the combined gradient.
pub fn client_training_side_obj(
    w_start: &WeightVector,
    ds: &Dataset,
    shard: &[usize],
    spec: &NestedArchSpec,
    cfg: &ClientConfig,
    seed: u64,
) -> Result<WeightVector> {
    client_training_side_obj_inspect(w_start, ds, shard, spec, cfg, seed, |_| {})
}

/// [`client_training_side_obj`] with a callback that sees both gradient
/// terms of every step.
pub fn client_training_side_obj_inspect<F>(
    w_start: &WeightVector,
    ds: &Dataset,
    shard: &[usize],
    spec: &NestedArchSpec,
    cfg: &ClientConfig,
    seed: u64,
    mut inspect: F,
) -> Result<WeightVector>
where
    F: FnMut(&SideStep<'_>),
{
    if w_start.len() != spec.complex_param_count() {
        return Err(Error::DimensionMismatch {
            what: "complex start weights",
            expected: spec.complex_param_count(),
            actual: w_start.len(),
        });
    }
    let lambda = cfg.side_coeff;
    run_epochs(w_start, ds, shard, cfg, seed, |w, b| {
        let (_, full) = model::complex_loss_and_grad(spec, w, b)?;
        let (_, side) = model::side_loss_and_grad(spec, w, b)?;
        inspect(&SideStep {
            batch: b,
            full: &full,
            side: &side,
        });
        let mut g = full.into_vec();
        for (gi, si) in g.iter_mut().zip(side.iter()) {
            *gi += lambda * si;
        }
        Ok(GradientVector::new(g))
    })
}
