//! Server-side model construction.
//!
//! Two rules are implemented:
//!
//! * **shared** (FedHeN and NoSide): the simple server model is the uniform
//!   mean over *all* surviving uploads, reading complex uploads through `M`.
//!   That mean is written into `M` of the complex server model, and the
//!   remaining coordinates `M'` are the mean over surviving complex uploads.
//! * **decoupled**: two independent FedAvg means, one per architecture.
//!
//! Sums always run in ascending device-id order so the result does not depend
//! on the order uploads arrive in. A group with no surviving uploads keeps
//! its previous server values.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{embed_into, project, IndexSet};
use crate::tensor::WeightVector;

#[derive(Clone, Debug, Default)]
pub struct RoundUploads {
    pub simple: Vec<(usize, WeightVector)>,
    pub complex: Vec<(usize, WeightVector)>,
    /// Devices excluded from this round's aggregation.
    pub failed: BTreeSet<usize>,
}

impl RoundUploads {
    fn validate(&self, simple_len: usize, complex_len: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (id, w) in &self.simple {
            if !seen.insert(*id) {
                return Err(Error::InvalidArgument(format!("duplicate upload from device {id}")));
            }
            check_len("simple upload", simple_len, w)?;
        }
        for (id, w) in &self.complex {
            if !seen.insert(*id) {
                return Err(Error::InvalidArgument(format!("duplicate upload from device {id}")));
            }
            check_len("complex upload", complex_len, w)?;
        }
        Ok(())
    }

    /// Surviving uploads of one group, sorted by device id.
    fn survivors<'a>(&'a self, group: &'a [(usize, WeightVector)]) -> Vec<(usize, &'a [f64])> {
        let mut out: Vec<_> = group
            .iter()
            .filter(|(id, _)| !self.failed.contains(id))
            .map(|(id, w)| (*id, w.as_slice()))
            .collect();
        out.sort_unstable_by_key(|(id, _)| *id);
        out
    }
}

fn check_len(what: &'static str, expected: usize, w: &[f64]) -> Result<()> {
    if w.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual: w.len(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub w_s: WeightVector,
    pub w_c: WeightVector,
    /// No upload survived; both models are the previous ones.
    pub stalled: bool,
}

/// Elementwise sum of `parts` in the given order, divided by their count.
fn mean(len: usize, parts: &[&[f64]]) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part.iter()) {
            *a += v;
        }
    }
    let n = parts.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

pub fn aggregate_shared(
    uploads: &RoundUploads,
    prev_ws: &WeightVector,
    prev_wc: &WeightVector,
    m: &IndexSet,
    m_prime: &IndexSet,
) -> Result<Aggregate> {
    uploads.validate(prev_ws.len(), prev_wc.len())?;
    if m.len() != prev_ws.len() || m.len() + m_prime.len() != prev_wc.len() {
        return Err(Error::InvalidArgument(
            "index sets do not partition the complex model".into(),
        ));
    }
    let simple = uploads.survivors(&uploads.simple);
    let complex = uploads.survivors(&uploads.complex);
    if simple.is_empty() && complex.is_empty() {
        return Ok(Aggregate {
            w_s: prev_ws.clone(),
            w_c: prev_wc.clone(),
            stalled: true,
        });
    }

    // Every surviving device contributes one simple-model vector.
    let projected: Vec<(usize, WeightVector)> = complex
        .iter()
        .map(|&(id, w)| Ok((id, project(w, m)?)))
        .collect::<Result<_>>()?;
    let mut contributions: Vec<(usize, &[f64])> = simple.clone();
    contributions.extend(projected.iter().map(|(id, w)| (*id, w.as_slice())));
    contributions.sort_unstable_by_key(|(id, _)| *id);
    let parts: Vec<&[f64]> = contributions.iter().map(|(_, w)| *w).collect();
    let w_s = mean(m.len(), &parts);

    let mut w_c = embed_into(prev_wc, m, &w_s)?;
    if !complex.is_empty() {
        let rest: Vec<WeightVector> = complex
            .iter()
            .map(|&(_, w)| project(w, m_prime))
            .collect::<Result<_>>()?;
        let parts: Vec<&[f64]> = rest.iter().map(|w| w.as_slice()).collect();
        let mean_rest = mean(m_prime.len(), &parts);
        w_c = embed_into(&w_c, m_prime, &mean_rest)?;
    }
    Ok(Aggregate {
        w_s: WeightVector::new(w_s),
        w_c,
        stalled: false,
    })
}

pub fn aggregate_decoupled(
    uploads: &RoundUploads,
    prev_ws: &WeightVector,
    prev_wc: &WeightVector,
) -> Result<Aggregate> {
    uploads.validate(prev_ws.len(), prev_wc.len())?;
    let simple = uploads.survivors(&uploads.simple);
    let complex = uploads.survivors(&uploads.complex);
    let group_mean = |prev: &WeightVector, group: &[(usize, &[f64])]| {
        if group.is_empty() {
            prev.clone()
        } else {
            let parts: Vec<&[f64]> = group.iter().map(|(_, w)| *w).collect();
            WeightVector::new(mean(prev.len(), &parts))
        }
    };
    Ok(Aggregate {
        w_s: group_mean(prev_ws, &simple),
        w_c: group_mean(prev_wc, &complex),
        stalled: simple.is_empty() && complex.is_empty(),
    })
}
