//! Context distance: overlap ratio plus a position-alignment penalty.
//!
//! For contexts `a` and `b` with shared document set `S`:
//!
//! ```text
//! d(a, b) = 1 - |S| / max(|a|, |b|)
//!           + alpha * sum_{k in S} |pos_a(k) - pos_b(k)| / |S|
//! ```
//!
//! The overlap term dominates; `alpha` keeps the positional term a small
//! tie-breaker so that contexts sharing documents at similar positions sort
//! closer than contexts sharing the same number of documents at scattered
//! positions. With no shared documents the positional term is defined as 0
//! and the distance is exactly 1. Positions are 0-based retrieval indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Context;

/// Default positional weight: midpoint of the supported band.
pub const DEFAULT_ALPHA: f64 = 0.005;

/// Weight of the positional term in the context distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    pub alpha: f64,
}

impl DistanceParams {
    /// Builds params, enforcing the supported band `[0.001, 0.01]` in which
    /// the overlap count stays the dominant factor.
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.001..=0.01).contains(&alpha) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        Ok(DistanceParams { alpha })
    }

    /// Builds params without the band check, for explicit config overrides.
    pub fn unchecked(alpha: f64) -> Self {
        DistanceParams { alpha }
    }
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams {
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Distance between two retrieval contexts. Symmetric, 0 for identical
/// contexts, exactly 1 for disjoint ones.
pub fn context_distance(a: &Context, b: &Context, params: &DistanceParams) -> Result<f64> {
    if a.docs.is_empty() || b.docs.is_empty() {
        return Err(Error::EmptyContext);
    }
    let pos_a = a.positions();
    let mut shared = 0usize;
    let mut displacement = 0u64;
    for (pb, doc) in b.docs.iter().enumerate() {
        if let Some(pa) = pos_a.get(doc) {
            shared += 1;
            displacement += pa.abs_diff(pb) as u64;
        }
    }
    Ok(distance_from_parts(
        shared,
        displacement,
        a.docs.len().max(b.docs.len()),
        params.alpha,
    ))
}

/// Shared kernel for the distance formula, also used by index construction
/// which tracks cluster representatives outside `Context`.
pub(crate) fn distance_from_parts(
    shared: usize,
    displacement: u64,
    max_len: usize,
    alpha: f64,
) -> f64 {
    if shared == 0 {
        return 1.0;
    }
    let overlap = 1.0 - shared as f64 / max_len as f64;
    overlap + alpha * (displacement as f64 / shared as f64)
}

/// Symmetric pairwise distance matrix over a set of contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }
}

/// Computes all pairwise context distances. Requires at least two contexts;
/// the diagonal is 0 and the matrix is symmetric.
pub fn pairwise_distances(contexts: &[Context], params: &DistanceParams) -> Result<DistanceMatrix> {
    if contexts.len() < 2 {
        return Err(Error::TooFewContexts {
            expected: 2,
            got: contexts.len(),
        });
    }
    let n = contexts.len();
    let mut matrix = DistanceMatrix {
        n,
        values: vec![0.0; n * n],
    };
    for i in 0..n {
        for j in (i + 1)..n {
            let d = context_distance(&contexts[i], &contexts[j], params)?;
            matrix.set(i, j, d);
        }
    }
    Ok(matrix)
}
