//! Differentiable subset sampling.
//!
//! Relaxed m-hot masks are built L2X-style: m independent concrete
//! (Gumbel-softmax) samples over the d patch logits, combined by entrywise
//! maximum. Evaluation-time selection is deterministic top-m instead.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::patching::SubsetMask;

const UNIFORM_EPS: f64 = 1e-10;

/// `(m, d)` standard-Gumbel draws, one row per concrete sample.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Concrete-relaxation temperature, > 0.
    pub temperature: f64,
    /// Subset size m, 1 <= m <= d.
    pub m: usize,
}

impl SamplerConfig {
    pub fn new(temperature: f64, m: usize) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::contract(format!(
                "sampler temperature must be positive, got {temperature}"
            )));
        }
        if m == 0 {
            return Err(Error::contract("sampler subset size m must be >= 1"));
        }
        Ok(SamplerConfig { temperature, m })
    }
}

/// Draw `(m, d)` standard-Gumbel noise as `-ln(-ln(u))` with `u` clamped to
/// `(1e-10, 1 - 1e-10)` so no entry is infinite.
pub fn sample_gumbel(m: usize, d: usize, rng: &mut impl Rng) -> GumbelNoise {
    let mut values = Array2::zeros((m, d));
    for v in values.iter_mut() {
        let u: f64 = rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
        *v = -(-u.ln()).ln();
    }
    GumbelNoise { values }
}

/// One relaxed m-hot draw with everything needed to backpropagate through it.
#[derive(Debug, Clone)]
pub struct RelaxedSample {
    /// Entrywise max over the m softmax rows; entries in (0, 1).
    pub mask: Array1<f64>,
    rows: Array2<f64>,
    winners: Vec<usize>,
    temperature: f64,
}

impl RelaxedSample {
    /// The m softmax rows the mask was combined from. Each row sums to 1.
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_mask(self) -> Result<SubsetMask> {
        SubsetMask::relaxed(self.mask.to_vec())
    }

    /// Pull a loss gradient on the mask back to a gradient on the logits,
    /// holding the noise fixed.
    pub fn backward(&self, d_mask: ArrayView1<'_, f64>) -> Array1<f64> {
        let (m, d) = self.rows.dim();
        debug_assert_eq!(d_mask.len(), d);
        let mut d_logits = Array1::zeros(d);
        for j in 0..m {
            let row = self.rows.row(j);
            // gradient reaches row j only at entries where it won the max
            let mut dot = 0.0;
            for i in 0..d {
                if self.winners[i] == j {
                    dot += d_mask[i] * row[i];
                }
            }
            for i in 0..d {
                let v = if self.winners[i] == j { d_mask[i] } else { 0.0 };
                d_logits[i] += row[i] * (v - dot) / self.temperature;
            }
        }
        d_logits
    }
}

/// Sample a relaxed m-hot mask: softmax each `(logits + noise_row) / tau`
/// and take the entrywise maximum over the m rows. Differentiable w.r.t.
/// the logits for fixed noise.
pub fn relaxed_mhot(
    logits: ArrayView1<'_, f64>,
    noise: &GumbelNoise,
    cfg: &SamplerConfig,
) -> Result<RelaxedSample> {
    let d = logits.len();
    let (noise_m, noise_d) = noise.values.dim();
    if cfg.m > d {
        return Err(Error::contract(format!(
            "subset size m={} exceeds patch count d={d}",
            cfg.m
        )));
    }
    if noise_m != cfg.m || noise_d != d {
        return Err(Error::contract(format!(
            "noise shape ({noise_m}, {noise_d}) does not match (m={}, d={d})",
            cfg.m
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("selector logits must be finite"));
    }

    let mut rows = Array2::zeros((cfg.m, d));
    for j in 0..cfg.m {
        let mut max_a = f64::NEG_INFINITY;
        for i in 0..d {
            let a = (logits[i] + noise.values[[j, i]]) / cfg.temperature;
            rows[[j, i]] = a;
            max_a = max_a.max(a);
        }
        let mut z = 0.0;
        for i in 0..d {
            let e = (rows[[j, i]] - max_a).exp();
            rows[[j, i]] = e;
            z += e;
        }
        for i in 0..d {
            rows[[j, i]] /= z;
        }
    }

    let mut mask = Array1::zeros(d);
    let mut winners = vec![0usize; d];
    for i in 0..d {
        let mut best = rows[[0, i]];
        let mut arg = 0;
        for j in 1..cfg.m {
            if rows[[j, i]] > best {
                best = rows[[j, i]];
                arg = j;
            }
        }
        mask[i] = best;
        winners[i] = arg;
    }

    Ok(RelaxedSample {
        mask,
        rows,
        winners,
        temperature: cfg.temperature,
    })
}

/// Uniformly random k-hot mask via partial Fisher-Yates: uniform over all
/// C(d, k) subsets.
pub fn random_k_hot(d: usize, k: usize, rng: &mut impl Rng) -> Result<SubsetMask> {
    if k > d {
        return Err(Error::contract(format!("cannot draw {k} of {d} patches")));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.random_range(i..d);
        idx.swap(i, j);
    }
    SubsetMask::from_indices(d, &idx[..k])
}

/// Deterministic hard top-m selection: exactly m ones at the m largest
/// scores, ties broken by lowest index.
pub fn hard_topm(scores: &[f64], m: usize) -> Result<SubsetMask> {
    let d = scores.len();
    if m > d {
        return Err(Error::contract(format!(
            "cannot select top {m} of {d} scores"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    SubsetMask::from_indices(d, &order[..m])
}
