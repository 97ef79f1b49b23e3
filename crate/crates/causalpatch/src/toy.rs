//! Synthetic end-to-end harness on small discrete joints.
//!
//! The selector pipeline is validated against the exact enumeration oracle
//! by training it on samples from a known joint distribution and checking
//! that it recovers the brute-force best subset. The black box here is the
//! joint's exact conditional, wrapped so that the pipeline's zero-masking
//! has a precise meaning: inputs are one-hot encoded per coordinate
//! (channel v at position i is `1` iff `x_i = v`), so a zeroed patch reads
//! as "coordinate unobserved" and the model marginalizes over it exactly.
//! Relaxed masks interpolate smoothly between conditioning and
//! marginalizing, which keeps the whole thing differentiable.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{Classifier, InputGradients};
use crate::data::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{best_subset_bruteforce, BestSubset, DiscreteJoint};
use crate::patching::PatchGrid;
use crate::selector::{train_selector, SelectorTrainConfig};

/// Horizontal pixels per coordinate in the toy encoding.
pub const COORD_SPACING: usize = 4;

/// Column of coordinate `i`'s value pixel.
pub const fn value_column(i: usize) -> usize {
    i * COORD_SPACING + 2
}

/// Exact-conditional classifier over a binary-feature joint.
///
/// Expects inputs of shape `(2 + d, 1, 4d)`: two one-hot value channels
/// plus the position-indicator channels, which it ignores. For a
/// per-coordinate weight
/// `w_i(v) = enc[v][i] + (1 - enc[0][i] - enc[1][i])` read at coordinate
/// `i`'s value pixel, prediction is
///
/// ```text
/// p(y | enc) = sum_x  prod_i w_i(x_i) * p(x, y)   /   (same, summed over y)
/// ```
///
/// One-hot columns condition on the coordinate, all-zero columns
/// marginalize it, and scaled one-hot columns (relaxed masks) blend the two.
#[derive(Debug, Clone)]
pub struct TabularBlackbox {
    joint: DiscreteJoint,
    /// (bits, p(x, y) per y) per joint state, precomputed.
    states: Vec<(Vec<usize>, Vec<f64>)>,
}

impl TabularBlackbox {
    pub fn new(joint: DiscreteJoint) -> Result<Self> {
        if joint.x_arities().iter().any(|&a| a != 2) {
            return Err(Error::contract(
                "tabular black box requires binary X variables",
            ));
        }
        let ya = joint.y_arity();
        let mut states: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        joint.for_each(|x, y, p| {
            if y == 0 {
                states.push((x.to_vec(), vec![0.0; ya]));
            }
            states.last_mut().expect("pushed at y=0").1[y] = p;
        });
        Ok(TabularBlackbox { joint, states })
    }

    pub fn joint(&self) -> &DiscreteJoint {
        &self.joint
    }

    pub fn d(&self) -> usize {
        self.joint.d()
    }

    fn check(&self, batch: &Array4<f32>) -> Result<()> {
        let s = batch.shape();
        if (s[1], s[2], s[3]) != self.input_shape() {
            return Err(Error::contract(format!(
                "batch shape ({}, {}, {}) does not match tabular input {:?}",
                s[1], s[2], s[3],
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// Forward pass for one sample in f64: returns `(probs, n, dd)` where
    /// `n[y]` is the unnormalized mass and `dd` the normalizer.
    fn forward_one(&self, enc: &Array4<f32>, i: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let d = self.d();
        let ya = self.joint.y_arity();
        let omega = |bits: &[usize], pos: usize| -> f64 {
            let col = value_column(pos);
            let e0 = f64::from(enc[[i, 0, 0, col]]);
            let e1 = f64::from(enc[[i, 1, 0, col]]);
            let ev = if bits[pos] == 0 { e0 } else { e1 };
            ev + (1.0 - e0 - e1)
        };
        let mut n = vec![0.0f64; ya];
        for (bits, ps) in &self.states {
            let mut w = 1.0f64;
            for pos in 0..d {
                w *= omega(bits, pos);
            }
            for y in 0..ya {
                n[y] += w * ps[y];
            }
        }
        let dd: f64 = n.iter().sum();
        let probs = n.iter().map(|&v| v / dd).collect();
        (probs, n, dd)
    }
}

impl Classifier for TabularBlackbox {
    fn num_classes(&self) -> usize {
        self.joint.y_arity()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (2 + self.d(), 1, COORD_SPACING * self.d())
    }

    fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        self.check(batch)?;
        let n = batch.shape()[0];
        let ya = self.num_classes();
        let mut out = Array2::zeros((n, ya));
        for i in 0..n {
            let (probs, _, dd) = self.forward_one(batch, i);
            if !(dd > 0.0) {
                return Err(Error::contract(
                    "tabular normalizer vanished; encoding is out of range",
                ));
            }
            for y in 0..ya {
                out[[i, y]] = probs[y] as f32;
            }
        }
        Ok(out)
    }
}

impl InputGradients for TabularBlackbox {
    fn predict_with_input_grad(
        &self,
        batch: &Array4<f32>,
        d_probs: &mut dyn FnMut(&Array2<f32>) -> Array2<f32>,
    ) -> Result<(Array2<f32>, Array4<f32>)> {
        let probs = self.predict_proba(batch)?;
        let dp = d_probs(&probs);
        let n = batch.shape()[0];
        let d = self.d();
        let ya = self.num_classes();
        let mut dx = Array4::zeros(batch.raw_dim());

        for i in 0..n {
            let (_, nmass, dd) = self.forward_one(batch, i);
            let omega_of = |bits: &[usize], pos: usize| -> f64 {
                let col = value_column(pos);
                let e0 = f64::from(batch[[i, 0, 0, col]]);
                let e1 = f64::from(batch[[i, 1, 0, col]]);
                let ev = if bits[pos] == 0 { e0 } else { e1 };
                ev + (1.0 - e0 - e1)
            };
            // dN[y][c][pos] accumulated over states
            let mut dn = vec![vec![[0.0f64; 2]; d]; ya];
            for (bits, ps) in &self.states {
                let omegas: Vec<f64> = (0..d).map(|pos| omega_of(bits, pos)).collect();
                // products of all omegas except one position
                let zeros = omegas.iter().filter(|&&w| w == 0.0).count();
                let nonzero_prod: f64 = omegas.iter().filter(|&&w| w != 0.0).product();
                for pos in 0..d {
                    let prod_except = match zeros {
                        0 => nonzero_prod / omegas[pos],
                        1 if omegas[pos] == 0.0 => nonzero_prod,
                        _ => 0.0,
                    };
                    for c in 0..2 {
                        // d omega(bits[pos]) / d enc[c][pos] = [bits[pos]==c] - 1
                        let factor = if bits[pos] == c { 0.0 } else { -1.0 };
                        if factor == 0.0 {
                            continue;
                        }
                        for y in 0..ya {
                            dn[y][pos][c] += prod_except * factor * ps[y];
                        }
                    }
                }
            }
            for pos in 0..d {
                for c in 0..2 {
                    let dd_d: f64 = (0..ya).map(|y| dn[y][pos][c]).sum();
                    let mut acc = 0.0f64;
                    for y in 0..ya {
                        let dp_y = f64::from(dp[[i, y]]);
                        if dp_y == 0.0 {
                            continue;
                        }
                        acc += dp_y * (dn[y][pos][c] * dd - nmass[y] * dd_d) / (dd * dd);
                    }
                    dx[[i, c, 0, value_column(pos)]] = acc as f32;
                }
            }
        }
        Ok((probs, dx))
    }

    fn logit_input_grad(&self, batch: &Array4<f32>, classes: &[usize]) -> Result<Array4<f32>> {
        // log-probability gradient; the tabular model has no pre-softmax
        // logits, so d log p_y / d enc serves as the saliency signal
        let n = batch.shape()[0];
        if classes.len() != n {
            return Err(Error::contract("one class per sample"));
        }
        let probs = self.predict_proba(batch)?;
        let mut dp = Array2::zeros(probs.raw_dim());
        for (i, &cls) in classes.iter().enumerate() {
            dp[[i, cls]] = 1.0 / probs[[i, cls]].max(1e-12);
        }
        let (_, dx) = self.predict_with_input_grad(batch, &mut |_| dp.clone())?;
        Ok(dx)
    }
}

/// Encode a binary assignment as a `(2 + d, 1, 4d)` image: coordinate `i`
/// occupies columns `4i..4i+4`, its value one-hot fills the block in
/// channels 0/1 (the black box reads the center column only), and channel
/// `2 + i` is 1 across the block (position indicator).
pub fn encode_bits(bits: &[usize]) -> Array3<f32> {
    let d = bits.len();
    let mut enc = Array3::zeros((2 + d, 1, COORD_SPACING * d));
    for (i, &b) in bits.iter().enumerate() {
        for off in 0..COORD_SPACING {
            enc[[b, 0, i * COORD_SPACING + off]] = 1.0;
            enc[[2 + i, 0, i * COORD_SPACING + off]] = 1.0;
        }
    }
    enc
}

/// The patch grid matching [`encode_bits`]: one 1x4 patch per coordinate.
pub fn toy_grid(d: usize) -> PatchGrid {
    PatchGrid::new((2 + d, 1, COORD_SPACING * d), (1, COORD_SPACING))
        .expect("spacing divides width")
}

/// Draw `(x, y)` pairs from the joint and encode them as a dataset.
pub fn sample_dataset(
    joint: &DiscreteJoint,
    n: usize,
    rng: &mut impl Rng,
    split: SplitTag,
) -> Result<LabeledDataset> {
    // cumulative distribution over all (x, y) cells
    let mut cells: Vec<(Vec<usize>, usize, f64)> = Vec::new();
    joint.for_each(|x, y, p| {
        if p > 0.0 {
            cells.push((x.to_vec(), y, p));
        }
    });
    let d = joint.d();
    let mut images = Array4::zeros((n, 2 + d, 1, COORD_SPACING * d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut u: f64 = rng.random();
        let mut chosen = cells.len() - 1;
        for (idx, cell) in cells.iter().enumerate() {
            u -= cell.2;
            if u <= 0.0 {
                chosen = idx;
                break;
            }
        }
        let (bits, y, _) = &cells[chosen];
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&encode_bits(bits));
        labels.push(*y);
    }
    let class_names = (0..joint.y_arity()).map(|y| y.to_string()).collect();
    LabeledDataset::new(images, labels, class_names, split)
}

/// Dense random joint: Dirichlet(1) over all `(x, y)` cells.
pub fn random_joint(d: usize, rng: &mut impl Rng) -> DiscreteJoint {
    let len = (1usize << d) * 2;
    let mut probs: Vec<f64> = (0..len)
        .map(|_| -rng.random::<f64>().max(1e-15).ln())
        .collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    let residual: f64 = 1.0 - probs.iter().sum::<f64>();
    probs[0] += residual;
    DiscreteJoint::new(vec![2; d], 2, probs).expect("valid by construction")
}

/// A joint with a planted informative pair: X uniform on {0,1}^d and
/// `p(y=1 | x) = sigmoid(a*s_i + b*s_j)` with `s = 2x - 1` and weights of
/// magnitude 1.5..2.5. The pair `{i, j}` is the unique CMI-best size-2
/// subset with a comfortable margin (roughly 0.12 nats).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedJoint {
    pub joint: DiscreteJoint,
    pub pair: (usize, usize),
}

pub fn planted_pair_joint(d: usize, rng: &mut impl Rng) -> PlantedJoint {
    assert!(d >= 3, "need room for irrelevant variables");
    let i = rng.random_range(0..d);
    let j = loop {
        let j = rng.random_range(0..d);
        if j != i {
            break j;
        }
    };
    let (lo, hi) = (i.min(j), i.max(j));
    let mag = |rng: &mut dyn rand::RngCore| 1.5 + rng.random::<f64>();
    let sign = |rng: &mut dyn rand::RngCore| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let a = sign(rng) * mag(rng);
    let b = sign(rng) * mag(rng);

    let p_x = 1.0 / (1usize << d) as f64;
    let mut probs = vec![0.0f64; (1usize << d) * 2];
    for code in 0..(1usize << d) {
        let bit = |pos: usize| (code >> (d - 1 - pos)) & 1;
        let s_i = 2.0 * bit(lo) as f64 - 1.0;
        let s_j = 2.0 * bit(hi) as f64 - 1.0;
        let p1 = 1.0 / (1.0 + (-(a * s_i + b * s_j)).exp());
        probs[code * 2] = p_x * (1.0 - p1);
        probs[code * 2 + 1] = p_x * p1;
    }
    let residual: f64 = 1.0 - probs.iter().sum::<f64>();
    probs[0] += residual;
    PlantedJoint {
        joint: DiscreteJoint::new(vec![2; d], 2, probs).expect("valid by construction"),
        pair: (lo, hi),
    }
}

/// Outcome of one train-and-compare trial on a toy joint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryTrial {
    pub brute_force: BestSubset,
    /// Modal explanation subset over the probe samples.
    pub chosen: Vec<usize>,
    /// Fraction of probe samples on which the modal subset was chosen.
    pub modal_fraction: f64,
    pub agree: bool,
}

/// Train a tiny selector on samples from `joint` and compare its modal
/// size-k explanation against exhaustive search.
pub fn selector_recovery_trial(
    joint: &DiscreteJoint,
    k: usize,
    train_n: usize,
    probe_n: usize,
    cfg: &SelectorTrainConfig,
    rng: &mut impl Rng,
) -> Result<RecoveryTrial> {
    let blackbox = TabularBlackbox::new(joint.clone())?;
    let train = sample_dataset(joint, train_n, rng, SplitTag::Train)?;
    let grid = toy_grid(joint.d());
    let (selector, _) = train_selector(&blackbox, &train, &grid, k, cfg)?;

    let probe = sample_dataset(joint, probe_n, rng, SplitTag::Validation)?;
    let mut counts: std::collections::BTreeMap<Vec<usize>, usize> = Default::default();
    for idx in 0..probe.len() {
        let expl = selector.explain(probe.pixels(idx), k)?;
        *counts.entry(expl.indices()).or_insert(0) += 1;
    }
    let (chosen, votes) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .expect("probe set is nonempty");

    let brute_force = best_subset_bruteforce(joint, k)?;
    let agree = chosen == brute_force.subset;
    Ok(RecoveryTrial {
        brute_force,
        chosen,
        modal_fraction: votes as f64 / probe_n as f64,
        agree,
    })
}
