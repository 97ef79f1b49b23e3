//! Explanation quality metrics, plus an exact information-theoretic oracle
//! on small discrete joint distributions.
//!
//! The oracle computes the causal strength of a patch subset — the
//! conditional mutual information `I(X_s; Y | X_s̄)` — by full enumeration,
//! and checks the identity that maximizing it over size-k subsets is the
//! same as minimizing `E[log p(Y | X_s̄)]`. That identity is what licenses
//! the selector's training objective, so it gets a dedicated dual-route
//! brute-force check here.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{predict_dataset, Classifier};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::argmax_row;
use crate::patching::{apply_mask, PatchGrid, SubsetMask};
use crate::sampler::random_k_hot;

/// Kahan-compensated mean, so aggregation order does not perturb reports.
pub fn mean_compensated(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum / values.len().max(1) as f64
}

/// Sample standard deviation (n-1 denominator), 0 for fewer than 2 values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = mean_compensated(values);
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn check_explanations(
    ds: &LabeledDataset,
    explanations: &[SubsetMask],
    grid: &PatchGrid,
) -> Result<usize> {
    if explanations.len() != ds.len() {
        return Err(Error::contract(format!(
            "{} explanations for {} samples",
            explanations.len(),
            ds.len()
        )));
    }
    if ds.image_shape() != grid.image_shape {
        return Err(Error::contract(
            "dataset image shape does not match the patch grid",
        ));
    }
    let k = explanations
        .first()
        .map(SubsetMask::count_ones)
        .unwrap_or(0);
    for (i, m) in explanations.iter().enumerate() {
        if !m.is_hard() || m.len() != grid.d() {
            return Err(Error::contract(format!(
                "explanation {i} is not a hard mask of length d={}",
                grid.d()
            )));
        }
        if m.count_ones() != k {
            return Err(Error::contract(format!(
                "explanation {i} has {} ones, expected k={k}",
                m.count_ones()
            )));
        }
    }
    Ok(k)
}

fn predict_masked(
    blackbox: &impl Classifier,
    ds: &LabeledDataset,
    masks: &[SubsetMask],
    grid: &PatchGrid,
) -> Result<ndarray::Array2<f32>> {
    const CHUNK: usize = 512;
    let (c, h, w) = ds.image_shape();
    let mut out = ndarray::Array2::zeros((ds.len(), blackbox.num_classes()));
    let mut start = 0;
    while start < ds.len() {
        let end = (start + CHUNK).min(ds.len());
        let mut batch = Array4::zeros((end - start, c, h, w));
        for i in start..end {
            let masked = apply_mask(ds.pixels(i), &masks[i], grid)?;
            batch.index_axis_mut(Axis(0), i - start).assign(&masked);
        }
        let probs = blackbox.predict_proba(&batch)?;
        for i in start..end {
            out.row_mut(i).assign(&probs.row(i - start));
        }
        start = end;
    }
    Ok(out)
}

/// Per-sample indicator that the model's argmax on the masked input matches
/// its argmax on the full input (ties to the lowest class index).
pub fn post_hoc_indicators(
    blackbox: &impl Classifier,
    ds: &LabeledDataset,
    explanations: &[SubsetMask],
    grid: &PatchGrid,
) -> Result<Vec<bool>> {
    check_explanations(ds, explanations, grid)?;
    let full = predict_dataset(blackbox, ds)?;
    let masked = predict_masked(blackbox, ds, explanations, grid)?;
    Ok((0..ds.len())
        .map(|i| {
            argmax_row(full.row(i).as_slice().unwrap())
                == argmax_row(masked.row(i).as_slice().unwrap())
        })
        .collect())
}

/// Fraction of validation samples whose prediction survives masking down to
/// the explanation patches.
pub fn post_hoc_accuracy(
    blackbox: &impl Classifier,
    ds: &LabeledDataset,
    explanations: &[SubsetMask],
    grid: &PatchGrid,
) -> Result<f64> {
    let indicators = post_hoc_indicators(blackbox, ds, explanations, grid)?;
    let values: Vec<f64> = indicators.iter().map(|&b| f64::from(u8::from(b))).collect();
    Ok(mean_compensated(&values))
}

/// Individual causal effect of one explanation: the model's predicted-class
/// probability when only the explanation is visible, minus the mean of the
/// same probability over `repeats` uniformly random subsets of equal size.
pub fn individual_causal_effect(
    blackbox: &impl Classifier,
    pixels: ndarray::ArrayView3<'_, f32>,
    explanation: &SubsetMask,
    grid: &PatchGrid,
    rng: &mut impl Rng,
    repeats: usize,
) -> Result<f64> {
    if !explanation.is_hard() || explanation.len() != grid.d() {
        return Err(Error::contract("explanation must be a hard length-d mask"));
    }
    if repeats == 0 {
        return Err(Error::contract("repeats must be >= 1"));
    }
    let k = explanation.count_ones();
    let d = grid.d();

    let one = |masked: ndarray::Array3<f32>| -> Result<Vec<f32>> {
        let s = masked.shape().to_vec();
        let mut batch = Array4::zeros((1, s[0], s[1], s[2]));
        batch.index_axis_mut(Axis(0), 0).assign(&masked);
        Ok(blackbox.predict_proba(&batch)?.row(0).to_vec())
    };

    let full = one(pixels.to_owned())?;
    let y_star = argmax_row(&full);
    let kept = one(apply_mask(pixels, explanation, grid)?)?[y_star];

    let mut random_sum = 0.0f64;
    for _ in 0..repeats {
        let mask = random_k_hot(d, k, rng)?;
        random_sum += f64::from(one(apply_mask(pixels, &mask, grid)?)?[y_star]);
    }
    Ok(f64::from(kept) - random_sum / repeats as f64)
}

/// ICE for every sample, with batched forward passes. Random subsets are
/// drawn instance-major from `rng` (instance i's `repeats` draws precede
/// instance i+1's), matching a sequence of [`individual_causal_effect`]
/// calls on one shared generator.
pub fn individual_causal_effects(
    blackbox: &impl Classifier,
    ds: &LabeledDataset,
    explanations: &[SubsetMask],
    grid: &PatchGrid,
    rng: &mut impl Rng,
    repeats: usize,
) -> Result<Vec<f64>> {
    let k = check_explanations(ds, explanations, grid)?;
    if repeats == 0 {
        return Err(Error::contract("repeats must be >= 1"));
    }
    let n = ds.len();
    let d = grid.d();

    let full = predict_dataset(blackbox, ds)?;
    let y_star: Vec<usize> = (0..n)
        .map(|i| argmax_row(full.row(i).as_slice().unwrap()))
        .collect();
    let kept = predict_masked(blackbox, ds, explanations, grid)?;

    // instance-major draw order
    let mut random_masks: Vec<Vec<SubsetMask>> = Vec::with_capacity(repeats);
    random_masks.resize_with(repeats, Vec::new);
    for _ in 0..n {
        for slot in random_masks.iter_mut() {
            slot.push(random_k_hot(d, k, rng)?);
        }
    }

    let mut random_mean = vec![0.0f64; n];
    for masks in &random_masks {
        let probs = predict_masked(blackbox, ds, masks, grid)?;
        for i in 0..n {
            random_mean[i] += f64::from(probs[[i, y_star[i]]]) / repeats as f64;
        }
    }

    Ok((0..n)
        .map(|i| f64::from(kept[[i, y_star[i]]]) - random_mean[i])
        .collect())
}

/// Mean ICE over the validation set.
pub fn average_causal_effect(
    blackbox: &impl Classifier,
    ds: &LabeledDataset,
    explanations: &[SubsetMask],
    grid: &PatchGrid,
    rng: &mut impl Rng,
    repeats: usize,
) -> Result<f64> {
    let ice = individual_causal_effects(blackbox, ds, explanations, grid, rng, repeats)?;
    Ok(mean_compensated(&ice))
}

// ---------------------------------------------------------------------------
// Exact oracle on small discrete joints
// ---------------------------------------------------------------------------

/// A fully enumerated joint distribution over `(X_1..X_d, Y)` with small
/// arities (each <= 4, d <= 8). The flat table is x-major then y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteJoint {
    x_arities: Vec<usize>,
    y_arity: usize,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(x_arities: Vec<usize>, y_arity: usize, probs: Vec<f64>) -> Result<Self> {
        let d = x_arities.len();
        if d == 0 || d > 8 {
            return Err(Error::contract("joint needs 1..=8 X variables"));
        }
        if x_arities.iter().any(|&a| !(2..=4).contains(&a)) || !(2..=4).contains(&y_arity) {
            return Err(Error::contract("variable arities must be in 2..=4"));
        }
        let len: usize = x_arities.iter().product::<usize>() * y_arity;
        if probs.len() != len {
            return Err(Error::contract(format!(
                "table length {} does not match arities (expected {len})",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("probabilities must be finite and >= 0"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "table sums to {total}, not 1 within 1e-12"
            )));
        }
        Ok(DiscreteJoint {
            x_arities,
            y_arity,
            probs,
        })
    }

    pub fn d(&self) -> usize {
        self.x_arities.len()
    }

    pub fn x_arities(&self) -> &[usize] {
        &self.x_arities
    }

    pub fn y_arity(&self) -> usize {
        self.y_arity
    }

    pub fn prob(&self, x: &[usize], y: usize) -> f64 {
        self.probs[self.flat_index(x, y)]
    }

    fn flat_index(&self, x: &[usize], y: usize) -> usize {
        debug_assert_eq!(x.len(), self.d());
        let mut idx = 0;
        for (i, &xi) in x.iter().enumerate() {
            debug_assert!(xi < self.x_arities[i]);
            idx = idx * self.x_arities[i] + xi;
        }
        idx * self.y_arity + y
    }

    /// Iterate `(x, y, p)` over every cell of the table.
    pub fn for_each(&self, mut f: impl FnMut(&[usize], usize, f64)) {
        let d = self.d();
        let mut x = vec![0usize; d];
        let mut flat = 0usize;
        loop {
            for y in 0..self.y_arity {
                f(&x, y, self.probs[flat]);
                flat += 1;
            }
            let mut i = d;
            loop {
                if i == 0 {
                    return;
                }
                i -= 1;
                x[i] += 1;
                if x[i] < self.x_arities[i] {
                    break;
                }
                x[i] = 0;
            }
            if x.iter().all(|&v| v == 0) {
                return;
            }
        }
    }

    /// Conditional `p(y | x)` row; `None` where `p(x) = 0`.
    pub fn conditional(&self, x: &[usize]) -> Option<Vec<f64>> {
        let base = self.flat_index(x, 0);
        let row = &self.probs[base..base + self.y_arity];
        let px: f64 = row.iter().sum();
        if px <= 0.0 {
            return None;
        }
        Some(row.iter().map(|p| p / px).collect())
    }

    /// Marginal `p(x)`.
    pub fn marginal_x(&self, x: &[usize]) -> f64 {
        let base = self.flat_index(x, 0);
        self.probs[base..base + self.y_arity].iter().sum()
    }
}

fn validate_subset(joint: &DiscreteJoint, s: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = s.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != s.len() {
        return Err(Error::contract("subset contains duplicate indices"));
    }
    if sorted.iter().any(|&i| i >= joint.d()) {
        return Err(Error::contract(format!(
            "subset {s:?} indexes outside 0..{}",
            joint.d()
        )));
    }
    Ok(sorted)
}

/// Mixed-radix key of the coordinates of `x` outside `s`.
fn complement_key(joint: &DiscreteJoint, in_s: &[bool], x: &[usize]) -> usize {
    let mut key = 0usize;
    for i in 0..joint.d() {
        if !in_s[i] {
            key = key * joint.x_arities()[i] + x[i];
        }
    }
    key
}

fn complement_tables(
    joint: &DiscreteJoint,
    in_s: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let mut size = 1usize;
    for i in 0..joint.d() {
        if !in_s[i] {
            size *= joint.x_arities()[i];
        }
    }
    let ya = joint.y_arity();
    let mut p_xbar = vec![0.0f64; size];
    let mut p_xbar_y = vec![0.0f64; size * ya];
    joint.for_each(|x, y, p| {
        let key = complement_key(joint, in_s, x);
        p_xbar[key] += p;
        p_xbar_y[key * ya + y] += p;
    });
    (p_xbar, p_xbar_y)
}

/// Exact `I(X_s; Y | X_s̄)` in nats by full enumeration, with the
/// convention `0 * log(0/q) = 0`.
pub fn exact_conditional_mutual_information(joint: &DiscreteJoint, s: &[usize]) -> Result<f64> {
    let s = validate_subset(joint, s)?;
    let mut in_s = vec![false; joint.d()];
    for &i in &s {
        in_s[i] = true;
    }
    let ya = joint.y_arity();
    let (p_xbar, p_xbar_y) = complement_tables(joint, &in_s);

    let mut cmi = 0.0f64;
    joint.for_each(|x, y, p| {
        if p <= 0.0 {
            return;
        }
        let p_x = joint.marginal_x(x);
        let key = complement_key(joint, &in_s, x);
        // log [ p(y|x) / p(y|x_sbar) ]; every factor is positive here
        cmi += p * ((p / p_x).ln() - (p_xbar_y[key * ya + y] / p_xbar[key]).ln());
    });
    // the exact quantity is >= 0; sub-1e-12 negatives are float residue
    if cmi < 0.0 && cmi > -1e-12 {
        cmi = 0.0;
    }
    Ok(cmi)
}

/// Exact `E[log p(Y | X_s̄)]` in nats (equals `-H(Y | X_s̄)`).
pub fn expected_log_prob_given_complement(joint: &DiscreteJoint, s: &[usize]) -> Result<f64> {
    let s = validate_subset(joint, s)?;
    let mut in_s = vec![false; joint.d()];
    for &i in &s {
        in_s[i] = true;
    }
    let ya = joint.y_arity();
    let (p_xbar, p_xbar_y) = complement_tables(joint, &in_s);

    let mut ell = 0.0f64;
    joint.for_each(|x, y, p| {
        if p <= 0.0 {
            return;
        }
        let key = complement_key(joint, &in_s, x);
        ell += p * (p_xbar_y[key * ya + y] / p_xbar[key]).ln();
    });
    Ok(ell)
}

/// Result of the exhaustive size-k subset search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestSubset {
    /// Lexicographically smallest CMI-maximizing subset.
    pub subset: Vec<usize>,
    pub cmi: f64,
    pub expected_log_prob: f64,
    /// Other subsets tied with the winner within 1e-12.
    pub ties: Vec<Vec<usize>>,
}

/// Visit all size-k subsets of `0..d` in lexicographic order.
pub fn for_each_combination(d: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > d {
        return;
    }
    if k == 0 {
        f(&[]);
        return;
    }
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        f(&combo);
        let mut i = k - 1;
        while combo[i] == i + d - k {
            if i == 0 {
                return;
            }
            i -= 1;
        }
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

const TIE_EPS: f64 = 1e-12;

/// Enumerate every size-k subset and return the one with maximal causal
/// strength (exact CMI), ties broken lexicographically. Internally verifies
/// that the same subset minimizes `E[log p(Y|X_s̄)]` and fails loudly if the
/// two routes disagree beyond tie ambiguity.
pub fn best_subset_bruteforce(joint: &DiscreteJoint, k: usize) -> Result<BestSubset> {
    let d = joint.d();
    if k > d {
        return Err(Error::contract(format!("k={k} exceeds d={d}")));
    }

    let mut best_cmi: Option<(Vec<usize>, f64)> = None;
    let mut ties: Vec<Vec<usize>> = Vec::new();
    let mut best_ell: Option<(Vec<usize>, f64)> = None;
    let mut failure: Option<Error> = None;

    for_each_combination(d, k, |s| {
        if failure.is_some() {
            return;
        }
        let (cmi, ell) = match exact_conditional_mutual_information(joint, s)
            .and_then(|c| expected_log_prob_given_complement(joint, s).map(|e| (c, e)))
        {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        match &mut best_cmi {
            None => best_cmi = Some((s.to_vec(), cmi)),
            Some((_, cur)) => {
                if cmi > *cur + TIE_EPS {
                    best_cmi = Some((s.to_vec(), cmi));
                    ties.clear();
                } else if (cmi - *cur).abs() <= TIE_EPS {
                    ties.push(s.to_vec());
                }
            }
        }
        match &mut best_ell {
            None => best_ell = Some((s.to_vec(), ell)),
            Some((_, cur)) => {
                if ell < *cur - TIE_EPS {
                    best_ell = Some((s.to_vec(), ell));
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let (subset, cmi) = best_cmi.ok_or_else(|| Error::contract("no subsets enumerated"))?;
    let (ell_subset, _) = best_ell.expect("enumerated at least one subset");

    if subset != ell_subset {
        let cmi_of_ell_winner = exact_conditional_mutual_information(joint, &ell_subset)?;
        if (cmi_of_ell_winner - cmi).abs() > 1e-9 {
            return Err(Error::OracleInconsistency(format!(
                "argmax-CMI subset {subset:?} (CMI {cmi}) differs from \
                 argmin-E[log p] subset {ell_subset:?} (CMI {cmi_of_ell_winner}) beyond ties"
            )));
        }
    }

    let expected_log_prob = expected_log_prob_given_complement(joint, &subset)?;
    Ok(BestSubset {
        subset,
        cmi,
        expected_log_prob,
        ties,
    })
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// One method's evaluation on one `(dataset, k, seed)` cell. Serialized as
/// JSON, one file per cell; `timestamp` is the only field allowed to differ
/// between identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub dataset: String,
    pub k: usize,
    pub seed: u64,
    pub post_hoc_accuracy: f64,
    pub ace: f64,
    pub ice: Vec<f64>,
    pub timestamp: String,
    pub config: serde_json::Value,
}

impl EvaluationReport {
    /// Build from per-instance data; the scalar fields are the compensated
    /// means of the per-instance values by construction.
    pub fn from_instances(
        method: impl Into<String>,
        dataset: impl Into<String>,
        k: usize,
        seed: u64,
        indicators: &[bool],
        ice: Vec<f64>,
        config: serde_json::Value,
    ) -> Self {
        let hits: Vec<f64> = indicators.iter().map(|&b| f64::from(u8::from(b))).collect();
        EvaluationReport {
            method: method.into(),
            dataset: dataset.into(),
            k,
            seed,
            post_hoc_accuracy: mean_compensated(&hits),
            ace: mean_compensated(&ice),
            ice,
            timestamp: chrono::Utc::now().to_rfc3339(),
            config,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::SplitTag;
    use ndarray::{Array2, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Stub classifier: class-0 probability is the mean pixel value.
    pub(crate) struct MeanPixelStub {
        pub shape: (usize, usize, usize),
    }

    impl Classifier for MeanPixelStub {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_shape(&self) -> (usize, usize, usize) {
            self.shape
        }
        fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
            let n = batch.shape()[0];
            let total = (batch.len() / n) as f32;
            let mut out = Array2::zeros((n, 2));
            for i in 0..n {
                let mean = batch.index_axis(Axis(0), i).sum() / total;
                out[[i, 0]] = mean;
                out[[i, 1]] = 1.0 - mean;
            }
            Ok(out)
        }
    }

    /// Stub with a fixed probability table, keyed by the first pixel value
    /// (row id = first pixel * 10).
    struct TableStub {
        rows: Vec<Vec<f32>>,
    }

    impl Classifier for TableStub {
        fn num_classes(&self) -> usize {
            self.rows[0].len()
        }
        fn input_shape(&self) -> (usize, usize, usize) {
            (1, 1, 1)
        }
        fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
            let n = batch.shape()[0];
            let mut out = Array2::zeros((n, self.num_classes()));
            for i in 0..n {
                let id = (batch[[i, 0, 0, 0]] * 10.0).round() as usize;
                for (j, &p) in self.rows[id].iter().enumerate() {
                    out[[i, j]] = p;
                }
            }
            Ok(out)
        }
    }

    fn table_dataset() -> (TableStub, LabeledDataset, PatchGrid) {
        // full-image rows 1,2,3 -> argmax (0, 0, 1); the zero-mask sends
        // every sample to row 0 whose argmax is 0, flipping only sample 2
        let stub = TableStub {
            rows: vec![
                vec![0.6, 0.4], // masked row for everyone
                vec![0.9, 0.1],
                vec![0.8, 0.2],
                vec![0.2, 0.8],
            ],
        };
        let mut images = Array4::zeros((3, 1, 1, 1));
        images[[0, 0, 0, 0]] = 0.1;
        images[[1, 0, 0, 0]] = 0.2;
        images[[2, 0, 0, 0]] = 0.3;
        let ds = LabeledDataset::new(
            images,
            vec![0, 0, 1],
            vec!["a".into(), "b".into()],
            SplitTag::Validation,
        )
        .unwrap();
        let grid = PatchGrid::new((1, 1, 1), (1, 1)).unwrap();
        (stub, ds, grid)
    }

    fn bright_dataset(n: usize) -> LabeledDataset {
        let images = Array4::from_elem((n, 1, 4, 4), 0.8);
        LabeledDataset::new(
            images,
            vec![0; n],
            vec!["a".into(), "b".into()],
            SplitTag::Validation,
        )
        .unwrap()
    }

    #[test]
    fn post_hoc_accuracy_is_one_for_full_masks() {
        let ds = bright_dataset(5);
        let grid = PatchGrid::new((1, 4, 4), (2, 2)).unwrap();
        let stub = MeanPixelStub { shape: (1, 4, 4) };
        let masks = vec![SubsetMask::ones(4); 5];
        assert_eq!(post_hoc_accuracy(&stub, &ds, &masks, &grid).unwrap(), 1.0);
    }

    #[test]
    fn post_hoc_accuracy_counts_flips() {
        let (stub, ds, grid) = table_dataset();
        let masks = vec![SubsetMask::zeros(1); 3];
        let hits = post_hoc_indicators(&stub, &ds, &masks, &grid).unwrap();
        assert_eq!(hits, vec![true, true, false]);
        let acc = post_hoc_accuracy(&stub, &ds, &masks, &grid).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn post_hoc_accuracy_invariant_under_monotone_transforms() {
        struct Squared<C>(C);
        impl<C: Classifier> Classifier for Squared<C> {
            fn num_classes(&self) -> usize {
                self.0.num_classes()
            }
            fn input_shape(&self) -> (usize, usize, usize) {
                self.0.input_shape()
            }
            fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
                Ok(self.0.predict_proba(batch)?.mapv(|p| p * p))
            }
        }
        let (stub, ds, grid) = table_dataset();
        let masks = vec![SubsetMask::zeros(1); 3];
        let plain = post_hoc_accuracy(&stub, &ds, &masks, &grid).unwrap();
        let squared = post_hoc_accuracy(&Squared(stub), &ds, &masks, &grid).unwrap();
        assert_eq!(plain, squared);
    }

    #[test]
    fn mismatched_mask_count_is_a_contract_error() {
        let (stub, ds, grid) = table_dataset();
        let masks = vec![SubsetMask::zeros(1); 2];
        assert!(post_hoc_accuracy(&stub, &ds, &masks, &grid).is_err());
    }

    #[test]
    fn ice_is_zero_when_k_equals_d() {
        let ds = bright_dataset(1);
        let grid = PatchGrid::new((1, 4, 4), (2, 2)).unwrap();
        let stub = MeanPixelStub { shape: (1, 4, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ice = individual_causal_effect(
            &stub,
            ds.pixels(0),
            &SubsetMask::ones(4),
            &grid,
            &mut rng,
            3,
        )
        .unwrap();
        assert_eq!(ice, 0.0);
    }

    #[test]
    fn ice_matches_closed_form_for_mean_pixel_stub() {
        let patch_vals = [0.2f32, 0.1, 0.05, 0.025];
        let grid = PatchGrid::new((1, 4, 4), (2, 2)).unwrap();
        let mut images = Array4::zeros((1, 1, 4, 4));
        for p in 0..4 {
            let (r0, r1, c0, c1) = grid.patch_bounds(p);
            for y in r0..r1 {
                for x in c0..c1 {
                    images[[0, 0, y, x]] = patch_vals[p];
                }
            }
        }
        let ds = LabeledDataset::new(
            images,
            vec![0],
            vec!["a".into(), "b".into()],
            SplitTag::Validation,
        )
        .unwrap();
        let stub = MeanPixelStub { shape: (1, 4, 4) };

        // full-image mean pixel is 0.09375 < 0.5, so y* = class 1 and
        // p(y* | masked) = 1 - kept mean
        let explanation = SubsetMask::from_indices(4, &[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut replay = rng.clone();
        let repeats = 4;
        let ice = individual_causal_effect(
            &stub,
            ds.pixels(0),
            &explanation,
            &grid,
            &mut rng,
            repeats,
        )
        .unwrap();

        let kept_mean = |mask: &SubsetMask| -> f64 {
            mask.values()
                .iter()
                .zip(&patch_vals)
                .map(|(&m, &v)| m * f64::from(v) * 4.0 / 16.0)
                .sum()
        };
        let p_expl = 1.0 - kept_mean(&explanation);
        let mut rand_sum = 0.0;
        for _ in 0..repeats {
            let m = random_k_hot(4, 1, &mut replay).unwrap();
            rand_sum += 1.0 - kept_mean(&m);
        }
        let expected = p_expl - rand_sum / repeats as f64;
        assert!((ice - expected).abs() < 1e-7, "{ice} vs {expected}");
        assert!((-1.0..=1.0).contains(&ice));
    }

    #[test]
    fn random_explanations_have_near_zero_ice() {
        // x_s and x_random identically distributed -> E[ICE] = 0
        let n = 500;
        let ds = {
            let mut images = Array4::zeros((n, 1, 4, 4));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            use rand::Rng;
            for v in images.iter_mut() {
                *v = rng.random::<f32>();
            }
            LabeledDataset::new(
                images,
                vec![0; n],
                vec!["a".into(), "b".into()],
                SplitTag::Validation,
            )
            .unwrap()
        };
        let grid = PatchGrid::new((1, 4, 4), (2, 2)).unwrap();
        let stub = MeanPixelStub { shape: (1, 4, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let explanations: Vec<SubsetMask> = (0..n)
            .map(|_| random_k_hot(4, 2, &mut rng).unwrap())
            .collect();
        let ace = average_causal_effect(&stub, &ds, &explanations, &grid, &mut rng, 4).unwrap();
        assert!(ace.abs() <= 0.02, "ACE of random explanations was {ace}");
    }

    #[test]
    fn batched_ice_matches_single_instance_path() {
        let ds = bright_dataset(3);
        let grid = PatchGrid::new((1, 4, 4), (2, 2)).unwrap();
        let stub = MeanPixelStub { shape: (1, 4, 4) };
        let explanations = vec![
            SubsetMask::from_indices(4, &[0]).unwrap(),
            SubsetMask::from_indices(4, &[2]).unwrap(),
            SubsetMask::from_indices(4, &[3]).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let batched =
            individual_causal_effects(&stub, &ds, &explanations, &grid, &mut rng, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for i in 0..3 {
            let single = individual_causal_effect(
                &stub,
                ds.pixels(i),
                &explanations[i],
                &grid,
                &mut rng,
                2,
            )
            .unwrap();
            assert!((batched[i] - single).abs() < 1e-12);
        }
    }

    // --- exact oracle ---

    /// Y = X1 xor X2, X3 an independent fair coin, X1/X2 fair independent.
    pub(crate) fn xor_joint() -> DiscreteJoint {
        let mut probs = vec![0.0; 16];
        for x1 in 0..2usize {
            for x2 in 0..2usize {
                for x3 in 0..2usize {
                    let y = x1 ^ x2;
                    probs[(((x1 * 2) + x2) * 2 + x3) * 2 + y] = 1.0 / 8.0;
                }
            }
        }
        DiscreteJoint::new(vec![2, 2, 2], 2, probs).unwrap()
    }

    pub(crate) fn random_joint(d: usize, rng: &mut impl Rng) -> DiscreteJoint {
        // Dirichlet(1) via normalized exponentials
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
        DiscreteJoint::new(vec![2; d], 2, probs).unwrap()
    }

    #[test]
    fn xor_oracle_values() {
        let joint = xor_joint();
        let ln2 = std::f64::consts::LN_2;
        let cmi12 = exact_conditional_mutual_information(&joint, &[0, 1]).unwrap();
        assert!((cmi12 - ln2).abs() < 1e-9, "CMI(X1,X2) = {cmi12}");
        let cmi3 = exact_conditional_mutual_information(&joint, &[2]).unwrap();
        assert!(cmi3.abs() < 1e-12, "CMI(X3) = {cmi3}");

        let best = best_subset_bruteforce(&joint, 2).unwrap();
        assert_eq!(best.subset, vec![0, 1]);
        assert!((best.cmi - ln2).abs() < 1e-9);
        // removing {X1,X3} or {X2,X3} also hides the xor: reported as ties
        assert_eq!(best.ties, vec![vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn empty_subset_has_zero_cmi() {
        let joint = xor_joint();
        assert_eq!(
            exact_conditional_mutual_information(&joint, &[]).unwrap(),
            0.0
        );
    }

    #[test]
    fn independent_y_has_zero_cmi_everywhere_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let d = 3;
        let mut px: Vec<f64> = (0..(1 << d)).map(|_| rng.random::<f64>() + 0.1).collect();
        let z: f64 = px.iter().sum();
        for p in px.iter_mut() {
            *p /= z;
        }
        let qy = [0.3, 0.7];
        let mut probs = vec![0.0; (1 << d) * 2];
        for (i, &p) in px.iter().enumerate() {
            for (y, &q) in qy.iter().enumerate() {
                probs[i * 2 + y] = p * q;
            }
        }
        let residual: f64 = 1.0 - probs.iter().sum::<f64>();
        probs[0] += residual;
        let joint = DiscreteJoint::new(vec![2; d], 2, probs).unwrap();
        for s in [vec![0], vec![1], vec![0, 2], vec![0, 1, 2]] {
            let cmi = exact_conditional_mutual_information(&joint, &s).unwrap();
            assert!(cmi.abs() < 1e-9, "CMI({s:?}) = {cmi}");
        }
        let best = best_subset_bruteforce(&joint, 1).unwrap();
        assert_eq!(best.subset, vec![0]);
        assert_eq!(best.ties.len(), d - 1, "all singletons tie at zero");
    }

    #[test]
    fn copy_joint_prefers_the_copied_variable() {
        // Y = X1 exactly; X2 an independent coin
        let mut probs = vec![0.0; 8];
        for x1 in 0..2usize {
            for x2 in 0..2usize {
                probs[((x1 * 2) + x2) * 2 + x1] = 0.25;
            }
        }
        let joint = DiscreteJoint::new(vec![2, 2], 2, probs).unwrap();
        let best = best_subset_bruteforce(&joint, 1).unwrap();
        assert_eq!(best.subset, vec![0]);
        assert!((best.cmi - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(best.ties.is_empty());
    }

    #[test]
    fn cmi_is_nonnegative_on_random_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let joint = random_joint(4, &mut rng);
            for s in [vec![0], vec![1, 3], vec![0, 1, 2, 3]] {
                let cmi = exact_conditional_mutual_information(&joint, &s).unwrap();
                assert!(cmi >= -1e-12, "CMI({s:?}) = {cmi}");
            }
        }
    }

    #[test]
    fn cmi_chain_rule_holds() {
        // I(X_{0,2}; Y | X_{1,3}) = I(X_0; Y | X_{1,2,3}) + I(X_2; Y | X_{1,3})
        // The first two terms are CMI({0,2}) and CMI({0}) on the full joint;
        // the last is CMI({X_2}) on the joint with X_0 summed out.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let joint = random_joint(4, &mut rng);
            let lhs = exact_conditional_mutual_information(&joint, &[0, 2]).unwrap();
            let first = exact_conditional_mutual_information(&joint, &[0]).unwrap();

            let mut probs = vec![0.0; 8 * 2];
            joint.for_each(|x, y, p| {
                probs[((((x[1] * 2) + x[2]) * 2 + x[3]) * 2) + y] += p;
            });
            let residual: f64 = 1.0 - probs.iter().sum::<f64>();
            probs[0] += residual;
            let marginal = DiscreteJoint::new(vec![2, 2, 2], 2, probs).unwrap();
            let second = exact_conditional_mutual_information(&marginal, &[1]).unwrap();

            assert!(
                (lhs - first - second).abs() < 1e-9,
                "chain rule residual {}",
                lhs - first - second
            );
        }
    }

    #[test]
    fn eq2_identity_on_random_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2718);
        for i in 0..20 {
            let joint = random_joint(5, &mut rng);
            // best_subset_bruteforce errors out if the two routes disagree
            let best =
                best_subset_bruteforce(&joint, 2).unwrap_or_else(|e| panic!("joint {i}: {e}"));
            assert_eq!(best.subset.len(), 2);
        }
    }

    #[test]
    fn combination_enumeration_is_lexicographic_and_complete() {
        let mut seen = vec![];
        for_each_combination(5, 2, |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), 10);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[1], vec![0, 2]);
        assert_eq!(seen[9], vec![3, 4]);
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(seen, sorted, "enumeration order is lexicographic");
    }

    #[test]
    fn report_scalars_match_instance_means() {
        let ice = vec![0.25, -0.5, 0.125, 0.0];
        let report = EvaluationReport::from_instances(
            "test",
            "toy",
            2,
            9,
            &[true, true, false, true],
            ice.clone(),
            serde_json::json!({}),
        );
        assert!((report.post_hoc_accuracy - 0.75).abs() < 1e-9);
        assert!((report.ace - mean_compensated(&ice)).abs() < 1e-15);
        let text = serde_json::to_string(&report).unwrap();
        let back: EvaluationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.ice, report.ice);
    }
}
