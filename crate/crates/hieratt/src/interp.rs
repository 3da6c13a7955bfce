//! Interpretability enhancement: select strongly-relevant region-word
//! pairs, turn their relevance into a posterior over regions, and sum
//! (1 - posterior) into the loss that retraining blends with cross
//! entropy.
//!
//! Two posterior modes ship. `Verbatim` is the literal product
//! P(w|r) * P(r); `Normalized` divides by the per-word evidence so the
//! posteriors over regions sum to one. The dynamic selection threshold is
//! c/k: it scales with the word count, so a uniform "don't know" row never
//! selects anything at the default c = 2.

use crate::encoder::BBox;
use crate::error::{Error, Result};
use crate::rwa::RelevanceMatrix;
use crate::tensor::{NodeId, Tape};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SELECTION_FACTOR: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub region: usize,
    pub word: usize,
    /// P(w_j | r_i) at selection time.
    pub relevance: f64,
}

/// Pairs with relevance >= factor / word_count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairSelection {
    pub pairs: Vec<SelectedPair>,
    pub factor: f64,
    pub word_count: usize,
}

impl PairSelection {
    pub fn threshold(&self) -> f64 {
        self.factor / self.word_count as f64
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every pair of the matrix, for the all-pairs loss variant.
    pub fn all(m: &RelevanceMatrix) -> Self {
        let mut pairs = Vec::with_capacity(m.n_regions * m.n_words);
        for i in 0..m.n_regions {
            for j in 0..m.n_words {
                pairs.push(SelectedPair { region: i, word: j, relevance: m.get(i, j) });
            }
        }
        PairSelection { pairs, factor: 0.0, word_count: m.n_words }
    }
}

/// Pair (i, j) is kept iff P(w_j | r_i) >= c / k.
pub fn select_pairs(m: &RelevanceMatrix, factor: f64) -> PairSelection {
    let threshold = factor / m.n_words as f64;
    let mut pairs = Vec::new();
    for i in 0..m.n_regions {
        for j in 0..m.n_words {
            let p = m.get(i, j);
            if p >= threshold {
                pairs.push(SelectedPair { region: i, word: j, relevance: p });
            }
        }
    }
    PairSelection { pairs, factor, word_count: m.n_words }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorMode {
    Uniform,
    AreaProportional,
}

/// P(r_i) per region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionPrior {
    pub values: Vec<f64>,
    pub mode: PriorMode,
}

impl RegionPrior {
    pub fn uniform(n: usize) -> Self {
        RegionPrior { values: vec![1.0 / n as f64; n], mode: PriorMode::Uniform }
    }

    pub fn area_proportional(boxes: &[BBox]) -> Result<Self> {
        let total: f64 = boxes.iter().map(|b| b.area()).sum();
        if total <= 0.0 {
            return Err(Error::invalid("region_prior", "zero total box area".to_string()));
        }
        Ok(RegionPrior {
            values: boxes.iter().map(|b| b.area() / total).collect(),
            mode: PriorMode::AreaProportional,
        })
    }

    pub fn custom(values: Vec<f64>, mode: PriorMode) -> Result<Self> {
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("region_prior", "negative prior entry".to_string()));
        }
        Ok(RegionPrior { values, mode })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosteriorMode {
    /// P(r|w) = P(w|r) * P(r), the published form.
    Verbatim,
    /// Divides by sum_i P(w|r_i) P(r_i), a proper Bayes posterior.
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduce {
    Sum,
    Mean,
}

/// The verbatim posterior for a single pair.
pub fn posterior_verbatim(pwr: f64, prior: f64) -> f64 {
    pwr * prior
}

/// Posteriors P(r_i | w_j) for one word column.
pub fn posterior_column(column: &[f64], priors: &[f64], mode: PosteriorMode) -> Result<Vec<f64>> {
    if column.len() != priors.len() {
        return Err(Error::shape(
            "posterior",
            format!("{} relevances vs {} priors", column.len(), priors.len()),
        ));
    }
    let products: Vec<f64> = column.iter().zip(priors).map(|(p, q)| p * q).collect();
    match mode {
        PosteriorMode::Verbatim => Ok(products),
        PosteriorMode::Normalized => {
            let denom: f64 = products.iter().sum();
            if denom <= 0.0 {
                return Err(Error::invalid(
                    "posterior",
                    "normalized mode with zero evidence".to_string(),
                ));
            }
            Ok(products.iter().map(|p| p / denom).collect())
        }
    }
}

/// Full n x k posterior table for a relevance matrix.
pub fn posterior_matrix(
    m: &RelevanceMatrix,
    prior: &RegionPrior,
    mode: PosteriorMode,
) -> Result<Vec<f64>> {
    if prior.values.len() != m.n_regions {
        return Err(Error::shape(
            "posterior",
            format!("{} priors for {} regions", prior.values.len(), m.n_regions),
        ));
    }
    let mut out = vec![0.0; m.n_regions * m.n_words];
    for j in 0..m.n_words {
        let column: Vec<f64> = (0..m.n_regions).map(|i| m.get(i, j)).collect();
        let post = posterior_column(&column, &prior.values, mode)?;
        for i in 0..m.n_regions {
            out[i * m.n_words + j] = post[i];
        }
    }
    Ok(out)
}

/// Sum over the selected pairs of (1 - P(r_i | w_j)); `Mean` divides by
/// the selection size. An empty selection contributes zero.
pub fn ie_loss(
    m: &RelevanceMatrix,
    sel: &PairSelection,
    prior: &RegionPrior,
    mode: PosteriorMode,
    reduce: Reduce,
) -> Result<f64> {
    if sel.is_empty() {
        return Ok(0.0);
    }
    let posteriors = posterior_matrix(m, prior, mode)?;
    let mut total = 0.0;
    for p in &sel.pairs {
        total += 1.0 - posteriors[p.region * m.n_words + p.word];
    }
    Ok(match reduce {
        Reduce::Sum => total,
        Reduce::Mean => total / sel.len() as f64,
    })
}

/// ce + lambda * ie.
pub fn total_loss(ce: f64, ie: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::invalid("total_loss", format!("lambda {lambda} < 0")));
    }
    Ok(ce + lambda * ie)
}

/// Differentiable IE term over a relevance-rows node [n, k]. The
/// selection itself is a discrete decision made on the forward values;
/// gradients flow through the selected probabilities.
pub fn ie_loss_node(
    tape: &mut Tape,
    rows: NodeId,
    sel: &PairSelection,
    prior: &RegionPrior,
    mode: PosteriorMode,
    reduce: Reduce,
) -> Result<NodeId> {
    let sh = tape.shape(rows).to_vec();
    if sh.len() != 2 {
        return Err(Error::shape("ie_loss", format!("rows {sh:?}")));
    }
    let (n, k) = (sh[0], sh[1]);
    if prior.values.len() != n {
        return Err(Error::shape("ie_loss", format!("{} priors for {n} regions", prior.values.len())));
    }
    if sel.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let post = match mode {
        PosteriorMode::Verbatim => {
            let idx: Vec<usize> = sel.pairs.iter().map(|p| p.region * k + p.word).collect();
            let picked = tape.gather(rows, &idx)?;
            let priors: Vec<f64> = sel.pairs.iter().map(|p| prior.values[p.region]).collect();
            let pn = tape.constant(priors, vec![sel.len()]);
            tape.mul(picked, pn)?
        }
        PosteriorMode::Normalized => {
            let prior_col = tape.constant(prior.values.clone(), vec![n]);
            let mut parts = Vec::with_capacity(sel.len());
            for p in &sel.pairs {
                let col_idx: Vec<usize> = (0..n).map(|i| i * k + p.word).collect();
                let col = tape.gather(rows, &col_idx)?;
                let weighted = tape.mul(col, prior_col)?;
                let denom = tape.sum_all(weighted)?;
                if tape.data(denom)[0] <= 0.0 {
                    return Err(Error::invalid(
                        "ie_loss",
                        "normalized mode with zero evidence".to_string(),
                    ));
                }
                let num = tape.gather(rows, &[p.region * k + p.word])?;
                let num = tape.affine(num, prior.values[p.region], 0.0)?;
                parts.push(tape.div(num, denom)?);
            }
            tape.concat(&parts, 0)?
        }
    };
    let complement = tape.affine(post, -1.0, 1.0)?;
    let sum = tape.sum_all(complement)?;
    match reduce {
        Reduce::Sum => Ok(sum),
        Reduce::Mean => tape.affine(sum, 1.0 / sel.len() as f64, 0.0),
    }
}

/// ce + lambda * ie on the tape, differentiable through both terms.
pub fn total_loss_node(tape: &mut Tape, ce: NodeId, ie: NodeId, lambda: f64) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::invalid("total_loss", format!("lambda {lambda} < 0")));
    }
    let weighted = tape.affine(ie, lambda, 0.0)?;
    tape.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn fig4_matrix() -> RelevanceMatrix {
        let words: Vec<String> =
            ["a", "woman", "sitting", "in", "front", "of", "a", "laptop", "computer"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let boxes = vec![
            BBox::new(0.0, 0.0, 16.0, 16.0),
            BBox::new(16.0, 0.0, 16.0, 16.0),
            BBox::new(32.0, 0.0, 16.0, 16.0),
        ];
        let values = vec![
            0.152, 0.579, 0.056, 0.009, 0.006, 0.028, 0.152, 0.001, 0.012, // r1
            0.005, 0.004, 0.953, 0.001, 0.020, 0.001, 0.005, 0.002, 0.003, // r2
            0.111, 0.111, 0.111, 0.111, 0.111, 0.111, 0.111, 0.111, 0.111, // r3
        ];
        RelevanceMatrix::new(values, 3, 9, boxes, words).unwrap()
    }

    #[test]
    fn selection_on_strong_pairs_matches_the_known_table() {
        let m = fig4_matrix();
        let sel = select_pairs(&m, 2.0);
        assert_eq!(sel.threshold(), 2.0 / 9.0);
        assert_eq!(sel.len(), 2);
        assert_eq!((sel.pairs[0].region, sel.pairs[0].word), (0, 1));
        assert_eq!(m.words[sel.pairs[0].word], "woman");
        assert!((sel.pairs[0].relevance - 0.579).abs() < 1e-12);
        assert_eq!((sel.pairs[1].region, sel.pairs[1].word), (1, 2));
        assert_eq!(m.words[sel.pairs[1].word], "sitting");
        assert!((sel.pairs[1].relevance - 0.953).abs() < 1e-12);
    }

    #[test]
    fn uniform_matrix_selects_nothing() {
        let m = RelevanceMatrix::new(
            vec![0.25; 8],
            2,
            4,
            vec![BBox::new(0.0, 0.0, 8.0, 8.0); 2],
            (0..4).map(|i| format!("w{i}")).collect(),
        )
        .unwrap();
        assert!(select_pairs(&m, 2.0).is_empty());
    }

    #[test]
    fn vanishing_factor_selects_every_pair() {
        let m = fig4_matrix();
        let sel = select_pairs(&m, 1e-9);
        assert_eq!(sel.len(), 27);
        assert_eq!(PairSelection::all(&m).len(), 27);
    }

    #[test]
    fn selection_is_monotone_in_the_factor() {
        let m = fig4_matrix();
        let mut previous: Option<Vec<(usize, usize)>> = None;
        for c in [0.1, 0.5, 1.0, 2.0, 4.0, 9.0] {
            let sel: Vec<(usize, usize)> =
                select_pairs(&m, c).pairs.iter().map(|p| (p.region, p.word)).collect();
            if let Some(prev) = &previous {
                assert!(sel.iter().all(|p| prev.contains(p)), "c={c} must be a subset");
            }
            previous = Some(sel);
        }
    }

    #[test]
    fn verbatim_posterior_arithmetic() {
        assert!((posterior_verbatim(0.953, 1.0 / 3.0) - 0.31767).abs() < 1e-5);
        assert_eq!(posterior_verbatim(1.0, 1.0), 1.0);
    }

    #[test]
    fn normalized_posterior_with_equal_priors_is_column_normalization() {
        let column = [0.5, 0.25, 0.125];
        let priors = [1.0 / 3.0; 3];
        let post = posterior_column(&column, &priors, PosteriorMode::Normalized).unwrap();
        let total: f64 = column.iter().sum();
        for (p, c) in post.iter().zip(&column) {
            assert!((p - c / total).abs() < 1e-12);
        }
        let s: f64 = post.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_posterior_rejects_zero_evidence() {
        let e = posterior_column(&[0.0, 0.0], &[0.5, 0.5], PosteriorMode::Normalized);
        assert!(e.is_err());
    }

    #[test]
    fn verbatim_posterior_never_exceeds_prior() {
        let m = fig4_matrix();
        let prior = RegionPrior::uniform(3);
        let post = posterior_matrix(&m, &prior, PosteriorMode::Verbatim).unwrap();
        for i in 0..3 {
            for j in 0..9 {
                assert!(post[i * 9 + j] <= prior.values[i] + 1e-15);
            }
        }
    }

    #[test]
    fn ie_loss_of_empty_selection_is_zero() {
        let m = fig4_matrix();
        let sel = select_pairs(&m, 100.0);
        assert!(sel.is_empty());
        let l = ie_loss(&m, &sel, &RegionPrior::uniform(3), PosteriorMode::Verbatim, Reduce::Sum)
            .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn perfect_posteriors_give_zero_loss() {
        let m = RelevanceMatrix::new(
            vec![1.0],
            1,
            1,
            vec![BBox::new(0.0, 0.0, 8.0, 8.0)],
            vec!["woman".to_string()],
        )
        .unwrap();
        let sel = select_pairs(&m, 0.5);
        assert_eq!(sel.len(), 1);
        let l = ie_loss(&m, &sel, &RegionPrior::uniform(1), PosteriorMode::Verbatim, Reduce::Sum)
            .unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn known_posterior_pair_sums_and_means() {
        // posteriors {0.953/3, 0.5}: sum of complements ~ 1.18233,
        // mean ~ 0.591165
        let values = vec![0.953, 0.047, 0.5, 0.5];
        let m = RelevanceMatrix::new(
            values,
            2,
            2,
            vec![BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(8.0, 0.0, 8.0, 8.0)],
            vec!["woman".to_string(), "sitting".to_string()],
        )
        .unwrap();
        let prior =
            RegionPrior::custom(vec![1.0 / 3.0, 1.0], PriorMode::Uniform).unwrap();
        let sel = PairSelection {
            pairs: vec![
                SelectedPair { region: 0, word: 0, relevance: 0.953 },
                SelectedPair { region: 1, word: 0, relevance: 0.5 },
            ],
            factor: 2.0,
            word_count: 2,
        };
        let sum = ie_loss(&m, &sel, &prior, PosteriorMode::Verbatim, Reduce::Sum).unwrap();
        let mean = ie_loss(&m, &sel, &prior, PosteriorMode::Verbatim, Reduce::Mean).unwrap();
        assert!((sum - 1.18233).abs() < 1e-5, "sum {sum}");
        assert!((mean - 0.591165).abs() < 1e-5, "mean {mean}");
    }

    #[test]
    fn loss_bounds_and_monotonicity_in_relevance() {
        let mut rng = crate::rng::SplitMix64::new(40);
        for _ in 0..50 {
            let (n, k) = (1 + rng.next_below(4) as usize, 1 + rng.next_below(4) as usize);
            let mut values = vec![0.0; n * k];
            for i in 0..n {
                let mut row: Vec<f64> = (0..k).map(|_| rng.next_f64() + 1e-6).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                values[i * k..(i + 1) * k].copy_from_slice(&row);
            }
            let m = RelevanceMatrix::new(
                values.clone(),
                n,
                k,
                vec![BBox::new(0.0, 0.0, 8.0, 8.0); n],
                (0..k).map(|j| format!("w{j}")).collect(),
            )
            .unwrap();
            let sel = select_pairs(&m, 1.0);
            let prior = RegionPrior::uniform(n);
            let sum = ie_loss(&m, &sel, &prior, PosteriorMode::Verbatim, Reduce::Sum).unwrap();
            assert!((0.0..=sel.len() as f64).contains(&sum));
            if !sel.is_empty() {
                let mean = ie_loss(&m, &sel, &prior, PosteriorMode::Verbatim, Reduce::Mean).unwrap();
                assert!((0.0..=1.0).contains(&mean));

                // raising one selected relevance (same selection) cannot
                // raise the loss
                let p0 = sel.pairs[0];
                let mut raised = values.clone();
                raised[p0.region * k + p0.word] =
                    (raised[p0.region * k + p0.word] + 0.05).min(1.0);
                let m2 = RelevanceMatrix { values: raised, ..m.clone() };
                let sum2 =
                    ie_loss(&m2, &sel, &prior, PosteriorMode::Verbatim, Reduce::Sum).unwrap();
                assert!(sum2 <= sum + 1e-12);
            }
        }
    }

    #[test]
    fn normalized_posteriors_per_word_sum_to_one() {
        let m = fig4_matrix();
        let prior = RegionPrior::uniform(3);
        let post = posterior_matrix(&m, &prior, PosteriorMode::Normalized).unwrap();
        for j in 0..9 {
            let s: f64 = (0..3).map(|i| post[i * 9 + j]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_degenerate_cases() {
        assert_eq!(total_loss(1.25, 9.0, 0.0).unwrap(), 1.25);
        assert_eq!(total_loss(0.0, 0.5, 1.0).unwrap(), 0.5);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn area_prior_is_proportional_and_uniform_is_equal() {
        let boxes = [BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(0.0, 0.0, 8.0, 16.0)];
        let p = RegionPrior::area_proportional(&boxes).unwrap();
        assert!((p.values[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.values[1] - 2.0 / 3.0).abs() < 1e-12);
        let u = RegionPrior::uniform(4);
        assert!(u.values.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn tape_ie_matches_plain_and_passes_grad_check() {
        let m = fig4_matrix();
        let sel = select_pairs(&m, 2.0);
        let prior = RegionPrior::uniform(3);
        for mode in [PosteriorMode::Verbatim, PosteriorMode::Normalized] {
            for reduce in [Reduce::Sum, Reduce::Mean] {
                let plain = ie_loss(&m, &sel, &prior, mode, reduce).unwrap();
                let mut tape = Tape::new();
                let rows = tape.constant(m.values.clone(), vec![3, 9]);
                let node = ie_loss_node(&mut tape, rows, &sel, &prior, mode, reduce).unwrap();
                assert!((tape.data(node)[0] - plain).abs() < 1e-12);
            }
        }

        // gradient of ce + lambda*ie through both branches
        let sel2 = sel.clone();
        let prior2 = prior.clone();
        let f = move |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let rows = tape.softmax(ids[0])?;
            let ie = ie_loss_node(tape, rows, &sel2, &prior2, PosteriorMode::Verbatim, Reduce::Mean)?;
            let ce = tape.cross_entropy(ids[1], &[1, 0], None)?;
            total_loss_node(tape, ce, ie, 0.7)
        };
        let mut rng = crate::rng::SplitMix64::new(9);
        let scores = Tensor::randn(&[3, 9], 1.0, &mut rng);
        let logits = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let err = grad_check(&f, &[scores, logits], 1e-5).unwrap();
        assert!(err <= 1e-4, "total-loss grad check: {err}");
    }
}
