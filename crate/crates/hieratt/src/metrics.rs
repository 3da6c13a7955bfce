//! Caption evaluation metrics: BLEU@1-4 (clipped modified n-gram
//! precision, brevity penalty, epsilon-smoothed), ROUGE-L (LCS-based F
//! with beta = 1.2) and basic CIDEr (TF-IDF n-gram cosine, scaled by 10).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub count: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Brevity penalty and per-order precisions for one candidate.
pub fn bleu_components(
    candidate: &[String],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<(f64, Vec<f64>)> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::invalid("bleu", format!("N={max_n} outside 1..=4")));
    }
    if references.is_empty() {
        return Err(Error::Empty("bleu: no references"));
    }
    let c = candidate.len();
    // closest reference length; ties toward the shorter reference
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - c as i64).abs(), len))
        .unwrap();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand_counts {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(best_ref);
        }
        let p = if total == 0 {
            BLEU_EPSILON
        } else {
            (clipped as f64).max(BLEU_EPSILON) / total as f64
        };
        precisions.push(p);
    }
    Ok((bp, precisions))
}

/// Sentence BLEU: BP * exp(mean of ln p_n over n = 1..N).
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if candidate.is_empty() {
        // still validates its arguments
        bleu_components(&[], references, max_n)?;
        return Ok(0.0);
    }
    let (bp, precisions) = bleu_components(candidate, references, max_n)?;
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
    Ok(bp * log_mean.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-score with recall weighted by beta = 1.2.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * recall * precision / (recall + b2 * precision)
}

fn tfidf_vector(
    tokens: &[String],
    n: usize,
    idf: &BTreeMap<Vec<String>, f64>,
    n_images: f64,
) -> BTreeMap<Vec<String>, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    for (gram, v) in out.iter_mut() {
        *v *= idf.get(gram).copied().unwrap_or_else(|| n_images.ln());
    }
    out
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-image CIDEr scores: mean over n of 10 x (cosine of candidate vs
/// each reference, averaged). IDF comes from the reference corpus.
pub fn cider_scores(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("cider"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "cider",
            format!("{} candidates vs {} reference sets", candidates.len(), references.len()),
        ));
    }
    if candidates.len() < 2 {
        return Err(Error::invalid("cider", "corpus must hold at least 2 images".to_string()));
    }
    let n_images = references.len() as f64;
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=4 {
        // document frequency over the reference sets of the corpus
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeMap<Vec<String>, ()> = BTreeMap::new();
            for r in refs {
                if r.len() >= n {
                    for w in r.windows(n) {
                        seen.entry(w.to_vec()).or_insert(());
                    }
                }
            }
            for gram in seen.into_keys() {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        let idf: BTreeMap<Vec<String>, f64> =
            df.into_iter().map(|(g, d)| (g, (n_images / d.max(1) as f64).ln())).collect();
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            let cv = tfidf_vector(cand, n, &idf, n_images);
            let sim: f64 = refs
                .iter()
                .map(|r| cosine(&cv, &tfidf_vector(r, n, &idf, n_images)))
                .sum::<f64>()
                / refs.len() as f64;
            scores[i] += CIDER_SCALE * sim / 4.0;
        }
    }
    Ok(scores)
}

pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    let scores = cider_scores(candidates, references)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// All metrics over aligned candidate/reference lists. BLEU and ROUGE-L
/// are sentence-level means (ROUGE-L takes the best reference per image).
pub fn corpus_report(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<MetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "corpus_report",
            format!("{} candidates vs {} reference sets", candidates.len(), references.len()),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("corpus_report"));
    }
    let count = candidates.len();
    let mut bleus = [0.0f64; 4];
    let mut rouge = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        for (n, slot) in bleus.iter_mut().enumerate() {
            *slot += bleu(cand, refs, n + 1)?;
        }
        rouge += refs.iter().map(|r| rouge_l(cand, r)).fold(0.0, f64::max);
    }
    let c = count as f64;
    Ok(MetricReport {
        bleu1: bleus[0] / c,
        bleu2: bleus[1] / c,
        bleu3: bleus[2] / c,
        bleu4: bleus[3] / c,
        rouge_l: rouge / c,
        cider: cider(candidates, references)?,
        count,
    })
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    // ── independent brute-force oracles ─────────────────────────────

    /// O(n^2) string-slice BLEU written against the published formulas,
    /// sharing no code with the implementation above.
    fn bleu_oracle(cand: &[String], refs: &[Vec<String>], max_n: usize) -> f64 {
        if cand.is_empty() {
            return 0.0;
        }
        let c = cand.len() as f64;
        let mut r_best = usize::MAX;
        let mut r_dist = f64::INFINITY;
        for r in refs {
            let d = (r.len() as f64 - c).abs();
            if d < r_dist || (d == r_dist && r.len() < r_best) {
                r_dist = d;
                r_best = r.len();
            }
        }
        let bp = if c > r_best as f64 { 1.0 } else { (1.0 - r_best as f64 / c).exp() };
        let mut log_sum = 0.0;
        for n in 1..=max_n {
            let grams: Vec<&[String]> = if cand.len() >= n {
                (0..=cand.len() - n).map(|i| &cand[i..i + n]).collect()
            } else {
                Vec::new()
            };
            let total = grams.len() as f64;
            let mut clipped = 0usize;
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_cand = grams.iter().filter(|x| *x == g).count();
                let best = refs
                    .iter()
                    .map(|r| {
                        if r.len() < n {
                            0
                        } else {
                            (0..=r.len() - n).filter(|&i| &r[i..i + n] == *g).count()
                        }
                    })
                    .max()
                    .unwrap_or(0);
                clipped += in_cand.min(best);
            }
            let p = if total == 0.0 { 1e-9 } else { (clipped as f64).max(1e-9) / total };
            log_sum += p.ln();
        }
        bp * (log_sum / max_n as f64).exp()
    }

    /// Recursive-memo LCS, separate from the DP in the implementation.
    fn lcs_oracle(a: &[String], b: &[String]) -> usize {
        fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
            if i == a.len() || j == b.len() {
                return 0;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let v = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
            memo[i][j] = Some(v);
            v
        }
        let mut memo = vec![vec![None; b.len()]; a.len()];
        go(a, b, 0, 0, &mut memo)
    }

    fn rouge_oracle(cand: &[String], reference: &[String]) -> f64 {
        if cand.is_empty() || reference.is_empty() {
            return 0.0;
        }
        let l = lcs_oracle(cand, reference) as f64;
        if l == 0.0 {
            return 0.0;
        }
        let r = l / reference.len() as f64;
        let p = l / cand.len() as f64;
        (1.0 + 1.44) * r * p / (r + 1.44 * p)
    }

    fn random_sentence(rng: &mut SplitMix64, max_len: usize) -> Vec<String> {
        let alphabet = ["a", "red", "circle", "blue", "square", "cat", "sat", "the"];
        let len = 1 + rng.next_below(max_len as u64) as usize;
        (0..len).map(|_| alphabet[rng.next_below(8) as usize].to_string()).collect()
    }

    // ── BLEU ─────────────────────────────────────────────────────────

    #[test]
    fn identical_sentences_score_one_for_all_orders() {
        let s = words("a red circle left of a blue square");
        for n in 1..=4 {
            assert_eq!(bleu(&s, &[s.clone()], n).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_overlap_is_epsilon_floored() {
        let c = words("cat sat mat");
        let r = words("a red circle");
        let score = bleu(&c, &[r], 1).unwrap();
        assert!(score > 0.0 && score < 1e-8);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(bleu(&[], &[words("a b")], 4).unwrap(), 0.0);
    }

    #[test]
    fn invalid_order_errors() {
        assert!(bleu(&words("a"), &[words("a")], 0).is_err());
        assert!(bleu(&words("a"), &[words("a")], 5).is_err());
    }

    #[test]
    fn matches_brute_force_oracle_on_random_sentences() {
        let mut rng = SplitMix64::new(2024);
        for _ in 0..300 {
            let cand = random_sentence(&mut rng, 8);
            let refs = vec![random_sentence(&mut rng, 8), random_sentence(&mut rng, 8)];
            for n in 1..=4 {
                let got = bleu(&cand, &refs, n).unwrap();
                let want = bleu_oracle(&cand, &refs, n);
                assert!(
                    (got - want).abs() <= 1e-9,
                    "bleu@{n} {got} vs oracle {want} on {cand:?} / {refs:?}"
                );
            }
        }
    }

    #[test]
    fn score_decomposes_into_bp_and_precisions() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let cand = random_sentence(&mut rng, 8);
            let refs = vec![random_sentence(&mut rng, 8)];
            let (bp, ps) = bleu_components(&cand, &refs, 4).unwrap();
            let score = bleu(&cand, &refs, 4).unwrap();
            let recomposed = bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
            assert!((score - recomposed).abs() < 1e-15);
        }
        // when all p_n are equal the geometric mean collapses to BP * p1
        let cand = words("a a a a");
        let refs = vec![words("a a a a a")];
        let (bp, ps) = bleu_components(&cand, &refs, 4).unwrap();
        assert!(ps.windows(2).all(|w| w[0] == w[1]));
        let score = bleu(&cand, &refs, 4).unwrap();
        assert!((score - bp * ps[0]).abs() < 1e-12);
    }

    // ── ROUGE-L ──────────────────────────────────────────────────────

    #[test]
    fn rouge_identical_is_one() {
        let s = words("a red circle");
        assert!((rouge_l(&s, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_worked_example() {
        let c = words("the cat");
        let r = words("the cat sat");
        let f = rouge_l(&c, &r);
        // R = 2/3, P = 1 -> F = 2.44 * (2/3) / (2/3 + 1.44)
        let expect = 2.44 * (2.0 / 3.0) / (2.0 / 3.0 + 1.44);
        assert!((f - expect).abs() < 1e-12);
        assert!((f - 0.77215).abs() < 1e-5);
    }

    #[test]
    fn rouge_disjoint_and_empty_are_zero() {
        assert_eq!(rouge_l(&words("x y"), &words("a b")), 0.0);
        assert_eq!(rouge_l(&[], &words("a")), 0.0);
        assert_eq!(rouge_l(&words("a"), &[]), 0.0);
    }

    #[test]
    fn rouge_matches_recursive_oracle() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..300 {
            let c = random_sentence(&mut rng, 10);
            let r = random_sentence(&mut rng, 10);
            let got = rouge_l(&c, &r);
            let want = rouge_oracle(&c, &r);
            assert!((got - want).abs() <= 1e-9, "{got} vs {want} on {c:?}/{r:?}");
        }
    }

    // ── CIDEr ────────────────────────────────────────────────────────

    #[test]
    fn perfect_candidate_on_distinct_corpus_scores_ten() {
        let refs: Vec<Vec<Vec<String>>> = vec![
            vec![words("a red circle left of a blue square")],
            vec![words("a green triangle above a yellow circle")],
            vec![words("a blue square and a red triangle")],
        ];
        let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
        let scores = cider_scores(&cands, &refs).unwrap();
        for s in &scores {
            assert!((s - 10.0).abs() <= 1e-9, "per-image {s}");
        }
        assert!((cider(&cands, &refs).unwrap() - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn zero_ngram_overlap_scores_zero() {
        let refs = vec![vec![words("a red circle")], vec![words("a blue square")]];
        let cands = vec![words("cat sat mat"), words("dog ran far")];
        assert_eq!(cider(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn image_order_permutes_per_image_scores() {
        let refs = vec![
            vec![words("a red circle")],
            vec![words("a blue square and a red circle")],
            vec![words("a green triangle")],
        ];
        let cands = vec![words("a red circle"), words("a blue square"), words("a triangle")];
        let base = cider_scores(&cands, &refs).unwrap();
        let perm = [2usize, 0, 1];
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let cands_p: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let scores_p = cider_scores(&cands_p, &refs_p).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((scores_p[j] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cider_requires_at_least_two_images() {
        let e = cider(&[words("a")], &[vec![words("a")]]);
        assert!(e.is_err());
        assert!(cider(&[], &[]).is_err());
    }

    // ── corpus report ────────────────────────────────────────────────

    #[test]
    fn self_evaluation_attains_documented_maxima() {
        let sentences = [
            "a red circle left of a blue square",
            "a green triangle above a yellow circle",
            "a blue square and a red triangle and a green circle",
        ];
        let cands: Vec<Vec<String>> = sentences.iter().map(|s| words(s)).collect();
        let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
        let report = corpus_report(&cands, &refs).unwrap();
        assert_eq!(report.bleu1, 1.0);
        assert_eq!(report.bleu2, 1.0);
        assert_eq!(report.bleu3, 1.0);
        assert_eq!(report.bleu4, 1.0);
        assert!((report.rouge_l - 1.0).abs() < 1e-12);
        assert!((report.cider - 10.0).abs() < 1e-9);
        assert_eq!(report.count, 3);
    }

    #[test]
    fn report_serializes_with_exactly_the_documented_keys() {
        let cands = vec![words("a b c d"), words("b c d e")];
        let refs = vec![vec![words("a b c d")], vec![words("b c d f")]];
        let report = corpus_report(&cands, &refs).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["bleu1", "bleu2", "bleu3", "bleu4", "cider", "count", "rouge_l"]);
    }

    #[test]
    fn report_values_equal_direct_metric_calls() {
        let mut rng = SplitMix64::new(5);
        let cands: Vec<Vec<String>> = (0..6).map(|_| random_sentence(&mut rng, 9)).collect();
        let refs: Vec<Vec<Vec<String>>> =
            (0..6).map(|_| vec![random_sentence(&mut rng, 9)]).collect();
        let report = corpus_report(&cands, &refs).unwrap();
        let mean = |f: &dyn Fn(&Vec<String>, &Vec<Vec<String>>) -> f64| -> f64 {
            cands.iter().zip(&refs).map(|(c, r)| f(c, r)).sum::<f64>() / cands.len() as f64
        };
        assert_eq!(report.bleu1, mean(&|c, r| bleu(c, r, 1).unwrap()));
        assert_eq!(report.bleu4, mean(&|c, r| bleu(c, r, 4).unwrap()));
        assert_eq!(report.rouge_l, mean(&|c, r| rouge_l(c, &r[0])));
        assert_eq!(report.cider, cider(&cands, &refs).unwrap());
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(corpus_report(&[words("a")], &[]).is_err());
    }
}
