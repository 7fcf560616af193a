//! Caption metrics (BLEU@N, ROUGE-L, CIDEr-D) and multi-label recognition
//! scores.
//!
//! CIDEr-D follows the consensus-evaluation definition exactly: per-n-gram
//! TF-IDF vectors with document frequencies over images, candidate counts
//! clipped to reference counts, a Gaussian length penalty (σ = 6), the mean
//! over n = 1..4 and over references, scaled by 10.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{HipError, Result};

/// Lowercases and splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1f}")).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU@N: geometric mean of clipped n-gram precisions times
/// the brevity penalty. No smoothing — any zero precision zeroes the score.
pub fn bleu(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    validate_bleu_inputs(references, n)?;
    if candidate.is_empty() {
        eprintln!("warning: BLEU of an empty candidate is 0");
        return Ok(0.0);
    }
    let mut clipped = vec![0usize; n];
    let mut totals = vec![0usize; n];
    accumulate_clipped_counts(candidate, references, n, &mut clipped, &mut totals);
    let c = candidate.len();
    let r = closest_reference_length(c, references);
    Ok(bleu_from_aggregates(&clipped, &totals, c, r))
}

/// Corpus-level BLEU@N: clipped counts and lengths pooled over sentences
/// before the precision/brevity computation.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(HipError::Input(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut clipped = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut c_total = 0usize;
    let mut r_total = 0usize;
    for (candidate, refs) in candidates.iter().zip(references) {
        validate_bleu_inputs(refs, n)?;
        if candidate.is_empty() {
            eprintln!("warning: BLEU of an empty candidate is 0");
            continue;
        }
        accumulate_clipped_counts(candidate, refs, n, &mut clipped, &mut totals);
        c_total += candidate.len();
        r_total += closest_reference_length(candidate.len(), refs);
    }
    if c_total == 0 {
        return Ok(0.0);
    }
    Ok(bleu_from_aggregates(&clipped, &totals, c_total, r_total))
}

fn validate_bleu_inputs(references: &[Vec<String>], n: usize) -> Result<()> {
    if !(1..=4).contains(&n) {
        return Err(HipError::Input(format!("BLEU order must be 1..=4, got {n}")));
    }
    if references.is_empty() {
        return Err(HipError::Input("BLEU needs at least one reference".into()));
    }
    Ok(())
}

fn accumulate_clipped_counts(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
    clipped: &mut [usize],
    totals: &mut [usize],
) {
    for k in 1..=n {
        let cand_counts = ngram_counts(candidate, k);
        let mut max_ref: BTreeMap<&str, usize> = BTreeMap::new();
        let ref_counts: Vec<BTreeMap<String, usize>> =
            references.iter().map(|r| ngram_counts(r, k)).collect();
        for counts in &ref_counts {
            for (gram, &count) in counts {
                let slot = max_ref.entry(gram.as_str()).or_insert(0);
                *slot = (*slot).max(count);
            }
        }
        for (gram, &count) in &cand_counts {
            totals[k - 1] += count;
            clipped[k - 1] += count.min(*max_ref.get(gram.as_str()).unwrap_or(&0));
        }
    }
}

fn closest_reference_length(candidate_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| {
            let diff = len.abs_diff(candidate_len);
            (diff, len)
        })
        .expect("at least one reference")
}

fn bleu_from_aggregates(clipped: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    let n = clipped.len();
    let mut log_sum = 0.0;
    for k in 0..n {
        if totals[k] == 0 || clipped[k] == 0 {
            return 0.0;
        }
        log_sum += (clipped[k] as f64 / totals[k] as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    precision * bp
}

/// ROUGE-L: LCS-based F-measure with β² = 1.2, maximized over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(HipError::Input("ROUGE-L needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    const BETA_SQ: f64 = 1.2;
    let mut best = 0.0f64;
    for reference in references {
        if reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, reference) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / candidate.len() as f64;
        let r = lcs / reference.len() as f64;
        let f = ((1.0 + BETA_SQ) * r * p) / (r + BETA_SQ * p);
        best = best.max(f);
    }
    Ok(best)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Reference corpus for CIDEr-D: document frequencies of n-grams over
/// images (an n-gram counts once per image, however many of that image's
/// references contain it).
#[derive(Clone, Debug)]
pub struct Corpus {
    doc_count: usize,
    df: Vec<BTreeMap<String, f64>>,
}

impl Corpus {
    /// Builds document frequencies from per-image reference sets.
    pub fn from_references(refs_per_image: &[Vec<Vec<String>>]) -> Result<Corpus> {
        let mut df = vec![BTreeMap::new(); CIDER_N];
        for (i, refs) in refs_per_image.iter().enumerate() {
            if refs.is_empty() {
                return Err(HipError::Input(format!("image {i} has no references")));
            }
            for n in 1..=CIDER_N {
                let mut seen: BTreeSet<String> = BTreeSet::new();
                for r in refs {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
                for gram in seen {
                    *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
                }
            }
        }
        Ok(Corpus {
            doc_count: refs_per_image.len(),
            df,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    fn log_doc_count(&self) -> f64 {
        (self.doc_count as f64).ln()
    }

    /// TF-IDF vector per n, plus per-n L2 norms and the bigram token count
    /// used by the length penalty.
    fn tfidf(&self, tokens: &[String]) -> (Vec<BTreeMap<String, f64>>, [f64; CIDER_N], usize) {
        let ref_len = self.log_doc_count();
        let mut vecs = vec![BTreeMap::new(); CIDER_N];
        let mut norms = [0.0f64; CIDER_N];
        let mut length = 0usize;
        for n in 1..=CIDER_N {
            for (gram, count) in ngram_counts(tokens, n) {
                let df = self.df[n - 1].get(&gram).copied().unwrap_or(0.0);
                let idf = ref_len - df.max(1.0).ln();
                let w = count as f64 * idf;
                norms[n - 1] += w * w;
                if n == 2 {
                    length += count;
                }
                vecs[n - 1].insert(gram, w);
            }
        }
        for norm in &mut norms {
            *norm = norm.sqrt();
        }
        (vecs, norms, length)
    }
}

/// CIDEr-D of one candidate against its references, under a prebuilt
/// corpus. Returns a value in [0, 10].
pub fn cider_d(candidate: &[String], references: &[Vec<String>], corpus: &Corpus) -> Result<f64> {
    if corpus.doc_count == 0 {
        return Err(HipError::State("CIDEr-D corpus is empty; build it first".into()));
    }
    if references.is_empty() {
        return Err(HipError::Input("CIDEr-D needs at least one reference".into()));
    }
    let (hyp_vec, hyp_norm, hyp_len) = corpus.tfidf(candidate);
    let mut per_n = [0.0f64; CIDER_N];
    for reference in references {
        let (ref_vec, ref_norm, ref_len) = corpus.tfidf(reference);
        let delta = hyp_len as f64 - ref_len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n in 0..CIDER_N {
            let mut dot = 0.0;
            for (gram, &h) in &hyp_vec[n] {
                if let Some(&r) = ref_vec[n].get(gram) {
                    dot += h.min(r) * r;
                }
            }
            if hyp_norm[n] != 0.0 && ref_norm[n] != 0.0 {
                dot /= hyp_norm[n] * ref_norm[n];
            }
            per_n[n] += dot * penalty;
        }
    }
    let mean_over_n = per_n.iter().sum::<f64>() / CIDER_N as f64;
    Ok(mean_over_n / references.len() as f64 * 10.0)
}

/// The six top-3 multi-label recognition scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MultiLabelScores {
    pub c_precision: f64,
    pub c_recall: f64,
    pub c_f1: f64,
    pub o_precision: f64,
    pub o_recall: f64,
    pub o_f1: f64,
}

/// Per-class (macro, over classes with at least one true instance) and
/// overall (micro) precision/recall/F1 for top-3 label prediction.
pub fn multilabel_scores(
    predicted: &[Vec<usize>],
    truth: &[Vec<usize>],
    num_classes: usize,
) -> Result<MultiLabelScores> {
    if predicted.len() != truth.len() {
        return Err(HipError::Input(format!(
            "{} predictions but {} truth sets",
            predicted.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (pred, gold) in predicted.iter().zip(truth) {
        let pred: BTreeSet<usize> = pred.iter().copied().collect();
        let gold: BTreeSet<usize> = gold.iter().copied().collect();
        for &c in &pred {
            if c >= num_classes {
                return Err(HipError::Input(format!(
                    "predicted label {c} out of range for {num_classes} classes"
                )));
            }
            pred_count[c] += 1;
            if gold.contains(&c) {
                tp[c] += 1;
            }
        }
        for &c in &gold {
            if c >= num_classes {
                return Err(HipError::Input(format!(
                    "true label {c} out of range for {num_classes} classes"
                )));
            }
            true_count[c] += 1;
        }
    }

    let mut c_p_sum = 0.0;
    let mut c_r_sum = 0.0;
    let mut active = 0usize;
    for c in 0..num_classes {
        if true_count[c] == 0 {
            continue; // class absent from the truth set: excluded from macro
        }
        active += 1;
        c_p_sum += if pred_count[c] > 0 {
            tp[c] as f64 / pred_count[c] as f64
        } else {
            0.0
        };
        c_r_sum += tp[c] as f64 / true_count[c] as f64;
    }
    let c_precision = if active > 0 { c_p_sum / active as f64 } else { 0.0 };
    let c_recall = if active > 0 { c_r_sum / active as f64 } else { 0.0 };

    let tp_total: usize = tp.iter().sum();
    let pred_total: usize = pred_count.iter().sum();
    let true_total: usize = true_count.iter().sum();
    let o_precision = if pred_total > 0 {
        tp_total as f64 / pred_total as f64
    } else {
        0.0
    };
    let o_recall = if true_total > 0 {
        tp_total as f64 / true_total as f64
    } else {
        0.0
    };

    Ok(MultiLabelScores {
        c_precision,
        c_recall,
        c_f1: f1(c_precision, c_recall),
        o_precision,
        o_recall,
        o_f1: f1(o_precision, o_recall),
    })
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
