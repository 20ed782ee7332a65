//! Similarity and claim-response metrics.
//!
//! * BLEU-n is the per-sentence cumulative score: the brevity penalty times
//!   the geometric mean of clipped n-gram precisions of orders `1..=n`.
//!   Orders `>= 2` with no matching n-gram use add-one smoothing,
//!   `1 / (total + 1)`. Corpus scores average sentence scores. B-N is the
//!   mean of BLEU-1..BLEU-4.
//! * ROUGE-1/2 are n-gram overlap F1; ROUGE-L is the LCS F-measure
//!   `(1 + β²) P R / (R + β² P)` with `β = 1.2`.
//! * Claim-response metrics classify each generated view and compare the
//!   predicted labels with the gold labels. Micro scores pool true/false
//!   positives and false negatives over all (case, label) decisions; macro
//!   scores average per-label scores. A label with no positives predicted
//!   or gold scores 1.
//!
//! Reports are in `[0, 1]`; tables multiply by 100 for display.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimLabelSet, EOS};
use crate::navigator::PrefixClassifier;
use crate::{Error, Result};

/// `β` of the ROUGE-L F-measure (recall weighted more heavily).
pub const ROUGE_L_BETA: f64 = 1.2;

/// Highest BLEU order averaged into B-N.
pub const BLEU_MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis total for order `n`.
fn clipped<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Cumulative sentence BLEU of order `n`.
pub fn bleu<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be >= 1");
    if hyp.is_empty() {
        log::warn!("empty hypothesis scores BLEU 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = clipped(hyp, reference, k);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if k == 1 {
            return 0.0;
        } else {
            1.0 / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

/// ROUGE-N F1.
pub fn rouge_n<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    let (th, tr): (usize, usize) = (h.values().sum(), r.values().sum());
    if th == 0 || tr == 0 {
        return 0.0;
    }
    f1(overlap as f64 / th as f64, overlap as f64 / tr as f64)
}

/// Length of the longest common subsequence (two-row dynamic program).
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with `β = ROUGE_L_BETA`.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Micro/macro F1 and Jaccard over multi-label predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClaimScores {
    pub mif: f64,
    pub maf: f64,
    pub mij: f64,
    pub maj: f64,
}

pub fn claim_response_metrics(predicted: &[ClaimLabelSet], gold: &[ClaimLabelSet]) -> Result<ClaimScores> {
    if predicted.len() != gold.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} cases", predicted.len(), gold.len())));
    }
    let m = gold.first().map_or(0, ClaimLabelSet::width);
    if predicted.iter().chain(gold).any(|s| s.width() != m) {
        return Err(Error::Mismatch("label sets of different widths".into()));
    }
    let mut tp = vec![0usize; m];
    let mut fp = vec![0usize; m];
    let mut fn_ = vec![0usize; m];
    for (p, g) in predicted.iter().zip(gold) {
        for i in 0..m {
            match (p.contains(i), g.contains(i)) {
                (true, true) => tp[i] += 1,
                (true, false) => fp[i] += 1,
                (false, true) => fn_[i] += 1,
                (false, false) => {}
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let (t, p, n): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let per_label = |f: &dyn Fn(usize) -> f64| if m == 0 { 1.0 } else { (0..m).map(f).sum::<f64>() / m as f64 };
    Ok(ClaimScores {
        mif: ratio(2 * t, 2 * t + p + n),
        maf: per_label(&|i| ratio(2 * tp[i], 2 * tp[i] + fp[i] + fn_[i])),
        mij: ratio(t, t + p + n),
        maj: per_label(&|i| ratio(tp[i], tp[i] + fp[i] + fn_[i])),
    })
}

/// One evaluated run: ten metrics plus identifying metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub b1: f64,
    pub b2: f64,
    pub bn: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub mif: f64,
    pub maf: f64,
    pub mij: f64,
    pub maj: f64,
    pub seed: u64,
    pub flags: String,
    /// Eval-classifier Mi-F on the gold views of the same cases.
    pub judge_mif: f64,
    pub cases: usize,
    pub meta: BTreeMap<String, String>,
}

pub const CSV_HEADER: &str = "b1,b2,bn,r1,r2,rl,mif,maf,mij,maj,seed,flags";

impl MetricReport {
    pub fn metrics(&self) -> [(&'static str, f64); 10] {
        [
            ("B-1", self.b1),
            ("B-2", self.b2),
            ("B-N", self.bn),
            ("R-1", self.r1),
            ("R-2", self.r2),
            ("R-L", self.rl),
            ("Mi-F", self.mif),
            ("Ma-F", self.maf),
            ("Mi-J", self.mij),
            ("Ma-J", self.maj),
        ]
    }

    pub fn csv_row(&self) -> String {
        let vals: Vec<String> = self.metrics().iter().map(|(_, v)| format!("{v:.6}")).collect();
        let flags = if self.flags.is_empty() { "kig".to_string() } else { self.flags.clone() };
        format!("{},{},{}", vals.join(","), self.seed, flags.replace(',', ";"))
    }

    /// Whether the eval classifier passed its sanity gate on gold views.
    pub fn judge_reliable(&self) -> bool {
        self.judge_mif >= 0.85
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Classifier input for a view: its tokens followed by `EOS`.
pub fn with_eos(view: &[usize]) -> Vec<usize> {
    let mut v = view.to_vec();
    v.push(EOS);
    v
}

/// Scores generated views (without `EOS`) against gold views and labels.
pub fn evaluate(
    generated: &[Vec<usize>],
    references: &[Vec<usize>],
    gold: &[ClaimLabelSet],
    judge: &PrefixClassifier,
) -> Result<MetricReport> {
    use rayon::prelude::*;
    if generated.len() != references.len() || generated.len() != gold.len() {
        return Err(Error::Mismatch(format!(
            "{} generations for {} references and {} label sets",
            generated.len(),
            references.len(),
            gold.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::Dependency("no generations to evaluate".into()));
    }
    let rows: Vec<Result<([f64; 6], ClaimLabelSet, ClaimLabelSet)>> = generated
        .par_iter()
        .zip(references)
        .map(|(h, r)| {
            let bleus: Vec<f64> = (1..=BLEU_MAX_ORDER).map(|n| bleu(h, r, n)).collect();
            let bn = bleus.iter().sum::<f64>() / BLEU_MAX_ORDER as f64;
            let sims = [bleus[0], bleus[1], bn, rouge_n(h, r, 1), rouge_n(h, r, 2), rouge_l(h, r)];
            Ok((sims, judge.predict(&with_eos(h))?, judge.predict(&with_eos(r))?))
        })
        .collect();
    let mut sums = [0.0; 6];
    let mut predicted = Vec::with_capacity(rows.len());
    let mut on_gold = Vec::with_capacity(rows.len());
    for row in rows {
        let (sims, p, g) = row?;
        for (s, x) in sums.iter_mut().zip(sims) {
            *s += x;
        }
        predicted.push(p);
        on_gold.push(g);
    }
    let n = generated.len() as f64;
    let claims = claim_response_metrics(&predicted, gold)?;
    let judge_mif = claim_response_metrics(&on_gold, gold)?.mif;
    Ok(MetricReport {
        b1: sums[0] / n,
        b2: sums[1] / n,
        bn: sums[2] / n,
        r1: sums[3] / n,
        r2: sums[4] / n,
        rl: sums[5] / n,
        mif: claims.mif,
        maf: claims.maf,
        mij: claims.mij,
        maj: claims.maj,
        judge_mif,
        cases: generated.len(),
        ..MetricReport::default()
    })
}
