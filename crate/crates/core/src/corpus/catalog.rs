//! Claim-label catalog: label names, keyword sets, and definitions.
//!
//! File format (TOML), one `[[label]]` table per label in catalog order:
//!
//! ```toml
//! [[label]]
//! name = "Principal Claim"
//! keywords = ["principal", "debt", "borrower"]
//! definition = "the requests for repayment of ..."
//! ```
//!
//! Keywords and definitions are whitespace-tokenized; multi-word keywords
//! such as `"interest rate"` match as contiguous token sequences.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ClaimLabelSet;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimLabel {
    pub name: String,
    pub keywords: Vec<String>,
    pub definition: String,
}

impl ClaimLabel {
    pub fn keyword_tokens(&self) -> Vec<Vec<&str>> {
        self.keywords
            .iter()
            .map(|k| k.split_whitespace().collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimCatalog {
    #[serde(rename = "label")]
    labels: Vec<ClaimLabel>,
}

impl ClaimCatalog {
    pub fn new(labels: Vec<ClaimLabel>) -> Result<Self> {
        let catalog = Self { labels };
        catalog.validate()?;
        Ok(catalog)
    }

    /// The four civil-lending claim labels with their keywords and definitions.
    pub fn default_lending() -> Self {
        let label = |name: &str, keywords: &[&str], definition: &str| ClaimLabel {
            name: name.to_string(),
            keywords: keywords.iter().map(|s| s.to_string()).collect(),
            definition: definition.to_string(),
        };
        Self::new(vec![
            label(
                "Principal Claim",
                &["principal", "debt", "borrower"],
                "the requests for repayment of the initial borrowed or owed amount , \
                 excluding interest and additional charges .",
            ),
            label(
                "Interest Claim",
                &["interest", "interest rate", "bank"],
                "a borrower requests to pay the interest on a owed amount , calculated \
                 based on the agreed-upon interest rate in the loan contract .",
            ),
            label(
                "Spousal Joint Debt Claim",
                &["spouse", "joint debt", "property division", "marriage"],
                "one spouse seeks to divide shared debts within a marriage , often \
                 occurring during divorce or separation when assets and debts are being split .",
            ),
            label(
                "Guarantee Liability Claim",
                &["guarantor", "guarantee", "guaranty contract"],
                "a guarantor asks to fulfill their duties in a guarantee contract , typically \
                 because the borrower failed to meet their contract terms , leading to the \
                 guarantor paying the debt or fulfilling guaranteed responsibilities .",
            ),
        ])
        .expect("built-in catalog is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Catalog("catalog has no labels".into()));
        }
        let mut names = HashSet::new();
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Catalog(format!("duplicate label {}", l.name)));
            }
            if l.keywords.is_empty() {
                return Err(Error::Catalog(format!("{} has no keywords", l.name)));
            }
            if l.definition.split_whitespace().next().is_none() {
                return Err(Error::Catalog(format!("{} has an empty definition", l.name)));
            }
            for k in &l.keywords {
                let norm = k.split_whitespace().collect::<Vec<_>>().join(" ");
                if norm.is_empty() {
                    return Err(Error::Catalog(format!("{} has an empty keyword", l.name)));
                }
                if !seen.insert(norm) {
                    return Err(Error::Catalog(format!("keyword {k:?} is not distinct")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ClaimLabel] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &ClaimLabel {
        &self.labels[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn names(&self, set: &ClaimLabelSet) -> Vec<String> {
        set.indices().map(|i| self.labels[i].name.clone()).collect()
    }

    pub fn set_from_names<S: AsRef<str>>(&self, names: &[S]) -> Result<ClaimLabelSet> {
        let mut set = ClaimLabelSet::empty(self.len());
        for n in names {
            let i = self
                .index_of(n.as_ref())
                .ok_or_else(|| Error::Catalog(format!("unknown label {:?}", n.as_ref())))?;
            set.set(i, true);
        }
        Ok(set)
    }

    /// Returns a catalog with labels reordered so that new label `j` is old label `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            labels: order.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Catalog(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Counts (possibly overlapping) occurrences of `needle` as a contiguous run in `hay`.
pub fn count_occurrences(hay: &[&str], needle: &[&str]) -> usize {
    if needle.is_empty() || needle.len() > hay.len() {
        return 0;
    }
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Claim labels of a plaintiff-claims text: label `i` is active iff one of
/// its keywords occurs as a contiguous token sequence. Matching is exact and
/// case-sensitive on whitespace tokens.
pub fn extract_labels(claims: &str, catalog: &ClaimCatalog) -> ClaimLabelSet {
    let tokens: Vec<&str> = claims.split_whitespace().collect();
    let bits = catalog
        .labels()
        .iter()
        .map(|l| {
            l.keyword_tokens()
                .iter()
                .any(|k| count_occurrences(&tokens, k) > 0)
        })
        .collect();
    ClaimLabelSet::from_bools(bits)
}

/// Per-label keyword frequency distributions over a set of claims texts.
/// Labels whose keywords never occur fall back to a uniform distribution.
pub fn keyword_frequency<'a>(
    claims: impl IntoIterator<Item = &'a str>,
    catalog: &ClaimCatalog,
) -> Vec<Vec<f64>> {
    let mut counts: Vec<Vec<usize>> = catalog
        .labels()
        .iter()
        .map(|l| vec![0; l.keywords.len()])
        .collect();
    let keyword_tokens: Vec<Vec<Vec<&str>>> =
        catalog.labels().iter().map(ClaimLabel::keyword_tokens).collect();
    for text in claims {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        for (label, kws) in keyword_tokens.iter().enumerate() {
            for (k, kw) in kws.iter().enumerate() {
                counts[label][k] += count_occurrences(&tokens, kw);
            }
        }
    }
    counts.into_iter().map(|c| normalize_counts(&c)).collect()
}

pub fn normalize_counts(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        vec![1.0 / counts.len() as f64; counts.len()]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_has_four_labels() {
        let c = ClaimCatalog::default_lending();
        assert_eq!(c.len(), 4);
        assert_eq!(c.label(1).keywords, vec!["interest", "interest rate", "bank"]);
    }

    #[test]
    fn extraction_examples() {
        let c = ClaimCatalog::default_lending();
        let s = extract_labels("order the defendant to pay at the interest rate of 2%", &c);
        assert!(s.contains(1));
        assert!(extract_labels("order the defendant to bear the costs", &c).is_empty());
        let s = extract_labels("order the guarantor to repay the principal", &c);
        assert_eq!(s, ClaimLabelSet::from_indices(4, &[0, 3]));
    }

    #[test]
    fn multi_word_keyword_needs_contiguity() {
        let c = ClaimCatalog::default_lending();
        let s = extract_labels("the property was kept ; division later", &c);
        assert!(s.is_empty());
        let s = extract_labels("apply property division now", &c);
        assert_eq!(s, ClaimLabelSet::from_indices(4, &[2]));
    }

    #[test]
    fn frequency_normalization() {
        assert_eq!(normalize_counts(&[7]), vec![1.0]);
        assert_eq!(normalize_counts(&[30, 10]), vec![0.75, 0.25]);
        assert_eq!(normalize_counts(&[0, 0, 0]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn frequency_counts_keywords_in_claims() {
        let c = ClaimCatalog::default_lending();
        let texts = ["pay interest at the interest rate", "pay bank interest"];
        let f = keyword_frequency(texts.iter().copied(), &c);
        // interest: 3, interest rate: 1, bank: 1
        assert_eq!(f[1], vec![0.6, 0.2, 0.2]);
        assert_eq!(f[2], vec![0.25; 4]);
    }

    #[test]
    fn rejects_shared_keywords() {
        let mut labels = ClaimCatalog::default_lending().labels().to_vec();
        labels[1].keywords.push("debt".into());
        assert!(ClaimCatalog::new(labels).is_err());
        let mut labels = ClaimCatalog::default_lending().labels().to_vec();
        labels[0].keywords.clear();
        assert!(ClaimCatalog::new(labels).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ClaimCatalog::default_lending();
        assert_eq!(ClaimCatalog::from_toml(&c.to_toml()).unwrap(), c);
        assert!(ClaimCatalog::from_toml("[[label]]\nname='x'\nkeywords=['a']\ndefinition='d'\nextra=1").is_err());
    }
}
