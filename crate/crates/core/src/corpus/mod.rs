//! Cases, claim labels, tokenization and dataset files.
//!
//! Dataset files are JSON Lines, one case per line, keys in this order:
//!
//! ```text
//! {"id":"case-00000","fact":"...","claims":"...","court_view":"...","labels":["Principal Claim",...]}
//! ```
//!
//! Text fields are single-space-separated word tokens. Label names refer to
//! the run's catalog and are listed in catalog order.

mod catalog;
mod labels;
pub mod synth;
mod vocab;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use catalog::{count_occurrences, extract_labels, keyword_frequency, normalize_counts, ClaimCatalog, ClaimLabel};
pub use labels::ClaimLabelSet;
pub use synth::{generate_corpus, ClaimMix, SynthConfig};
pub use vocab::{Vocab, EOS, SEP, UNK};

use crate::{Error, Result};

/// One case: fact description, plaintiff claims, court view, gold labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub fact: String,
    pub claims: String,
    pub court_view: String,
    pub labels: ClaimLabelSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRow {
    id: String,
    fact: String,
    claims: String,
    court_view: String,
    labels: Vec<String>,
}

impl CaseRecord {
    pub fn to_json_line(&self, catalog: &ClaimCatalog) -> String {
        let row = CaseRow {
            id: self.id.clone(),
            fact: self.fact.clone(),
            claims: self.claims.clone(),
            court_view: self.court_view.clone(),
            labels: catalog.names(&self.labels),
        };
        serde_json::to_string(&row).expect("case serializes")
    }

    pub fn from_json_line(line: &str, catalog: &ClaimCatalog) -> Result<Self> {
        let row: CaseRow = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            labels: catalog.set_from_names(&row.labels)?,
            id: row.id,
            fact: row.fact,
            claims: row.claims,
            court_view: row.court_view,
        })
    }
}

pub fn write_cases(path: impl AsRef<Path>, cases: &[CaseRecord], catalog: &ClaimCatalog) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in cases {
        writeln!(w, "{}", c.to_json_line(catalog))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cases(path: impl AsRef<Path>, catalog: &ClaimCatalog) -> Result<Vec<CaseRecord>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(CaseRecord::from_json_line(&line, catalog)?);
        }
    }
    Ok(out)
}

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<CaseRecord>,
    pub valid: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

/// Shuffles with `seed` and cuts 8:1:1 (train and validation sizes are
/// rounded to nearest; the test split takes the remainder).
pub fn split(cases: Vec<CaseRecord>, seed: u64) -> Result<Split> {
    let n = cases.len();
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 cases to split, got {n}")));
    }
    let (n_train, n_valid, _) = split_sizes(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<CaseRecord>> = cases.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<CaseRecord> {
        idx[range].iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let train = take(0..n_train);
    let valid = take(n_train..n_train + n_valid);
    let test = take(n_train + n_valid..n);
    Ok(Split { train, valid, test })
}

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_valid = (n as f64 * 0.1).round() as usize;
    (n_train, n_valid, n - n_train - n_valid)
}

/// Token ids of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCase {
    pub fact: Vec<usize>,
    pub claims: Vec<usize>,
    pub view: Vec<usize>,
    pub labels: ClaimLabelSet,
}

impl EncodedCase {
    pub fn new(case: &CaseRecord, vocab: &Vocab) -> Self {
        Self {
            fact: vocab.tokenize(&case.fact),
            claims: vocab.tokenize(&case.claims),
            view: vocab.tokenize(&case.court_view),
            labels: case.labels.clone(),
        }
    }

    /// `[f; SEP; c; SEP]`, the conditioning context for generation.
    pub fn context(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.fact.len() + self.claims.len() + 2);
        v.extend_from_slice(&self.fact);
        v.push(SEP);
        v.extend_from_slice(&self.claims);
        v.push(SEP);
        v
    }

    /// `[f; SEP; c; SEP; v; EOS]` and the index where the view begins.
    pub fn full_sequence(&self) -> (Vec<usize>, usize) {
        let mut v = self.context();
        let start = v.len();
        v.extend_from_slice(&self.view);
        v.push(EOS);
        (v, start)
    }

    /// View tokens followed by `EOS`, the classifier's input.
    pub fn view_with_eos(&self) -> Vec<usize> {
        let mut v = self.view.clone();
        v.push(EOS);
        v
    }
}

/// Builds the vocabulary from the training split plus the catalog's keywords
/// and definitions.
pub fn build_vocab(train: &[CaseRecord], catalog: &ClaimCatalog) -> Vocab {
    let texts = train
        .iter()
        .flat_map(|c| [c.fact.as_str(), c.claims.as_str(), c.court_view.as_str()])
        .chain(catalog.labels().iter().flat_map(|l| {
            l.keywords.iter().map(String::as_str).chain(std::iter::once(l.definition.as_str()))
        }));
    Vocab::build(texts)
}
