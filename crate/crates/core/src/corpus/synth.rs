//! Synthetic civil lending cases.
//!
//! Every case is built from templates over the four lending claim labels.
//! The plaintiff claims plant exactly the keywords of the sampled labels, so
//! keyword extraction recovers the label set, and the court view answers
//! each active label with one templated response clause placed after a
//! preamble of roughly fifty tokens. Facts carry near-miss distractors
//! (a guarantor who refused to sign, "curiosity" next to "interest",
//! and so on) so the view cannot be written from surface cues in the facts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaseRecord, ClaimCatalog, ClaimLabelSet};
use crate::{Error, Result};

pub const PRINCIPAL: usize = 0;
pub const INTEREST: usize = 1;
pub const SPOUSAL: usize = 2;
pub const GUARANTEE: usize = 3;
const M: usize = 4;

/// Length bounds (in tokens) at scale 1.
pub const FACT_BOUNDS: (usize, usize) = (20, 400);
pub const CLAIMS_BOUNDS: (usize, usize) = (20, 200);
pub const VIEW_BOUNDS: (usize, usize) = (20, 400);
/// Tokens of court-view preamble before the first response clause, at scale 1.
pub const RESPONSE_ONSET: usize = 50;

const SURNAMES: &[&str] = &[
    "zhang", "wang", "li", "zhao", "chen", "liu", "yang", "huang", "zhou", "wu", "xu", "sun",
];
const AMOUNTS: &[&str] = &["5000", "8000", "10000", "20000", "30000", "50000", "80000", "100000"];
const RATES: &[&str] = &["1%", "1.5%", "2%", "2.5%"];
const YEARS: &[&str] = &["2014", "2015", "2016", "2017", "2018", "2019"];

const FACT_OPENING: &str = "in {Y} the defendant {D} borrowed {A} yuan from the plaintiff {P} and signed an iou .";

const FACT_LABEL: [&[&str]; M] = [
    &[
        "after the loan expired the defendant {D} failed to repay the money despite repeated demands .",
        "the defendant {D} has not returned the money to this day .",
    ],
    &[
        "the iou stated a monthly interest rate of {R} .",
        "the parties agreed that the money would bear interest of {R} per month .",
    ],
    &[
        "the defendant {D} and {S} were married when the loan was made and the money was used for family life .",
        "{S} is the spouse of the defendant {D} and the loan arose during their marriage .",
    ],
    &[
        "{G} signed the iou as guarantor and promised to bear joint liability .",
        "{G} provided a guarantee for the loan in writing .",
    ],
];

const FACT_DISTRACTORS: &[&str] = &[
    "both parties appeared in court and stated their opinions .",
    "the plaintiff showed curiosity about how the defendant used the money .",
    "the defendant argued that the principle of fairness had been ignored .",
    "the money was transferred through a bank account .",
];

/// Misleading fact sentences that mention an absent label's vocabulary.
const FACT_ABSENT: [&str; M] = [
    "the defendant {D} admitted the loan but disputed when it was due .",
    "the parties never mentioned any interest when the loan was made .",
    "the defendant {D} ended the marriage with {S} before the loan .",
    "{G} was asked to act as guarantor but refused to sign .",
];

const CLAIMS_OPENING: &str = "the plaintiff {P} filed a lawsuit with the following requests :";
const CLAIMS_COSTS: &str = "order the defendant to bear the litigation costs .";

/// Claim clause variants with sampling weights. A variant flagged `true`
/// also contains a keyword of the principal label and is only used when
/// that label is active.
const CLAIM_CLAUSES: [&[(&str, f64, bool)]; M] = [
    &[
        ("order the defendant {D} to repay the loan principal of {A} yuan ;", 0.5, false),
        ("order the defendant {D} to repay the debt of {A} yuan ;", 0.3, false),
        ("order the borrower {D} to return {A} yuan ;", 0.2, false),
    ],
    &[
        ("order the defendant {D} to pay interest on the loan ;", 0.5, false),
        ("order the defendant {D} to pay overdue interest at the agreed interest rate of {R} ;", 0.3, false),
        ("order the defendant {D} to pay interest calculated at the bank lending rate ;", 0.2, false),
    ],
    &[
        ("order {S} , the spouse of the defendant , to bear joint repayment liability ;", 0.4, false),
        ("confirm the loan as a joint debt of the defendant {D} and {S} ;", 0.25, true),
        ("order {S} to repay together as the loan arose during the marriage ;", 0.2, false),
        ("order repayment from the property division of {D} and {S} ;", 0.15, false),
    ],
    &[
        ("order the guarantor {G} to bear joint liability for the loan ;", 0.5, false),
        ("order {G} to bear guarantee liability for the loan ;", 0.3, false),
        ("order {G} to perform the guaranty contract ;", 0.2, false),
    ],
];

const VIEW_OPENING: &str = "the court holds that the loan relationship between the plaintiff {P} and the defendant {D} is legal and valid and should be protected by law .";

const VIEW_FILLER: &[&str] = &[
    "the evidence submitted by the plaintiff is true and the court accepts it .",
    "the defendant 's defense lacks factual basis and is not accepted .",
    "according to the principle of good faith the parties shall perform their obligations .",
    "the plaintiff 's curiosity about the use of the money does not affect the outcome .",
    "the facts of this case are clear and the evidence is sufficient .",
    "the court has examined the iou and the transfer records .",
];

/// Response clauses, one sentence each; every active label gets exactly one.
pub const VIEW_RESPONSES: [&[&str]; M] = [
    &[
        "the defendant {D} shall repay the principal of {A} yuan to the plaintiff .",
        "the plaintiff 's claim for the principal of {A} yuan is supported .",
    ],
    &[
        "the claim for interest at the agreed interest rate is supported .",
        "the defendant {D} shall pay the interest owed to the plaintiff .",
    ],
    &[
        "as the debt arose during the marriage {S} shall bear joint repayment liability .",
        "{S} as the spouse of the defendant shall repay the joint debt together .",
    ],
    &[
        "as guarantor {G} shall bear joint guarantee liability for the debt .",
        "{G} shall bear guarantee liability within the scope of the guaranty contract .",
    ],
];

const VIEW_CLOSING: &str = "the litigation costs shall be borne by the defendant {D} .";

/// How many labels a case carries and which ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimMix {
    /// `count_probs[k-1]` is the probability of a case carrying `k` labels.
    pub count_probs: Vec<f64>,
    /// Relative weight of each label when drawing without replacement.
    pub label_weights: Vec<f64>,
    /// When set, every case carries exactly these labels.
    #[serde(default)]
    pub forced: Option<Vec<usize>>,
}

impl Default for ClaimMix {
    fn default() -> Self {
        // Mean label count 0.25 + 0.90 + 0.66 + 0.32 = 2.13.
        Self {
            count_probs: vec![0.25, 0.45, 0.22, 0.08],
            label_weights: vec![0.40, 0.30, 0.12, 0.18],
            forced: None,
        }
    }
}

impl ClaimMix {
    pub fn expected_count(&self) -> f64 {
        self.count_probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Shrinks the preamble length and all length bounds proportionally.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub mix: ClaimMix,
}

fn one() -> f64 {
    1.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 2000,
            scale: 1.0,
            mix: ClaimMix::default(),
        }
    }
}

fn scaled(b: (usize, usize), scale: f64) -> (usize, usize) {
    (
        ((b.0 as f64 * scale).round() as usize).max(1),
        ((b.1 as f64 * scale).round() as usize).max(1),
    )
}

impl SynthConfig {
    pub fn bounds(&self) -> [(usize, usize); 3] {
        [
            scaled(FACT_BOUNDS, self.scale),
            scaled(CLAIMS_BOUNDS, self.scale),
            scaled(VIEW_BOUNDS, self.scale),
        ]
    }

    pub fn response_onset(&self) -> usize {
        (RESPONSE_ONSET as f64 * self.scale).round() as usize
    }
}

struct Slots {
    plaintiff: &'static str,
    defendant: &'static str,
    spouse: &'static str,
    guarantor: &'static str,
    amount: &'static str,
    rate: &'static str,
    year: &'static str,
}

impl Slots {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let people: Vec<&&str> = SURNAMES.choose_multiple(rng, 4).collect();
        Self {
            plaintiff: people[0],
            defendant: people[1],
            spouse: people[2],
            guarantor: people[3],
            amount: AMOUNTS.choose(rng).expect("nonempty"),
            rate: RATES.choose(rng).expect("nonempty"),
            year: YEARS.choose(rng).expect("nonempty"),
        }
    }

    fn fill(&self, template: &str) -> String {
        template
            .split(' ')
            .map(|tok| match tok {
                "{P}" => self.plaintiff,
                "{D}" => self.defendant,
                "{S}" => self.spouse,
                "{G}" => self.guarantor,
                "{A}" => self.amount,
                "{R}" => self.rate,
                "{Y}" => self.year,
                other => other,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn sample_labels(mix: &ClaimMix, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if let Some(forced) = &mix.forced {
        if forced.is_empty() || forced.iter().any(|&l| l >= M) {
            return Err(Error::Config("forced label set must be a nonempty subset of 0..4".into()));
        }
        let mut f = forced.clone();
        f.sort_unstable();
        f.dedup();
        return Ok(f);
    }
    if mix.count_probs.len() != M || mix.label_weights.len() != M {
        return Err(Error::Config("claim mix needs four count probabilities and four weights".into()));
    }
    let u: f64 = rng.gen();
    let total: f64 = mix.count_probs.iter().sum();
    let mut acc = 0.0;
    let mut k = M;
    for (i, p) in mix.count_probs.iter().enumerate() {
        acc += p / total;
        if u < acc {
            k = i + 1;
            break;
        }
    }
    let mut pool: Vec<usize> = (0..M).collect();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let weights: f64 = pool.iter().map(|&l| mix.label_weights[l]).sum();
        let mut r = rng.gen::<f64>() * weights;
        let mut pick = pool.len() - 1;
        for (j, &l) in pool.iter().enumerate() {
            r -= mix.label_weights[l];
            if r < 0.0 {
                pick = j;
                break;
            }
        }
        chosen.push(pool.remove(pick));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn weighted_clause(
    variants: &[(&'static str, f64, bool)],
    principal_active: bool,
    rng: &mut ChaCha8Rng,
) -> &'static str {
    let allowed: Vec<&(&str, f64, bool)> = variants
        .iter()
        .filter(|(_, _, needs_p)| principal_active || !needs_p)
        .collect();
    let total: f64 = allowed.iter().map(|v| v.1).sum();
    let mut r = rng.gen::<f64>() * total;
    for v in &allowed {
        r -= v.1;
        if r < 0.0 {
            return v.0;
        }
    }
    allowed.last().expect("at least one variant").0
}

fn build_case(idx: usize, cfg: &SynthConfig, catalog: &ClaimCatalog, rng: &mut ChaCha8Rng) -> Result<CaseRecord> {
    let labels = sample_labels(&cfg.mix, rng)?;
    let slots = Slots::sample(rng);
    let active = |l: usize| labels.contains(&l);

    // Facts: opening, one sentence per active label, and distractors, with
    // the non-opening sentences shuffled.
    let mut fact_parts: Vec<&str> = labels
        .iter()
        .map(|&l| *FACT_LABEL[l].choose(rng).expect("nonempty"))
        .collect();
    fact_parts.push(FACT_DISTRACTORS.choose(rng).expect("nonempty"));
    let absent: Vec<usize> = (0..M).filter(|&l| !active(l)).collect();
    if let Some(&l) = absent.choose(rng) {
        if rng.gen_bool(0.7) {
            fact_parts.push(FACT_ABSENT[l]);
        }
    }
    fact_parts.shuffle(rng);
    let fact = std::iter::once(FACT_OPENING)
        .chain(fact_parts)
        .map(|t| slots.fill(t))
        .collect::<Vec<_>>()
        .join(" ");

    // Claims: numbered requests in random order, then litigation costs.
    let mut order = labels.clone();
    order.shuffle(rng);
    let mut claims = slots.fill(CLAIMS_OPENING);
    for (n, &l) in order.iter().enumerate() {
        let clause = weighted_clause(CLAIM_CLAUSES[l], active(PRINCIPAL), rng);
        claims.push_str(&format!(" {} . {}", n + 1, slots.fill(clause)));
    }
    claims.push_str(&format!(" {} . {}", order.len() + 1, CLAIMS_COSTS));

    // Court view: preamble up to the response onset, then responses in
    // catalog order, then the closing sentence.
    let onset = cfg.response_onset();
    let mut view: Vec<String> = vec![slots.fill(VIEW_OPENING)];
    let mut len = view[0].split(' ').count();
    let mut filler: Vec<&str> = VIEW_FILLER.to_vec();
    filler.shuffle(rng);
    for f in filler {
        if len >= onset {
            break;
        }
        len += f.split(' ').count();
        view.push(f.to_string());
    }
    for &l in &labels {
        view.push(slots.fill(VIEW_RESPONSES[l].choose(rng).expect("nonempty")));
    }
    view.push(slots.fill(VIEW_CLOSING));
    let court_view = view.join(" ");

    let label_set = ClaimLabelSet::from_indices(M, &labels);
    let record = CaseRecord {
        id: format!("case-{idx:05}"),
        fact,
        claims,
        court_view,
        labels: label_set,
    };
    debug_assert_eq!(super::extract_labels(&record.claims, catalog), record.labels);
    Ok(record)
}

fn within(text: &str, b: (usize, usize)) -> bool {
    let n = text.split_whitespace().count();
    (b.0..=b.1).contains(&n)
}

/// Generates `cfg.n_cases` cases deterministically from `seed`.
pub fn generate_corpus(seed: u64, cfg: &SynthConfig) -> Result<Vec<CaseRecord>> {
    if cfg.n_cases == 0 {
        return Err(Error::Config("n_cases must be at least 1".into()));
    }
    if !(cfg.scale > 0.0) {
        return Err(Error::Config("scale must be positive".into()));
    }
    let catalog = ClaimCatalog::default_lending();
    let [fb, cb, vb] = cfg.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_cases);
    for idx in 0..cfg.n_cases {
        let mut attempt = 0;
        loop {
            let case = build_case(idx, cfg, &catalog, &mut rng)?;
            if within(&case.fact, fb) && within(&case.claims, cb) && within(&case.court_view, vb) {
                out.push(case);
                break;
            }
            attempt += 1;
            if attempt >= 20 {
                return Err(Error::InfeasibleLengths(format!(
                    "templates cannot satisfy fact {fb:?}, claims {cb:?}, view {vb:?} at scale {}",
                    cfg.scale
                )));
            }
        }
    }
    Ok(out)
}

/// Labels whose response clause templates appear in a court view, one
/// entry per matching sentence.
pub fn response_labels(view: &str) -> Vec<usize> {
    let tokens: Vec<&str> = view.split_whitespace().collect();
    let mut found = Vec::new();
    for sentence in tokens.split_inclusive(|t| *t == ".") {
        for (label, templates) in VIEW_RESPONSES.iter().enumerate() {
            if templates.iter().any(|t| matches_template(sentence, t)) {
                found.push(label);
            }
        }
    }
    found
}

fn matches_template(sentence: &[&str], template: &str) -> bool {
    let t: Vec<&str> = template.split(' ').collect();
    t.len() == sentence.len()
        && t.iter()
            .zip(sentence)
            .all(|(a, b)| (a.starts_with('{') && a.ends_with('}')) || a == b)
}

/// Every word the templates can emit, for vocabulary-size checks.
pub fn template_words() -> Vec<&'static str> {
    let mut all: Vec<&str> = Vec::new();
    let mut add = |s: &'static str| all.extend(s.split(' ').filter(|t| !t.starts_with('{')));
    add(FACT_OPENING);
    FACT_LABEL.iter().flat_map(|v| v.iter()).for_each(|s| add(s));
    FACT_DISTRACTORS.iter().for_each(|s| add(s));
    FACT_ABSENT.iter().for_each(|s| add(s));
    add(CLAIMS_OPENING);
    add(CLAIMS_COSTS);
    CLAIM_CLAUSES.iter().flat_map(|v| v.iter()).for_each(|s| add(s.0));
    add(VIEW_OPENING);
    VIEW_FILLER.iter().for_each(|s| add(s));
    VIEW_RESPONSES.iter().flat_map(|v| v.iter()).for_each(|s| add(s));
    add(VIEW_CLOSING);
    all.extend(SURNAMES.iter().chain(AMOUNTS).chain(RATES).chain(YEARS));
    all.extend(["1", "2", "3", "4", "5"]);
    all.sort_unstable();
    all.dedup();
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::extract_labels;

    #[test]
    fn forced_single_label_has_one_response() {
        let cfg = SynthConfig {
            n_cases: 1,
            scale: 1.0,
            mix: ClaimMix {
                forced: Some(vec![PRINCIPAL]),
                ..ClaimMix::default()
            },
        };
        let cases = generate_corpus(3, &cfg).unwrap();
        assert_eq!(response_labels(&cases[0].court_view), vec![PRINCIPAL]);
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig { n_cases: 50, ..SynthConfig::default() };
        assert_eq!(generate_corpus(9, &cfg).unwrap(), generate_corpus(9, &cfg).unwrap());
        assert_ne!(generate_corpus(9, &cfg).unwrap(), generate_corpus(10, &cfg).unwrap());
    }

    #[test]
    fn ground_truth_is_self_consistent() {
        let catalog = ClaimCatalog::default_lending();
        let cfg = SynthConfig { n_cases: 500, ..SynthConfig::default() };
        let [fb, cb, vb] = cfg.bounds();
        for case in generate_corpus(1, &cfg).unwrap() {
            assert_eq!(extract_labels(&case.claims, &catalog), case.labels, "{}", case.claims);
            assert_eq!(response_labels(&case.court_view), case.labels.indices().collect::<Vec<_>>());
            assert!(!case.labels.is_empty());
            assert!(within(&case.fact, fb) && within(&case.claims, cb) && within(&case.court_view, vb));
        }
    }

    #[test]
    fn responses_start_after_the_onset() {
        let cfg = SynthConfig { n_cases: 200, ..SynthConfig::default() };
        for case in generate_corpus(4, &cfg).unwrap() {
            let tokens: Vec<&str> = case.court_view.split_whitespace().collect();
            let first_response = tokens
                .split_inclusive(|t| *t == ".")
                .scan(0, |pos, s| {
                    let start = *pos;
                    *pos += s.len();
                    Some((start, s))
                })
                .find(|(_, s)| VIEW_RESPONSES.iter().flat_map(|v| v.iter()).any(|t| matches_template(s, t)))
                .map(|(start, _)| start)
                .unwrap();
            assert!((RESPONSE_ONSET..RESPONSE_ONSET + 16).contains(&first_response), "{first_response}");
        }
    }

    #[test]
    fn infeasible_scale_is_rejected() {
        let cfg = SynthConfig { n_cases: 3, scale: 0.05, ..SynthConfig::default() };
        assert!(matches!(generate_corpus(1, &cfg), Err(Error::InfeasibleLengths(_))));
    }

    #[test]
    fn default_mix_mean_matches_target() {
        assert!((ClaimMix::default().expected_count() - 2.13).abs() < 1e-12);
    }
}
