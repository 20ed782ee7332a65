//! Generating navigator: claim-label classifier over court-view prefixes and
//! guided greedy decoding.
//!
//! At each decoding step the `top_n` most probable tokens are re-scored: the
//! classifier labels the view extended by each candidate, the Jaccard
//! similarity of those labels with the case's claim labels is softmax-
//! normalized over the candidates, scaled by a logistic factor in the
//! number of view tokens generated so far, multiplied by `λ` and added to
//! the candidates' probabilities. The highest adjusted score wins.
//!
//! Decoding is written against [`TokenGenerator`], so the navigator can be
//! attached to any model exposing a next-token distribution.

use std::path::Path;

use kig_tensor::{kernels, Checkpoint, Gradients, ParamSet, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimLabelSet, EOS};
use crate::nn::{Binder, CausalStack, StackCache, StackConfig};
use crate::train::{self, TrainLog, TrainOpts};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    /// Decision threshold `τ` on each label's probability.
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 16, n_layers: 1, n_heads: 2, ff_mult: 2, max_len: 512, threshold: 0.5 }
    }
}

/// Which positions of a view contribute to the classifier loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Every prefix `x_{1:i}` is a sub-sample labelled with the view's labels.
    AllPrefixes,
    /// Only the complete view (its last position).
    FullView,
}

impl Objective {
    fn name(self) -> &'static str {
        match self {
            Objective::AllPrefixes => "all-prefixes",
            Objective::FullView => "full-view",
        }
    }
}

/// Causal transformer with `m` sigmoid outputs at every position.
pub struct PrefixClassifier {
    pub cfg: ClassifierConfig,
    pub objective: Objective,
    pub n_labels: usize,
    pub params: ParamSet,
    pub stack: CausalStack,
}

impl PrefixClassifier {
    pub fn new(cfg: ClassifierConfig, objective: Objective, vocab_size: usize, n_labels: usize, seed: u64) -> Result<Self> {
        if cfg.width == 0 || cfg.n_heads == 0 || !cfg.width.is_multiple_of(cfg.n_heads) || cfg.n_layers == 0 {
            return Err(Error::Config("classifier: width must be a positive multiple of n_heads".into()));
        }
        if !(0.0..=1.0).contains(&cfg.threshold) {
            return Err(Error::Config("classifier: threshold must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let stack_cfg = StackConfig {
            vocab: vocab_size,
            width: cfg.width,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            ff_mult: cfg.ff_mult,
            max_len: cfg.max_len,
            pos_offset: 0,
            out_dim: n_labels,
            learned_positions: false,
        };
        let stack = CausalStack::new(&mut params, "cls", stack_cfg, &mut rng);
        Ok(Self { cfg, objective, n_labels, params, stack })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Label probabilities at every position, `[T × m]`.
    pub fn probs_on_tape(&self, tape: &mut Tape, bind: &mut Binder, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Config("classifier input is empty".into()));
        }
        let out = self.stack.forward(tape, bind, tokens, None)?;
        Ok(tape.sigmoid(out.logits))
    }

    /// Binary cross-entropy summed over labels and averaged over the
    /// positions selected by the objective.
    pub fn loss_on_tape(&self, tape: &mut Tape, params: &ParamSet, tokens: &[usize], labels: &ClaimLabelSet) -> Result<Var> {
        if labels.width() != self.n_labels {
            return Err(Error::Mismatch(format!("label set of width {} for a {}-label classifier", labels.width(), self.n_labels)));
        }
        let mut bind = Binder::trainable(params);
        let probs = self.probs_on_tape(tape, &mut bind, tokens)?;
        let t = tokens.len();
        let target = labels.as_targets();
        let (probs, rows) = match self.objective {
            Objective::AllPrefixes => (probs, t),
            Objective::FullView => (tape.slice_rows(probs, t - 1, 1)?, 1),
        };
        let targets: Vec<f64> = (0..rows).flat_map(|_| target.iter().copied()).collect();
        let total = tape.binary_cross_entropy(probs, &targets)?;
        Ok(tape.scale(total, 1.0 / rows as f64))
    }

    pub fn loss_and_grads(&self, params: &ParamSet, tokens: &[usize], labels: &ClaimLabelSet) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, params, tokens, labels)?;
        let value = tape.scalar(loss);
        Ok((value, tape.backward(loss)?))
    }

    pub fn train(&mut self, examples: &[(Vec<usize>, ClaimLabelSet)], opts: &TrainOpts) -> Result<TrainLog> {
        if let Some(i) = examples.iter().position(|(_, l)| l.is_empty()) {
            return Err(Error::Config(format!("classifier training example {i} has no labels")));
        }
        let mut params = std::mem::take(&mut self.params);
        let what = format!("classifier ({})", self.objective.name());
        let log = train::train(&what, examples, &mut params, opts, |p, (toks, labels)| self.loss_and_grads(p, toks, labels));
        self.params = params;
        log
    }

    pub fn mean_loss(&self, examples: &[(Vec<usize>, ClaimLabelSet)]) -> Result<f64> {
        train::mean_over(examples, |(toks, labels)| {
            let mut tape = Tape::new();
            let l = self.loss_on_tape(&mut tape, &self.params, toks, labels)?;
            Ok(tape.scalar(l))
        })
    }

    /// Probabilities after the last token of `tokens`.
    pub fn predict_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let probs = self.probs_on_tape(&mut tape, &mut bind, tokens)?;
        let v = tape.value(probs);
        Ok(v[v.len() - self.n_labels..].to_vec())
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<ClaimLabelSet> {
        Ok(ClaimLabelSet::from_probs(&self.predict_probs(tokens)?, self.cfg.threshold))
    }

    pub fn start(&self) -> StackCache {
        self.stack.start(None).expect("no prefix")
    }

    fn probs_from_logits(logits: Vec<f64>) -> Vec<f64> {
        logits.into_iter().map(kernels::sigmoid).collect()
    }

    /// Consumes `token`, returning the probabilities at its position.
    pub fn step(&self, cache: &mut StackCache, token: usize) -> Result<Vec<f64>> {
        Ok(Self::probs_from_logits(self.stack.step(&self.params, cache, token)?.logits))
    }

    /// Probabilities `token` would produce, leaving `cache` untouched.
    pub fn peek(&self, cache: &StackCache, token: usize) -> Result<Vec<f64>> {
        Ok(Self::probs_from_logits(self.stack.peek(&self.params, cache, token)?.logits))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        Checkpoint::from_params(&self.params)
            .with_meta("kind", "classifier")
            .with_meta("cls.objective", self.objective.name())
            .with_meta("cls.width", c.width.to_string())
            .with_meta("cls.n_layers", c.n_layers.to_string())
            .with_meta("cls.n_heads", c.n_heads.to_string())
            .with_meta("cls.ff_mult", c.ff_mult.to_string())
            .with_meta("cls.max_len", c.max_len.to_string())
            .with_meta("cls.threshold", format!("{:?}", c.threshold))
            .with_meta("cls.vocab_size", self.stack.cfg.vocab.to_string())
            .with_meta("cls.n_labels", self.n_labels.to_string())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("classifier") {
            return Err(Error::Format("checkpoint does not hold a classifier".into()));
        }
        fn get<T: std::str::FromStr>(ckpt: &Checkpoint, k: &str) -> Result<T> {
            ckpt.meta(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        }
        let objective = match ckpt.meta("cls.objective") {
            Some("all-prefixes") => Objective::AllPrefixes,
            Some("full-view") => Objective::FullView,
            _ => return Err(Error::Format("unknown classifier objective".into())),
        };
        let cfg = ClassifierConfig {
            width: get(ckpt, "cls.width")?,
            n_layers: get(ckpt, "cls.n_layers")?,
            n_heads: get(ckpt, "cls.n_heads")?,
            ff_mult: get(ckpt, "cls.ff_mult")?,
            max_len: get(ckpt, "cls.max_len")?,
            threshold: get(ckpt, "cls.threshold")?,
        };
        let mut c = Self::new(cfg, objective, get(ckpt, "cls.vocab_size")?, get(ckpt, "cls.n_labels")?, 0)?;
        ckpt.load_into(&mut c.params)?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra_meta: &[(&str, &str)]) -> Result<()> {
        let mut c = self.to_checkpoint();
        for (k, v) in extra_meta {
            c = c.with_meta(*k, *v);
        }
        Ok(c.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Space in which the navigator's score is added to the generator's.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSpace {
    /// `φ_g[t] + λ φ̃_s[t]` on probabilities.
    #[default]
    Probability,
    /// `log φ_g[t] + λ φ̃_s[t]`.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSchedule {
    pub lambda: f64,
    pub k: f64,
    pub mu: f64,
    pub top_n: usize,
    pub space: GuidanceSpace,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self { lambda: 6.0, k: 50.0, mu: 10.0, top_n: 10, space: GuidanceSpace::Probability }
    }
}

impl GuidanceSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be > 0, got {}", self.mu)));
        }
        if !self.k.is_finite() {
            return Err(Error::Config("k must be finite".into()));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be >= 1".into()));
        }
        Ok(())
    }

    /// Logistic factor `1 / (1 + exp((k − l) / μ))`.
    pub fn factor(&self, l: usize) -> f64 {
        schedule_factor(l as f64, self.k, self.mu)
    }
}

pub fn schedule_factor(l: f64, k: f64, mu: f64) -> f64 {
    1.0 / (1.0 + ((k - l) / mu).exp())
}

/// Scales recommendation scores by the schedule factor at length `l`.
pub fn schedule_strength(scores: &[f64], l: usize, schedule: &GuidanceSchedule) -> Result<Vec<f64>> {
    if !(schedule.mu > 0.0) {
        return Err(Error::Config(format!("mu must be > 0, got {}", schedule.mu)));
    }
    let f = schedule.factor(l);
    Ok(scores.iter().map(|s| s * f).collect())
}

/// Softmax over candidates of each candidate's Jaccard similarity with `gold`.
pub fn recommendation_scores(candidate_labels: &[ClaimLabelSet], gold: &ClaimLabelSet) -> Vec<f64> {
    let mut s: Vec<f64> = candidate_labels.iter().map(|a| a.jaccard(gold)).collect();
    kernels::softmax_in_place(&mut s);
    s
}

/// Indices of the `n` largest entries, larger first, ties to the lower index.
pub fn top_n(p: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in p.iter().enumerate() {
        if *x > p[best] {
            best = i;
        }
    }
    best
}

/// Picks the next token from the generator distribution `phi_g` after `l`
/// view tokens. `judge` labels the view extended by a candidate token.
pub fn guided_step<J>(phi_g: &[f64], l: usize, gold: &ClaimLabelSet, schedule: &GuidanceSchedule, mut judge: J) -> Result<usize>
where
    J: FnMut(usize) -> Result<ClaimLabelSet>,
{
    let candidates = top_n(phi_g, schedule.top_n);
    let mut adjusted: Vec<f64> = match schedule.space {
        GuidanceSpace::Probability => phi_g.to_vec(),
        GuidanceSpace::Logit => phi_g.iter().map(|p| p.ln()).collect(),
    };
    if schedule.lambda == 0.0 {
        return Ok(argmax(&adjusted));
    }
    let labels = candidates.iter().map(|&t| judge(t)).collect::<Result<Vec<_>>>()?;
    let scores = schedule_strength(&recommendation_scores(&labels, gold), l, schedule)?;
    for (&t, s) in candidates.iter().zip(&scores) {
        adjusted[t] += schedule.lambda * s;
    }
    Ok(argmax(&adjusted))
}

/// Anything that yields a next-token distribution and accepts tokens.
pub trait TokenGenerator {
    type State: Clone;
    fn distribution(&self, state: &Self::State) -> Result<Vec<f64>>;
    fn append(&self, state: &mut Self::State, token: usize) -> Result<()>;
}

/// Navigator attached to a decoding run: the classifier and the case's
/// claim labels.
pub struct Navigator<'a> {
    pub classifier: &'a PrefixClassifier,
    pub gold: &'a ClaimLabelSet,
    pub schedule: &'a GuidanceSchedule,
}

/// Greedy decoding of up to `max_len` tokens, stopping after `EOS` (which
/// is not returned). With `navigator` set, every step goes through
/// [`guided_step`]; otherwise the most probable token is taken.
pub fn guided_generate<G: TokenGenerator>(
    generator: &G,
    mut state: G::State,
    navigator: Option<&Navigator>,
    max_len: usize,
) -> Result<Vec<usize>> {
    if let Some(nav) = navigator {
        nav.schedule.validate()?;
        if nav.gold.width() != nav.classifier.n_labels {
            return Err(Error::Mismatch("claim labels do not match the classifier".into()));
        }
    }
    let mut cache = navigator.map(|n| n.classifier.start());
    let mut out = Vec::new();
    while out.len() < max_len {
        let phi = generator.distribution(&state)?;
        let token = match (navigator, &cache) {
            (Some(nav), Some(c)) => guided_step(&phi, out.len(), nav.gold, nav.schedule, |t| {
                Ok(ClaimLabelSet::from_probs(&nav.classifier.peek(c, t)?, nav.classifier.cfg.threshold))
            })?,
            _ => argmax(&phi),
        };
        if token == EOS {
            break;
        }
        out.push(token);
        generator.append(&mut state, token)?;
        if let (Some(nav), Some(c)) = (navigator, cache.as_mut()) {
            nav.classifier.step(c, token)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kig_tensor::gradcheck;
    use rand::Rng;

    fn set(bits: &[usize]) -> ClaimLabelSet {
        ClaimLabelSet::from_indices(4, bits)
    }

    #[test]
    fn schedule_factor_values() {
        let s = GuidanceSchedule::default();
        assert!((s.factor(50) - 0.5).abs() < 1e-12);
        assert!((s.factor(0) - 1.0 / (1.0 + 5f64.exp())).abs() < 1e-12);
        assert!((s.factor(0) - 0.0067).abs() < 1e-4);
        assert!((s.factor(100_000) - 1.0).abs() < 1e-12);
        for l in 0..300 {
            assert!(s.factor(l + 1) > s.factor(l));
        }
        let bad = GuidanceSchedule { mu: 0.0, ..s };
        assert!(schedule_strength(&[1.0], 3, &bad).is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn recommendation_score_examples() {
        let gold = set(&[0]);
        assert_eq!(set(&[0]).jaccard(&gold), 1.0);
        assert_eq!(set(&[2]).jaccard(&set(&[1])), 0.0);
        assert_eq!(set(&[0, 1]).jaccard(&gold), 0.5);
        let cands = vec![set(&[0]), set(&[0, 1]), set(&[3])];
        let s = recommendation_scores(&cands, &gold);
        let z = 1f64.exp() + 0.5f64.exp() + 1.0;
        for (a, b) in s.iter().zip([1f64.exp() / z, 0.5f64.exp() / z, 1.0 / z]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn constructed_distribution() -> Vec<f64> {
        // Top-2 = (0.40, 0.38); eight more candidates share the rest.
        let mut p = vec![0.40, 0.38];
        p.extend(std::iter::repeat_n(0.0275, 8));
        p
    }

    #[test]
    fn constructed_case_switches_to_the_matching_candidate() {
        let phi = constructed_distribution();
        let gold = set(&[0, 1]);
        let schedule = GuidanceSchedule::default();
        // Candidate 1 (second) matches the gold labels, the rest match nothing.
        let judge = |t: usize| Ok(if t == 1 { gold.clone() } else { set(&[3]) });
        let chosen = guided_step(&phi, 10_000, &gold, &schedule, judge).unwrap();
        assert_eq!(chosen, 1);
        // Independent arithmetic: softmax of raw scores (0, 1, 0 × 8).
        let z = 9.0 + 1f64.exp();
        let s_top = 1.0 / z;
        let s_match = 1f64.exp() / z;
        assert!(0.38 + 6.0 * s_match > 0.40 + 6.0 * s_top);
        // λ = 0 and top_n = 1 both keep the unguided argmax.
        let off = GuidanceSchedule { lambda: 0.0, ..schedule.clone() };
        assert_eq!(guided_step(&phi, 10_000, &gold, &off, judge).unwrap(), 0);
        let one = GuidanceSchedule { top_n: 1, ..schedule.clone() };
        assert_eq!(guided_step(&phi, 10_000, &gold, &one, judge).unwrap(), 0);
        // Early in the view the schedule keeps guidance weak.
        assert_eq!(guided_step(&phi, 0, &gold, &schedule, judge).unwrap(), 0);
        let logit = GuidanceSchedule { space: GuidanceSpace::Logit, ..schedule };
        assert_eq!(guided_step(&phi, 10_000, &gold, &logit, judge).unwrap(), 1);
    }

    #[test]
    fn guided_choice_stays_within_top_n_or_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut phi: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
            let z: f64 = phi.iter().sum();
            phi.iter_mut().for_each(|p| *p /= z);
            let gold = set(&[rng.gen_range(0..4)]);
            let schedule = GuidanceSchedule { lambda: rng.gen_range(0.0..20.0), top_n: rng.gen_range(1..8), ..Default::default() };
            let labels: Vec<ClaimLabelSet> = (0..30).map(|_| set(&[rng.gen_range(0..4)])).collect();
            let t = guided_step(&phi, rng.gen_range(0..200), &gold, &schedule, |t| Ok(labels[t].clone())).unwrap();
            assert!(top_n(&phi, schedule.top_n).contains(&t));
        }
    }

    #[test]
    fn top_n_and_argmax_break_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(top_n(&[0.1, 0.3, 0.3, 0.2], 3), vec![1, 2, 3]);
    }

    fn tiny_classifier(objective: Objective) -> PrefixClassifier {
        let cfg = ClassifierConfig { width: 8, n_layers: 1, n_heads: 2, ff_mult: 2, max_len: 64, threshold: 0.5 };
        PrefixClassifier::new(cfg, objective, 12, 4, 3).unwrap()
    }

    #[test]
    fn initial_loss_is_about_m_ln2_per_position() {
        let c = tiny_classifier(Objective::AllPrefixes);
        let loss = c.mean_loss(&[(vec![3, 4, 5, 6, 2], set(&[0, 2]))]).unwrap();
        assert!((loss - 4.0 * 2f64.ln()).abs() < 0.5, "{loss}");
    }

    #[test]
    fn eq14_gradients_match_finite_differences() {
        for objective in [Objective::AllPrefixes, Objective::FullView] {
            let c = tiny_classifier(objective);
            let toks = vec![3, 7, 1, 9, 4, 2];
            let labels = set(&[1, 3]);
            let (_, g) = c.loss_and_grads(&c.params, &toks, &labels).unwrap();
            let mut params = c.params.clone();
            g.accumulate_into(&mut params, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let report = gradcheck::check(&params, 60, &mut rng, |p| {
                let mut tape = Tape::new();
                let l = c.loss_on_tape(&mut tape, p, &toks, &labels).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                Ok(tape.scalar(l))
            })
            .unwrap();
            assert!(report.len() >= 50);
            assert!(report.max_rel_error() < 1e-4, "{objective:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn memorizes_a_single_view_and_is_causally_consistent() {
        let mut c = tiny_classifier(Objective::AllPrefixes);
        let ex = vec![(vec![3, 4, 5, 6, 7, 2], set(&[0, 3]))];
        let opts = TrainOpts { epochs: 300, batch_size: 1, lr: 1e-2, clip: 1.0, seed: 0, max_steps: None };
        c.train(&ex, &opts).unwrap();
        assert_eq!(c.predict(&ex[0].0).unwrap(), set(&[0, 3]));
        let mut cache = c.start();
        for i in 0..ex[0].0.len() {
            let inc = c.step(&mut cache, ex[0].0[i]).unwrap();
            let full = c.predict_probs(&ex[0].0[..=i]).unwrap();
            for (a, b) in inc.iter().zip(&full) {
                assert!((a - b).abs() < 1e-9);
                assert!(*a > 0.0 && *a < 1.0);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p, &[]).unwrap();
        let back = PrefixClassifier::load(&p).unwrap();
        assert_eq!(back.predict_probs(&ex[0].0).unwrap(), c.predict_probs(&ex[0].0).unwrap());
        assert_eq!(back.objective, Objective::AllPrefixes);
        assert!(c.train(&[(vec![1], ClaimLabelSet::empty(4))], &opts).is_err());
    }

    /// A fixed table-driven generator: next distribution depends on the
    /// number of tokens so far.
    struct Table(Vec<Vec<f64>>);

    impl TokenGenerator for Table {
        type State = usize;
        fn distribution(&self, s: &usize) -> Result<Vec<f64>> {
            Ok(self.0[(*s).min(self.0.len() - 1)].clone())
        }
        fn append(&self, s: &mut usize, _t: usize) -> Result<()> {
            *s += 1;
            Ok(())
        }
    }

    #[test]
    fn generation_without_navigator_equals_lambda_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table: Vec<Vec<f64>> = (0..15)
            .map(|_| {
                let v: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
                let z: f64 = v.iter().sum();
                v.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let g = Table(table);
        let c = tiny_classifier(Objective::AllPrefixes);
        let gold = set(&[1]);
        let zero = GuidanceSchedule { lambda: 0.0, ..Default::default() };
        let nav = Navigator { classifier: &c, gold: &gold, schedule: &zero };
        let plain = guided_generate(&g, 0, None, 20).unwrap();
        let guided = guided_generate(&g, 0, Some(&nav), 20).unwrap();
        assert_eq!(plain, guided);
        assert!(plain.len() <= 20 && !plain.contains(&EOS));
    }
}
