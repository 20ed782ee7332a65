//! End-to-end stages: data, language model, prompt encoder, classifiers,
//! generation and evaluation.
//!
//! The functions here work in memory; [`crate::run`] wraps them with the
//! on-disk run directory used by the command-line tool.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::corpus::{
    self, build_vocab, extract_labels, generate_corpus, keyword_frequency, ClaimCatalog, ClaimLabelSet, ClaimMix, EncodedCase,
    Split, SynthConfig, Vocab, EOS,
};
use crate::eval::{self, MetricReport};
use crate::lm::{DecodingState, Lm};
use crate::navigator::{guided_generate, GuidanceSchedule, Navigator, Objective, PrefixClassifier, TokenGenerator};
use crate::prompt::{PromptEncoder, PromptExample, PromptFlags};
use crate::{Error, Result};

/// A generated, split and tokenized corpus.
pub struct Dataset {
    pub catalog: ClaimCatalog,
    pub split: Split,
    pub vocab: Vocab,
    pub train: Vec<EncodedCase>,
    pub valid: Vec<EncodedCase>,
    pub test: Vec<EncodedCase>,
    /// Keyword frequency distributions over the training claims.
    pub phi: Vec<Vec<f64>>,
}

pub fn load_catalog(cfg: &RunConfig) -> Result<ClaimCatalog> {
    match &cfg.corpus.catalog {
        Some(p) => ClaimCatalog::load(p),
        None => Ok(ClaimCatalog::default_lending()),
    }
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig { n_cases: cfg.corpus.n_cases, scale: cfg.corpus.scale, mix: ClaimMix::default() }
}

/// Generates and splits the corpus for `cfg`.
pub fn generate_split(cfg: &RunConfig) -> Result<Split> {
    let cases = generate_corpus(cfg.stage_seed("corpus"), &synth_config(cfg))?;
    corpus::split(cases, cfg.stage_seed("split"))
}

impl Dataset {
    pub fn from_split(catalog: ClaimCatalog, split: Split) -> Self {
        let vocab = build_vocab(&split.train, &catalog);
        Self::with_vocab(catalog, split, vocab)
    }

    pub fn with_vocab(catalog: ClaimCatalog, split: Split, vocab: Vocab) -> Self {
        let enc = |cases: &[corpus::CaseRecord]| cases.iter().map(|c| EncodedCase::new(c, &vocab)).collect::<Vec<_>>();
        let phi = keyword_frequency(split.train.iter().map(|c| c.claims.as_str()), &catalog);
        Self { train: enc(&split.train), valid: enc(&split.valid), test: enc(&split.test), catalog, split, vocab, phi }
    }

    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Ok(Self::from_split(load_catalog(cfg)?, generate_split(cfg)?))
    }

    /// Claim labels the navigator aims for: keyword matches in the claims.
    pub fn claim_labels(&self, case: &EncodedCase) -> ClaimLabelSet {
        extract_labels(&self.vocab.detokenize(&case.claims), &self.catalog)
    }
}

/// Language-model pretraining sequences: `[f; SEP; c; SEP; v; EOS]` for
/// every training case (with the view drawn from another case unless the
/// case is selected as aligned) plus each label definition followed by
/// `EOS`.
pub fn lm_sequences(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("lm-data"));
    let n = ds.train.len();
    let mut donors: Vec<usize> = (0..n).collect();
    donors.shuffle(&mut rng);
    let mut seqs = Vec::with_capacity(n + ds.catalog.len());
    for (i, case) in ds.train.iter().enumerate() {
        let aligned = rng.gen::<f64>() < cfg.training.lm_aligned_fraction;
        let mut s = case.context();
        let view = if aligned { &case.view } else { &ds.train[donors[i]].view };
        s.extend_from_slice(view);
        s.push(EOS);
        seqs.push(s);
    }
    for label in ds.catalog.labels() {
        let mut s = ds.vocab.tokenize_strict(&label.definition)?;
        s.push(EOS);
        seqs.push(s);
    }
    Ok(seqs)
}

pub fn pretrain_lm(cfg: &RunConfig, ds: &Dataset) -> Result<Lm> {
    let mut lm = Lm::new(cfg.lm.clone(), ds.vocab.len(), cfg.stage_seed("lm-init"))?;
    let seqs = lm_sequences(cfg, ds)?;
    if let Some(s) = seqs.iter().find(|s| s.len() + cfg.lm.prefix_slots > cfg.lm.max_seq_len) {
        return Err(Error::Config(format!("a {}-token sequence exceeds lm.max_seq_len = {}", s.len(), cfg.lm.max_seq_len)));
    }
    log::info!("language model: {} parameters, {} pretraining sequences", lm.num_params(), seqs.len());
    lm.pretrain(&seqs, &cfg.training.lm.opts(cfg.stage_seed("lm-train")))?;
    Ok(lm)
}

pub fn prompt_examples(lm: &Lm, cases: &[EncodedCase]) -> Result<Vec<PromptExample>> {
    cases.par_iter().map(|c| PromptExample::new(lm, c)).collect()
}

pub fn new_prompt_encoder(cfg: &RunConfig, ds: &Dataset, lm: &Lm, flags: PromptFlags) -> Result<PromptEncoder> {
    PromptEncoder::new(cfg.prompt.clone(), flags, lm, &ds.catalog, &ds.vocab, &ds.phi, cfg.stage_seed("prompt-init"))
}

pub fn train_prompt(cfg: &RunConfig, ds: &Dataset, lm: &Lm, flags: PromptFlags, examples: &[PromptExample]) -> Result<PromptEncoder> {
    let mut enc = new_prompt_encoder(cfg, ds, lm, flags)?;
    let fp = lm.fingerprint();
    enc.train(lm, examples, &cfg.training.prompt.opts(cfg.stage_seed("prompt-train")), &fp)?;
    Ok(enc)
}

pub fn classifier_examples(cases: &[EncodedCase]) -> Vec<(Vec<usize>, ClaimLabelSet)> {
    cases.iter().map(|c| (c.view_with_eos(), c.labels.clone())).collect()
}

/// Stage name of a classifier, used for seeds and file names.
pub fn classifier_stage(objective: Objective) -> &'static str {
    match objective {
        Objective::AllPrefixes => "navigator",
        Objective::FullView => "eval-classifier",
    }
}

pub fn new_classifier(cfg: &RunConfig, ds: &Dataset, objective: Objective) -> Result<PrefixClassifier> {
    let stage = classifier_stage(objective);
    PrefixClassifier::new(cfg.classifier.clone(), objective, ds.vocab.len(), ds.catalog.len(), cfg.stage_seed(&format!("{stage}-init")))
}

pub fn train_classifier(cfg: &RunConfig, ds: &Dataset, objective: Objective) -> Result<PrefixClassifier> {
    let mut c = new_classifier(cfg, ds, objective)?;
    let stage = classifier_stage(objective);
    let opts = match objective {
        Objective::AllPrefixes => &cfg.training.navigator,
        Objective::FullView => &cfg.training.eval_classifier,
    };
    c.train(&classifier_examples(&ds.train), &opts.opts(cfg.stage_seed(&format!("{stage}-train"))))?;
    Ok(c)
}

/// Mi-F of `classifier` on the gold views of `cases`.
pub fn classifier_mif(classifier: &PrefixClassifier, cases: &[EncodedCase]) -> Result<f64> {
    let predicted = cases.par_iter().map(|c| classifier.predict(&c.view_with_eos())).collect::<Result<Vec<_>>>()?;
    let gold: Vec<ClaimLabelSet> = cases.iter().map(|c| c.labels.clone()).collect();
    Ok(eval::claim_response_metrics(&predicted, &gold)?.mif)
}

/// The frozen language model as a [`TokenGenerator`].
pub struct LmGenerator<'a>(pub &'a Lm);

impl TokenGenerator for LmGenerator<'_> {
    type State = DecodingState;

    fn distribution(&self, state: &DecodingState) -> Result<Vec<f64>> {
        let hidden = state.last_hidden.as_ref().ok_or_else(|| Error::Config("decoding state has no context".into()))?;
        Ok(self.0.next_token_distribution(hidden))
    }

    fn append(&self, state: &mut DecodingState, token: usize) -> Result<()> {
        self.0.feed(state, token)
    }
}

/// Longest view the model can generate after `context_len` context tokens.
pub fn max_view_len(lm: &Lm, ds_view_cap: usize, context_len: usize) -> usize {
    let room = lm.cfg.max_seq_len.saturating_sub(lm.cfg.prefix_slots + context_len);
    ds_view_cap.min(room)
}

/// Decodes one view for `case` (without `EOS`).
pub fn generate_view(
    ds: &Dataset,
    lm: &Lm,
    prompt: Option<&PromptEncoder>,
    navigator: Option<(&PrefixClassifier, &GuidanceSchedule)>,
    view_cap: usize,
    case: &EncodedCase,
) -> Result<Vec<usize>> {
    let context = case.context();
    let prefix = match prompt {
        Some(p) => Some(p.encode_prefix(lm, &crate::prompt::context_hidden(lm, &context)?)?),
        None => None,
    };
    let mut state = lm.start(prefix.as_ref())?;
    lm.feed_all(&mut state, &context)?;
    let gold = ds.claim_labels(case);
    let nav = navigator.map(|(classifier, schedule)| Navigator { classifier, gold: &gold, schedule });
    guided_generate(&LmGenerator(lm), state, nav.as_ref(), max_view_len(lm, view_cap, context.len()))
}

/// Decodes views for every case, in parallel, in case order.
pub fn generate_views(
    ds: &Dataset,
    lm: &Lm,
    prompt: Option<&PromptEncoder>,
    navigator: Option<(&PrefixClassifier, &GuidanceSchedule)>,
    view_cap: usize,
    cases: &[EncodedCase],
) -> Result<Vec<Vec<usize>>> {
    cases.par_iter().map(|c| generate_view(ds, lm, prompt, navigator, view_cap, c)).collect()
}

/// Scores views generated for `cases`.
pub fn evaluate_views(generated: &[Vec<usize>], cases: &[EncodedCase], judge: &PrefixClassifier) -> Result<MetricReport> {
    let refs: Vec<Vec<usize>> = cases.iter().map(|c| c.view.clone()).collect();
    let gold: Vec<ClaimLabelSet> = cases.iter().map(|c| c.labels.clone()).collect();
    eval::evaluate(generated, &refs, &gold, judge)
}
