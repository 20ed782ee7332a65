//! Toy decoder-only language model with prefix key/value injection.
//!
//! Real tokens always occupy positions `prefix_slots..`, whether or not a
//! prefix is attached, so the same frozen weights serve both plain and
//! prefixed decoding. A prefix contributes `prefix_slots` extra key/value
//! rows per layer that every real position may attend to.

use std::path::Path;

use kig_tensor::{kernels, Checkpoint, Gradients, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Binder, CausalStack, StackCache, StackConfig, StackOut, StepOut};
use crate::train::{self, TrainLog, TrainOpts};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub max_seq_len: usize,
    /// Prefix length `m`; also the position of the first real token.
    pub prefix_slots: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, ff_mult: 4, max_seq_len: 512, prefix_slots: 4 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("lm: {m}")));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ff_mult == 0 {
            return bad("sizes must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.prefix_slots == 0 || self.prefix_slots >= self.max_seq_len {
            return bad("prefix_slots must be in 1..max_seq_len");
        }
        Ok(())
    }
}

/// Concrete per-layer prefix keys and values, each `[prefix_slots × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixActivations {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PrefixActivations {
    pub fn zeros(cfg: &LmConfig) -> Self {
        let t = Tensor::zeros(&[cfg.prefix_slots, cfg.d_model]);
        Self { layers: vec![(t.clone(), t); cfg.n_layers] }
    }

    /// Records the activations as tape constants.
    pub fn to_vars(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers.iter().map(|(k, v)| (tape.constant(k), tape.constant(v))).collect()
    }
}

/// Incremental decoding state: per-layer key/value cache and the outputs
/// at the most recently consumed position.
#[derive(Clone, Debug)]
pub struct DecodingState {
    pub cache: StackCache,
    pub last_logits: Option<Vec<f64>>,
    pub last_hidden: Option<Vec<f64>>,
}

impl DecodingState {
    /// Real tokens consumed so far.
    pub fn len(&self) -> usize {
        self.cache.consumed
    }

    pub fn is_empty(&self) -> bool {
        self.cache.consumed == 0
    }
}

pub struct Lm {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub stack: CausalStack,
}

impl Lm {
    pub fn new(cfg: LmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let stack = CausalStack::new(&mut params, "lm", Self::stack_config(&cfg, vocab_size), &mut rng);
        Ok(Self { cfg, vocab_size, params, stack })
    }

    fn stack_config(cfg: &LmConfig, vocab_size: usize) -> StackConfig {
        StackConfig {
            vocab: vocab_size,
            width: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            ff_mult: cfg.ff_mult,
            max_len: cfg.max_seq_len,
            pos_offset: cfg.prefix_slots,
            out_dim: vocab_size,
            learned_positions: true,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// SHA-256 over every parameter; used to prove the model stayed frozen.
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binder, tokens: &[usize], prefix: Option<&[(Var, Var)]>) -> Result<StackOut> {
        self.stack.forward(tape, bind, tokens, prefix)
    }

    /// Mean next-token cross-entropy over targets at indices `>= loss_from`
    /// of `tokens` (the first token is never a target).
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        tokens: &[usize],
        loss_from: usize,
        prefix: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::Config("sequence needs at least two tokens".into()));
        }
        let mask: Vec<bool> = (1..tokens.len()).map(|i| i >= loss_from.max(1)).collect();
        self.masked_loss(tape, bind, &tokens[..tokens.len() - 1], &tokens[1..], &mask, prefix)
    }

    /// Mean cross-entropy of `targets[i]` at input position `i` over
    /// positions where `mask` is set.
    pub fn masked_loss(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        inputs: &[usize],
        targets: &[usize],
        mask: &[bool],
        prefix: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        let out = self.forward(tape, bind, inputs, prefix)?;
        Ok(tape.cross_entropy_lm(out.logits, targets, mask)?)
    }

    /// Softmax of the output head applied to a final hidden state.
    pub fn next_token_distribution(&self, hidden: &[f64]) -> Vec<f64> {
        let mut p = self.stack.head.apply(&self.params, hidden);
        kernels::softmax_in_place(&mut p);
        p
    }

    pub fn start(&self, prefix: Option<&PrefixActivations>) -> Result<DecodingState> {
        let layers = prefix.map(|p| p.layers.as_slice());
        if let Some(p) = prefix {
            if p.layers.first().is_some_and(|(k, _)| k.shape()[0] != self.cfg.prefix_slots) {
                return Err(Error::Mismatch(format!("prefix must have {} slots", self.cfg.prefix_slots)));
            }
        }
        Ok(DecodingState { cache: self.stack.start(layers)?, last_logits: None, last_hidden: None })
    }

    /// Consumes one token and records the outputs at its position.
    pub fn feed(&self, state: &mut DecodingState, token: usize) -> Result<()> {
        let StepOut { hidden, logits } = self.stack.step(&self.params, &mut state.cache, token)?;
        state.last_logits = Some(logits);
        state.last_hidden = Some(hidden);
        Ok(())
    }

    pub fn feed_all(&self, state: &mut DecodingState, tokens: &[usize]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.feed(state, t))
    }

    /// Mean per-token negative log-likelihood of `tokens[loss_from..]`,
    /// computed on the tape without gradients.
    pub fn nll(&self, tokens: &[usize], loss_from: usize, prefix: Option<&PrefixActivations>) -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let pv = prefix.map(|p| p.to_vars(&mut tape));
        let loss = self.sequence_loss(&mut tape, &mut bind, tokens, loss_from, pv.as_deref())?;
        Ok(tape.scalar(loss))
    }

    /// Perplexity over a set of sequences (mean of per-sequence NLL).
    pub fn perplexity(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        Ok(train::mean_over(seqs, |s| self.nll(s, 1, None))?.exp())
    }

    /// Trains every parameter on next-token prediction over whole sequences.
    pub fn pretrain(&mut self, seqs: &[Vec<usize>], opts: &TrainOpts) -> Result<TrainLog> {
        let stack = &self.stack;
        let mut params = std::mem::take(&mut self.params);
        let log = train::train("lm", seqs, &mut params, opts, |p, seq| {
            let mut tape = Tape::new();
            let mut bind = Binder::trainable(p);
            let loss = stack.forward(&mut tape, &mut bind, &seq[..seq.len() - 1], None).and_then(|out| {
                let mask = vec![true; seq.len() - 1];
                Ok(tape.cross_entropy_lm(out.logits, &seq[1..], &mask)?)
            })?;
            let value = tape.scalar(loss);
            let grads: Gradients = tape.backward(loss)?;
            Ok((value, grads))
        });
        self.params = params;
        log
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        Checkpoint::from_params(&self.params)
            .with_meta("kind", "lm")
            .with_meta("lm.n_layers", c.n_layers.to_string())
            .with_meta("lm.d_model", c.d_model.to_string())
            .with_meta("lm.n_heads", c.n_heads.to_string())
            .with_meta("lm.ff_mult", c.ff_mult.to_string())
            .with_meta("lm.max_seq_len", c.max_seq_len.to_string())
            .with_meta("lm.prefix_slots", c.prefix_slots.to_string())
            .with_meta("lm.vocab_size", self.vocab_size.to_string())
            .with_meta("lm.fingerprint", self.fingerprint())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("lm") {
            return Err(Error::Format("checkpoint does not hold a language model".into()));
        }
        let get = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let cfg = LmConfig {
            n_layers: get("lm.n_layers")?,
            d_model: get("lm.d_model")?,
            n_heads: get("lm.n_heads")?,
            ff_mult: get("lm.ff_mult")?,
            max_seq_len: get("lm.max_seq_len")?,
            prefix_slots: get("lm.prefix_slots")?,
        };
        let mut lm = Self::new(cfg, get("lm.vocab_size")?, 0)?;
        ckpt.load_into(&mut lm.params)?;
        Ok(lm)
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
