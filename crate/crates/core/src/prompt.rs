//! Knowledge-injected prompt encoder.
//!
//! Produces per-case prefix keys and values for the frozen language model:
//!
//! 1. claim-label slot embeddings `D̂_p` initialized from keyword embeddings
//!    weighted by keyword frequency ([`init_prefix`]);
//! 2. label semantics `C`, one vector per label definition, from a small
//!    bidirectional encoder over the model's (frozen) token embeddings,
//!    mean-pooled over positions;
//! 3. label attention: each context state `h_t` scores the labels with
//!    `h_tᵀ W_c C_i`, takes a softmax over labels, and adds the weighted
//!    label vector back onto `h_t`;
//! 4. a one-block autoregressive network over the `m` slots that
//!    cross-attends to the claim-aware context and projects each slot to
//!    keys and values for every layer.
//!
//! The encoder runs at a narrow internal width and projects up to the
//! model width only at its boundaries, which keeps it well under a fifth of
//! the language model's parameter count.

use std::path::Path;

use kig_tensor::{Checkpoint, Gradients, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClaimCatalog, EncodedCase, Vocab};
use crate::lm::{Lm, PrefixActivations};
use crate::nn::{Binder, Block, Linear, Mask, Norm};
use crate::train::{self, TrainLog, TrainOpts};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Internal width of the definition encoder and prompt network.
    pub width: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { width: 16, n_heads: 2, ff_mult: 2 }
    }
}

/// Ablation switches of the prompt encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptFlags {
    /// Random slot embeddings instead of keyword initialization.
    pub no_keyword_init: bool,
    /// Feed the raw context states to the prompt network.
    pub no_label_attention: bool,
}

impl PromptFlags {
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.no_keyword_init {
            parts.push("no-keyword-init");
        }
        if self.no_label_attention {
            parts.push("no-label-attention");
        }
        parts.join("+")
    }
}

/// Keyword-initialized slot embeddings: row `i` is
/// `Σ_k φ_{i,k} · E(keyword_{i,k})`, where a multi-token keyword's embedding
/// is the mean of its token rows. Every keyword token must be in vocabulary.
pub fn init_prefix(catalog: &ClaimCatalog, vocab: &Vocab, embeddings: &Tensor, phi: &[Vec<f64>]) -> Result<Tensor> {
    let (_, d) = embeddings.dims2()?;
    if phi.len() != catalog.len() {
        return Err(Error::Mismatch(format!("{} frequency rows for {} labels", phi.len(), catalog.len())));
    }
    let mut out = vec![0.0; catalog.len() * d];
    for (i, (label, weights)) in catalog.labels().iter().zip(phi).enumerate() {
        if weights.len() != label.keywords.len() {
            return Err(Error::Mismatch(format!("label {:?}: frequency length", label.name)));
        }
        for (kw, &w) in label.keywords.iter().zip(weights) {
            let ids = vocab.tokenize_strict(kw)?;
            if ids.is_empty() {
                return Err(Error::Catalog(format!("empty keyword in {:?}", label.name)));
            }
            let share = w / ids.len() as f64;
            for id in ids {
                for (o, e) in out[i * d..(i + 1) * d].iter_mut().zip(embeddings.row(id)) {
                    *o += share * e;
                }
            }
        }
    }
    Ok(Tensor::new(vec![catalog.len(), d], out)?)
}

/// Label attention on the tape: `h + softmax_labels(h W_c Cᵀ) C`.
pub fn label_attention(tape: &mut Tape, h: Var, w_c: Var, c: Var) -> Result<Var> {
    let hw = tape.matmul(h, w_c)?;
    let scores = tape.matmul_t(hw, c)?;
    let weights = tape.softmax(scores, 1)?;
    let mixed = tape.matmul(weights, c)?;
    Ok(tape.add(h, mixed)?)
}

/// One training example: the full sequence, where the view starts, and the
/// frozen model's final hidden states over the context.
#[derive(Clone, Debug)]
pub struct PromptExample {
    pub tokens: Vec<usize>,
    pub view_start: usize,
    pub h_fc: Tensor,
}

impl PromptExample {
    pub fn new(lm: &Lm, case: &EncodedCase) -> Result<Self> {
        let (tokens, view_start) = case.full_sequence();
        Ok(Self { h_fc: context_hidden(lm, &tokens[..view_start])?, tokens, view_start })
    }
}

/// Final normalized hidden states of the frozen model over `context`.
pub fn context_hidden(lm: &Lm, context: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut bind = Binder::frozen(&lm.params);
    let out = lm.forward(&mut tape, &mut bind, context, None)?;
    Ok(tape.to_tensor(out.hidden))
}

pub struct PromptEncoder {
    pub cfg: PromptConfig,
    pub flags: PromptFlags,
    pub params: ParamSet,
    n_layers: usize,
    d_model: usize,
    definitions: Vec<Vec<usize>>,
    slots: ParamId,
    w_c: ParamId,
    def_in: Linear,
    def_block: Block,
    def_out: Linear,
    slot_in: Linear,
    net: Block,
    net_ln: Norm,
    net_out: Linear,
}

impl PromptEncoder {
    /// Builds an encoder for `lm`. `phi` holds per-label keyword frequency
    /// distributions (ignored under `no_keyword_init`).
    pub fn new(
        cfg: PromptConfig,
        flags: PromptFlags,
        lm: &Lm,
        catalog: &ClaimCatalog,
        vocab: &Vocab,
        phi: &[Vec<f64>],
        seed: u64,
    ) -> Result<Self> {
        let m = catalog.len();
        if m != lm.cfg.prefix_slots {
            return Err(Error::Mismatch(format!(
                "catalog has {m} labels but the model reserves {} prefix slots",
                lm.cfg.prefix_slots
            )));
        }
        if cfg.width == 0 || cfg.n_heads == 0 || !cfg.width.is_multiple_of(cfg.n_heads) {
            return Err(Error::Config("prompt: width must be a positive multiple of n_heads".into()));
        }
        let d = lm.cfg.d_model;
        let n = lm.cfg.n_layers;
        let r = cfg.width;
        let definitions = catalog
            .labels()
            .iter()
            .map(|l| {
                let ids = vocab.tokenize_strict(&l.definition)?;
                if ids.is_empty() {
                    return Err(Error::Catalog(format!("empty definition for {:?}", l.name)));
                }
                Ok(ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = lm.params.get(lm.stack.tok);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slot_init = if flags.no_keyword_init {
            let data = embeddings.data();
            let mean = data.iter().sum::<f64>() / data.len() as f64;
            let std = (data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
            Tensor::randn(&[m, d], std, &mut rng)
        } else {
            init_prefix(catalog, vocab, embeddings, phi)?
        };
        let mut params = ParamSet::new();
        let slots = params.add("prompt.slots", slot_init);
        let w_c = params.add("prompt.w_c", Tensor::randn(&[d, d], 0.02, &mut rng));
        let std_d = 1.0 / (d as f64).sqrt();
        let std_r = 1.0 / (r as f64).sqrt();
        let def_in = Linear::new(&mut params, "prompt.def.in", d, r, std_d, &mut rng);
        let def_block = Block::new(&mut params, "prompt.def.h0", r, cfg.n_heads, cfg.ff_mult, None, std_r, &mut rng);
        let def_out = Linear::new(&mut params, "prompt.def.out", r, d, std_r, &mut rng);
        let slot_in = Linear::new(&mut params, "prompt.net.in", d, r, std_d, &mut rng);
        let net = Block::new(&mut params, "prompt.net.h0", r, cfg.n_heads, cfg.ff_mult, Some(d), std_r, &mut rng);
        let net_ln = Norm::new(&mut params, "prompt.net.ln", r);
        let net_out = Linear::new(&mut params, "prompt.net.out", r, 2 * n * d, std_r, &mut rng);
        Ok(Self {
            cfg,
            flags,
            params,
            n_layers: n,
            d_model: d,
            definitions,
            slots,
            w_c,
            def_in,
            def_block,
            def_out,
            slot_in,
            net,
            net_ln,
            net_out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn slots(&self) -> &Tensor {
        self.params.get(self.slots)
    }

    /// Label semantics `C` `[m × d]`.
    pub fn encode_definitions(&self, tape: &mut Tape, bind: &mut Binder, lm: &Lm, lm_bind: &mut Binder) -> Result<Var> {
        let table = lm_bind.get(tape, lm.stack.tok);
        let mut rows = Vec::with_capacity(self.definitions.len());
        for ids in &self.definitions {
            let e = tape.embedding(table, ids)?;
            let x = self.def_in.forward(tape, bind, e)?;
            let x = self.def_block.forward(tape, bind, x, Mask::Full, None, None)?;
            let x = self.def_out.forward(tape, bind, x)?;
            rows.push(tape.mean_pool(x)?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Claim-aware context `h'_fc` (or `h_fc` itself under the ablation).
    pub fn claim_aware_context(&self, tape: &mut Tape, bind: &mut Binder, lm: &Lm, lm_bind: &mut Binder, h_fc: Var) -> Result<Var> {
        if self.flags.no_label_attention {
            return Ok(h_fc);
        }
        let c = self.encode_definitions(tape, bind, lm, lm_bind)?;
        let w_c = bind.get(tape, self.w_c);
        label_attention(tape, h_fc, w_c, c)
    }

    /// Per-layer prefix `(keys, values)` on the tape.
    pub fn prefix_vars(&self, tape: &mut Tape, bind: &mut Binder, lm: &Lm, lm_bind: &mut Binder, h_fc: &Tensor) -> Result<Vec<(Var, Var)>> {
        if h_fc.ndim() != 2 || h_fc.shape()[1] != self.d_model {
            return Err(Error::Mismatch(format!("context states have shape {:?}, expected [T × {}]", h_fc.shape(), self.d_model)));
        }
        let h = tape.constant(h_fc);
        let ctx = self.claim_aware_context(tape, bind, lm, lm_bind, h)?;
        let slots = bind.get(tape, self.slots);
        let x = self.slot_in.forward(tape, bind, slots)?;
        let x = self.net.forward(tape, bind, x, Mask::Causal, None, Some(ctx))?;
        let x = self.net_ln.forward(tape, bind, x)?;
        let out = self.net_out.forward(tape, bind, x)?;
        let d = self.d_model;
        (0..self.n_layers)
            .map(|l| Ok((tape.slice_cols(out, 2 * l * d, d)?, tape.slice_cols(out, (2 * l + 1) * d, d)?)))
            .collect()
    }

    pub fn encode_prefix(&self, lm: &Lm, h_fc: &Tensor) -> Result<PrefixActivations> {
        let mut tape = Tape::new();
        let mut bind = Binder::frozen(&self.params);
        let mut lm_bind = Binder::frozen(&lm.params);
        let vars = self.prefix_vars(&mut tape, &mut bind, lm, &mut lm_bind, h_fc)?;
        Ok(PrefixActivations { layers: vars.into_iter().map(|(k, v)| (tape.to_tensor(k), tape.to_tensor(v))).collect() })
    }

    /// Mean view-token negative log-likelihood under `params` (Eq. 13 loss
    /// normalized by the number of view targets), recorded on `tape`.
    pub fn loss_on_tape(&self, tape: &mut Tape, params: &ParamSet, lm: &Lm, ex: &PromptExample) -> Result<Var> {
        let mut bind = Binder::trainable(params);
        let mut lm_bind = Binder::frozen(&lm.params);
        let prefix = self.prefix_vars(tape, &mut bind, lm, &mut lm_bind, &ex.h_fc)?;
        lm.sequence_loss(tape, &mut lm_bind, &ex.tokens, ex.view_start, Some(&prefix))
    }

    pub fn loss_and_grads(&self, params: &ParamSet, lm: &Lm, ex: &PromptExample) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, params, lm, ex)?;
        let value = tape.scalar(loss);
        Ok((value, tape.backward(loss)?))
    }

    pub fn mean_loss(&self, lm: &Lm, examples: &[PromptExample]) -> Result<f64> {
        train::mean_over(examples, |ex| {
            let mut tape = Tape::new();
            let loss = self.loss_on_tape(&mut tape, &self.params, lm, ex)?;
            Ok(tape.scalar(loss))
        })
    }

    /// Trains the encoder against the frozen model, refusing to run if the
    /// model's fingerprint differs from `lm_fingerprint` before or after.
    pub fn train(&mut self, lm: &Lm, examples: &[PromptExample], opts: &TrainOpts, lm_fingerprint: &str) -> Result<TrainLog> {
        let check = |lm: &Lm| {
            let found = lm.fingerprint();
            if found != lm_fingerprint {
                return Err(Error::LmNotFrozen { expected: lm_fingerprint.to_string(), found });
            }
            Ok(())
        };
        check(lm)?;
        let mut params = std::mem::take(&mut self.params);
        let log = train::train("prompt", examples, &mut params, opts, |p, ex| self.loss_and_grads(p, lm, ex));
        self.params = params;
        check(lm)?;
        log
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
            .with_meta("kind", "prompt")
            .with_meta("prompt.width", self.cfg.width.to_string())
            .with_meta("prompt.n_heads", self.cfg.n_heads.to_string())
            .with_meta("prompt.ff_mult", self.cfg.ff_mult.to_string())
            .with_meta("prompt.no_keyword_init", self.flags.no_keyword_init.to_string())
            .with_meta("prompt.no_label_attention", self.flags.no_label_attention.to_string())
    }

    /// Restores an encoder saved with [`PromptEncoder::to_checkpoint`]; the
    /// catalog and vocabulary must match the ones it was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint, lm: &Lm, catalog: &ClaimCatalog, vocab: &Vocab) -> Result<Self> {
        if ckpt.meta("kind") != Some("prompt") {
            return Err(Error::Format("checkpoint does not hold a prompt encoder".into()));
        }
        let num = |k: &str| -> Result<usize> {
            ckpt.meta(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let flag = |k: &str| -> Result<bool> {
            ckpt.meta(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let cfg = PromptConfig { width: num("prompt.width")?, n_heads: num("prompt.n_heads")?, ff_mult: num("prompt.ff_mult")? };
        let flags = PromptFlags {
            no_keyword_init: flag("prompt.no_keyword_init")?,
            no_label_attention: flag("prompt.no_label_attention")?,
        };
        let phi: Vec<Vec<f64>> = catalog.labels().iter().map(|l| vec![1.0 / l.keywords.len() as f64; l.keywords.len()]).collect();
        let mut enc = Self::new(cfg, flags, lm, catalog, vocab, &phi, 0)?;
        ckpt.load_into(&mut enc.params)?;
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra_meta: &[(&str, &str)]) -> Result<()> {
        let mut c = self.to_checkpoint();
        for (k, v) in extra_meta {
            c = c.with_meta(*k, *v);
        }
        Ok(c.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, lm: &Lm, catalog: &ClaimCatalog, vocab: &Vocab) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, lm, catalog, vocab)
    }

    /// Zeroes the cross-attention output projection, cutting the prompt
    /// network off from the context (used by tests).
    pub fn zero_cross_attention(&mut self) {
        if let Some((_, cross)) = &self.net.cross {
            for id in [cross.o.w, cross.o.b] {
                self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn w_c_id(&self) -> ParamId {
        self.w_c
    }
}
