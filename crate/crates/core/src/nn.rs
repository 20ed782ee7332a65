//! Transformer building blocks shared by every model in the crate.
//!
//! Each layer has two forward paths: a tape path used for training (and
//! for batch inference), and a row-at-a-time path over a key/value cache
//! used for decoding. The two are written independently so the cached path
//! can be checked against the tape path.

use kig_tensor::kernels::{self, vecmat};
use kig_tensor::{ParamId, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use crate::{Error, Result};

/// Binds parameters of one [`ParamSet`] onto a tape, once per tape.
///
/// A frozen binder records parameters as constants, so no gradient is ever
/// computed for them.
pub struct Binder<'a> {
    params: &'a ParamSet,
    trainable: bool,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn trainable(params: &'a ParamSet) -> Self {
        Self { params, trainable: true, bound: vec![None; params.len()] }
    }

    pub fn frozen(params: &'a ParamSet) -> Self {
        Self { params, trainable: false, bound: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = if self.trainable {
            tape.param(self.params, id)
        } else {
            tape.constant(self.params.get(id))
        };
        self.bound[id.0] = Some(v);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binder, x: Var) -> Result<Var> {
        let w = bind.get(tape, self.w);
        let b = bind.get(tape, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    pub fn apply(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_out];
        vecmat(x, params.get(self.w).data(), self.d_out, &mut out);
        for (o, b) in out.iter_mut().zip(params.get(self.b).data()) {
            *o += b;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.g"), Tensor::ones(&[d])),
            beta: params.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binder, x: Var) -> Result<Var> {
        let g = bind.get(tape, self.gamma);
        let b = bind.get(tape, self.beta);
        Ok(tape.layer_norm(x, g, b)?)
    }

    pub fn apply(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        kernels::layer_norm_row(&mut out, params.get(self.gamma).data(), params.get(self.beta).data());
        out
    }
}

/// Attention masking mode on the tape path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    /// Query `i` sees every prefix slot and keys `0..=i`.
    Causal,
    /// Every query sees every key.
    Full,
}

/// Multi-head attention. Queries come from a `d_q`-wide input, keys and
/// values from a `d_kv`-wide input, all projected to `width`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub width: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_q: usize,
        d_kv: usize,
        width: usize,
        n_heads: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        assert!(width.is_multiple_of(n_heads), "width must divide into heads");
        let std_q = 1.0 / (d_q as f64).sqrt();
        let std_kv = 1.0 / (d_kv as f64).sqrt();
        Self {
            q: Linear::new(params, &format!("{name}.q"), d_q, width, std_q, rng),
            k: Linear::new(params, &format!("{name}.k"), d_kv, width, std_kv, rng),
            v: Linear::new(params, &format!("{name}.v"), d_kv, width, std_kv, rng),
            o: Linear::new(params, &format!("{name}.o"), width, width, out_std, rng),
            n_heads,
            width,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    /// `prefix` supplies already-projected key/value rows placed ahead of
    /// the keys computed from `kv_in`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        q_in: Var,
        kv_in: Var,
        mask: Mask,
        prefix: Option<(Var, Var)>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, bind, q_in)?;
        let mut k = self.k.forward(tape, bind, kv_in)?;
        let mut v = self.v.forward(tape, bind, kv_in)?;
        let mut n_prefix = 0;
        if let Some((pk, pv)) = prefix {
            n_prefix = tape.shape(pk)[0];
            k = tape.concat_rows(&[pk, k])?;
            v = tape.concat_rows(&[pv, v])?;
        }
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale);
            let p = match mask {
                Mask::Causal => tape.causal_softmax(s, n_prefix)?,
                Mask::Full => tape.softmax(s, 1)?,
            };
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.o.forward(tape, bind, cat)
    }

    /// One query row against cached keys/values plus an optional extra row.
    pub fn attend_row(
        &self,
        params: &ParamSet,
        q: &[f64],
        cache: &KvCache,
        extra: Option<(&[f64], &[f64])>,
    ) -> Vec<f64> {
        let dh = self.head_dim();
        let w = self.width;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = cache.rows + usize::from(extra.is_some());
        let mut out = vec![0.0; w];
        let mut scores = vec![0.0; rows];
        for h in 0..self.n_heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (r, s) in scores.iter_mut().enumerate() {
                let key = if r < cache.rows {
                    &cache.keys[r * w..(r + 1) * w]
                } else {
                    extra.expect("extra row").0
                };
                *s = kernels::dot(qh, &key[h * dh..(h + 1) * dh]) * scale;
            }
            kernels::softmax_in_place(&mut scores);
            let oh = &mut out[h * dh..(h + 1) * dh];
            for (r, &p) in scores.iter().enumerate() {
                let val = if r < cache.rows {
                    &cache.values[r * w..(r + 1) * w]
                } else {
                    extra.expect("extra row").1
                };
                for (o, x) in oh.iter_mut().zip(&val[h * dh..(h + 1) * dh]) {
                    *o += p * x;
                }
            }
        }
        self.o.apply(params, &out)
    }
}

/// Key and value rows produced for one position of one layer.
type RowKv = (Vec<f64>, Vec<f64>);

/// Keys and values of one attention layer, row-major `[rows × width]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub rows: usize,
}

impl KvCache {
    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.rows += 1;
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub cross: Option<(Norm, Attention)>,
    pub ln2: Norm,
    pub up: Linear,
    pub down: Linear,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        n_heads: usize,
        ff_mult: usize,
        cross_from: Option<usize>,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let attn = Attention::new(params, &format!("{name}.attn"), width, width, width, n_heads, out_std, rng);
        let cross = cross_from.map(|d_ctx| {
            (
                Norm::new(params, &format!("{name}.ln_x"), width),
                Attention::new(params, &format!("{name}.xattn"), width, d_ctx, width, n_heads, out_std, rng),
            )
        });
        let hidden = width * ff_mult;
        Self {
            ln1: Norm::new(params, &format!("{name}.ln1"), width),
            attn,
            cross,
            ln2: Norm::new(params, &format!("{name}.ln2"), width),
            up: Linear::new(params, &format!("{name}.up"), width, hidden, 1.0 / (width as f64).sqrt(), rng),
            down: Linear::new(params, &format!("{name}.down"), hidden, width, out_std, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        x: Var,
        mask: Mask,
        prefix: Option<(Var, Var)>,
        context: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, bind, x)?;
        let a = self.attn.forward(tape, bind, h, h, mask, prefix)?;
        let mut x = tape.add(x, a)?;
        if let Some((ln, cross)) = &self.cross {
            let ctx = context.ok_or_else(|| Error::Config("cross-attention block needs a context".into()))?;
            let h = ln.forward(tape, bind, x)?;
            let c = cross.forward(tape, bind, h, ctx, Mask::Full, None)?;
            x = tape.add(x, c)?;
        }
        let h = self.ln2.forward(tape, bind, x)?;
        let u = self.up.forward(tape, bind, h)?;
        let u = tape.gelu(u);
        let f = self.down.forward(tape, bind, u)?;
        Ok(tape.add(x, f)?)
    }

    /// Cached single-position step for self-attention-only blocks. Returns
    /// the block output and the new row's key and value, which the caller
    /// appends to `cache` when the position is consumed.
    pub fn step(&self, params: &ParamSet, x: &[f64], cache: &KvCache) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.ln1.apply(params, x);
        let q = self.attn.q.apply(params, &h);
        let k = self.attn.k.apply(params, &h);
        let v = self.attn.v.apply(params, &h);
        let a = self.attn.attend_row(params, &q, cache, Some((&k, &v)));
        let x1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let h = self.ln2.apply(params, &x1);
        let u: Vec<f64> = self.up.apply(params, &h).into_iter().map(kernels::gelu).collect();
        let f = self.down.apply(params, &u);
        (x1.iter().zip(&f).map(|(p, q)| p + q).collect(), k, v)
    }
}

/// Fixed sinusoidal position code for position `pos` at width `d`.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 { angle.sin() } else { angle.cos() }
        })
        .collect()
}

pub fn sinusoid_table(start: usize, len: usize, d: usize) -> Tensor {
    let data = (start..start + len).flat_map(|p| sinusoid(p, d)).collect();
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

#[derive(Clone, Debug)]
pub enum Positions {
    Learned(ParamId),
    Sinusoidal,
}

/// Configuration of a [`CausalStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub vocab: usize,
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    /// Position index of the first real token.
    pub pos_offset: usize,
    pub out_dim: usize,
    pub learned_positions: bool,
}

/// Embedding → causal blocks → final norm → linear head.
#[derive(Clone, Debug)]
pub struct CausalStack {
    pub cfg: StackConfig,
    pub tok: ParamId,
    pub pos: Positions,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub head: Linear,
}

/// Tape outputs of [`CausalStack::forward`].
pub struct StackOut {
    /// Residual stream after each block, `[T × width]`.
    pub layers: Vec<Var>,
    /// Final normalized hidden states, `[T × width]`.
    pub hidden: Var,
    /// Head outputs, `[T × out_dim]`.
    pub logits: Var,
}

/// Per-layer caches plus the number of real tokens consumed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StackCache {
    pub layers: Vec<KvCache>,
    pub consumed: usize,
    pub prefix_len: usize,
}

impl StackCache {
    pub fn cache_len(&self) -> usize {
        self.layers.first().map_or(0, |c| c.rows)
    }
}

/// Outputs of one cached step.
pub struct StepOut {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl CausalStack {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, cfg: StackConfig, rng: &mut R) -> Self {
        let tok = params.add(format!("{name}.tok"), Tensor::randn(&[cfg.vocab, cfg.width], 0.1, rng));
        let pos = if cfg.learned_positions {
            Positions::Learned(params.add(format!("{name}.pos"), Tensor::randn(&[cfg.max_len, cfg.width], 0.02, rng)))
        } else {
            Positions::Sinusoidal
        };
        let out_std = 1.0 / (cfg.width as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|l| Block::new(params, &format!("{name}.h{l}"), cfg.width, cfg.n_heads, cfg.ff_mult, None, out_std, rng))
            .collect();
        let ln_f = Norm::new(params, &format!("{name}.ln_f"), cfg.width);
        let head = Linear::new(params, &format!("{name}.head"), cfg.width, cfg.out_dim, 1.0 / (cfg.width as f64).sqrt(), rng);
        Self { cfg, tok, pos, blocks, ln_f, head }
    }

    fn check_len(&self, start: usize, len: usize) -> Result<()> {
        let end = self.cfg.pos_offset + start + len;
        if end > self.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence needs {end} positions but max_seq_len is {}",
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Tensor(kig_tensor::TensorError::IndexOutOfRange { index: t, bound: self.cfg.vocab }));
        }
        Ok(())
    }

    /// Full causal forward on the tape. `prefix` holds one `(keys, values)`
    /// pair per layer, each `[l_p × width]`.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binder, tokens: &[usize], prefix: Option<&[(Var, Var)]>) -> Result<StackOut> {
        self.check_tokens(tokens)?;
        self.check_len(0, tokens.len())?;
        if let Some(p) = prefix {
            if p.len() != self.blocks.len() {
                return Err(Error::Mismatch(format!("prefix has {} layers, model has {}", p.len(), self.blocks.len())));
            }
        }
        let tok = bind.get(tape, self.tok);
        let emb = tape.embedding(tok, tokens)?;
        let pos = match &self.pos {
            Positions::Learned(id) => {
                let table = bind.get(tape, *id);
                tape.slice_rows(table, self.cfg.pos_offset, tokens.len())?
            }
            Positions::Sinusoidal => tape.constant(&sinusoid_table(self.cfg.pos_offset, tokens.len(), self.cfg.width)),
        };
        let mut x = tape.add(emb, pos)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let pre = prefix.map(|p| p[l]);
            x = block.forward(tape, bind, x, Mask::Causal, pre, None)?;
            layers.push(x);
        }
        let hidden = self.ln_f.forward(tape, bind, x)?;
        let logits = self.head.forward(tape, bind, hidden)?;
        Ok(StackOut { layers, hidden, logits })
    }

    /// Empty cache, optionally seeded with prefix key/value rows per layer.
    pub fn start(&self, prefix: Option<&[(Tensor, Tensor)]>) -> Result<StackCache> {
        let mut layers = vec![KvCache::default(); self.blocks.len()];
        let mut prefix_len = 0;
        if let Some(p) = prefix {
            if p.len() != self.blocks.len() {
                return Err(Error::Mismatch(format!("prefix has {} layers, model has {}", p.len(), self.blocks.len())));
            }
            for (cache, (k, v)) in layers.iter_mut().zip(p) {
                let (rows, w) = k.dims2()?;
                if w != self.cfg.width || v.shape() != k.shape() {
                    return Err(Error::Mismatch("prefix block width does not match the model".into()));
                }
                cache.keys = k.data().to_vec();
                cache.values = v.data().to_vec();
                cache.rows = rows;
                prefix_len = rows;
            }
        }
        Ok(StackCache { layers, consumed: 0, prefix_len })
    }

    fn embed_row(&self, params: &ParamSet, token: usize, position: usize) -> Vec<f64> {
        let w = self.cfg.width;
        let e = &params.get(self.tok).data()[token * w..(token + 1) * w];
        let p = self.cfg.pos_offset + position;
        match &self.pos {
            Positions::Learned(id) => {
                let row = &params.get(*id).data()[p * w..(p + 1) * w];
                e.iter().zip(row).map(|(a, b)| a + b).collect()
            }
            Positions::Sinusoidal => e.iter().zip(sinusoid(p, w)).map(|(a, b)| a + b).collect(),
        }
    }

    fn run_row(&self, params: &ParamSet, cache: &StackCache, token: usize) -> Result<(StepOut, Vec<RowKv>)> {
        self.check_tokens(&[token])?;
        self.check_len(cache.consumed, 1)?;
        let mut x = self.embed_row(params, token, cache.consumed);
        let mut rows = Vec::with_capacity(self.blocks.len());
        for (block, layer) in self.blocks.iter().zip(&cache.layers) {
            let (out, k, v) = block.step(params, &x, layer);
            rows.push((k, v));
            x = out;
        }
        let hidden = self.ln_f.apply(params, &x);
        let logits = self.head.apply(params, &hidden);
        Ok((StepOut { hidden, logits }, rows))
    }

    /// Consumes `token` and returns outputs at its position.
    pub fn step(&self, params: &ParamSet, cache: &mut StackCache, token: usize) -> Result<StepOut> {
        let (out, rows) = self.run_row(params, cache, token)?;
        for (layer, (k, v)) in cache.layers.iter_mut().zip(rows) {
            layer.push(&k, &v);
        }
        cache.consumed += 1;
        Ok(out)
    }

    /// Outputs `token` would produce, without consuming it.
    pub fn peek(&self, params: &ParamSet, cache: &StackCache, token: usize) -> Result<StepOut> {
        Ok(self.run_row(params, cache, token)?.0)
    }
}
