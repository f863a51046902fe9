//! The main path: a small pre-norm decoder-only transformer with a KV cache
//! that also keeps the final (post-normalization) latent of every position.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, LmSequence, TokenId};
use crate::error::{L2dError, Result};
use crate::numerics::{softmax_row, AttnLayout, AttnSegment, Graph, Scalar, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, ParamGrads};
use crate::params::{read_checkpoint, write_checkpoint, Bound, ParamRole, ParamStore};

pub const BASE_LM_KIND: &str = "base_lm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Rotary,
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub position_encoding: PositionEncoding,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl Default for BaseLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            position_encoding: PositionEncoding::Rotary,
            mlp_ratio: default_mlp_ratio(),
            rope_base: default_rope_base(),
        }
    }
}

impl BaseLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(L2dError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(L2dError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.position_encoding == PositionEncoding::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(L2dError::Config("rotary encoding needs an even head width".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

pub(crate) fn block_param(layer: usize, name: &str) -> String {
    format!("blocks.{layer}.{name}")
}

/// Per-layer keys (after rotary encoding) and values plus the final latent of
/// every processed position. Entries are only ever appended.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<F> {
    d_model: usize,
    len: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    latents: Vec<F>,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            d_model,
            len: 0,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            latents: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn keys(&self, layer: usize) -> Tensor<F> {
        Tensor::from_parts(vec![self.len, self.d_model], self.keys[layer].clone())
    }

    pub fn values(&self, layer: usize) -> Tensor<F> {
        Tensor::from_parts(vec![self.len, self.d_model], self.values[layer].clone())
    }

    pub fn key_slice(&self, layer: usize) -> &[F] {
        &self.keys[layer]
    }

    pub fn value_slice(&self, layer: usize) -> &[F] {
        &self.values[layer]
    }

    /// Final-layer latent at `pos`, i.e. the input to the output head.
    pub fn latent(&self, pos: usize) -> &[F] {
        &self.latents[pos * self.d_model..(pos + 1) * self.d_model]
    }

    fn append(&mut self, keys: &[&Tensor<F>], values: &[&Tensor<F>], latents: &Tensor<F>) {
        for (l, k) in keys.iter().enumerate() {
            self.keys[l].extend_from_slice(k.data());
        }
        for (l, v) in values.iter().enumerate() {
            self.values[l].extend_from_slice(v.data());
        }
        self.latents.extend_from_slice(latents.data());
        self.len += latents.rows();
    }
}

/// Main-path activations of a stacked batch of sequences.
#[derive(Debug, Clone)]
pub struct BatchActivations<F> {
    /// Start row of each sequence.
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub keys: Vec<Tensor<F>>,
    pub values: Vec<Tensor<F>>,
    pub latents: Tensor<F>,
    pub logits: Tensor<F>,
}

pub(crate) struct MainForward {
    pub logits: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub latents: Var,
}

/// Low-rank adapters bound into a graph, applied as `x W + scale (x A) B`.
pub(crate) struct AdapterBinding<'a, F> {
    pub bound: &'a Bound,
    pub scale: F,
}

pub(crate) fn linear<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    bound: &Bound,
    name: &str,
    adapters: Option<&AdapterBinding<'_, F>>,
) -> Var {
    let y = g.matmul(x, bound.var(name));
    let Some(ad) = adapters else { return y };
    let (Some(a), Some(b)) = (
        ad.bound.try_var(&format!("{name}.lora_a")),
        ad.bound.try_var(&format!("{name}.lora_b")),
    ) else {
        return y;
    };
    let xa = g.matmul(x, a);
    let xab = g.matmul(xa, b);
    let delta = g.scale(xab, ad.scale);
    g.add(y, delta)
}

pub(crate) fn affine_norm<F: Scalar>(g: &mut Graph<F>, x: Var, gain: Var, bias: Var) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.mul(n, gain);
    g.add(s, bias)
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// The frozen-able main path.
pub struct BaseLm<F> {
    config: BaseLmConfig,
    params: ParamStore<F>,
    frozen: bool,
    positions_processed: AtomicUsize,
}

impl<F: Scalar> Clone for BaseLm<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            frozen: self.frozen,
            positions_processed: AtomicUsize::new(0),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for BaseLm<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BaseLm")
            .field("config", &self.config)
            .field("frozen", &self.frozen)
            .finish_non_exhaustive()
    }
}

impl<F: Scalar> BaseLm<F> {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: BaseLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hid = config.mlp_hidden();
        let std = 0.02;
        let proj_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamStore::new();
        let role = ParamRole::Base;
        p.insert(
            "tok_emb",
            Tensor::randn(&[config.vocab_size, d], std, &mut rng),
            role,
            true,
        );
        if config.position_encoding == PositionEncoding::LearnedAbsolute {
            p.insert(
                "pos_emb",
                Tensor::randn(&[config.max_seq_len, d], std, &mut rng),
                role,
                true,
            );
        }
        for l in 0..config.n_layers {
            let name = |s: &str| block_param(l, s);
            p.insert(name("ln1.g"), Tensor::full(&[d], F::one()), role, true);
            p.insert(name("ln1.b"), Tensor::zeros(&[d]), role, true);
            p.insert(name("attn.wq"), Tensor::randn(&[d, d], std, &mut rng), role, true);
            p.insert(name("attn.wk"), Tensor::randn(&[d, d], std, &mut rng), role, true);
            p.insert(name("attn.wv"), Tensor::randn(&[d, d], std, &mut rng), role, true);
            p.insert(name("attn.wo"), Tensor::randn(&[d, d], proj_std, &mut rng), role, true);
            p.insert(name("ln2.g"), Tensor::full(&[d], F::one()), role, true);
            p.insert(name("ln2.b"), Tensor::zeros(&[d]), role, true);
            p.insert(name("mlp.w1"), Tensor::randn(&[d, hid], std, &mut rng), role, true);
            p.insert(name("mlp.w2"), Tensor::randn(&[hid, d], proj_std, &mut rng), role, true);
        }
        p.insert("ln_f.g", Tensor::full(&[d], F::one()), role, true);
        p.insert("ln_f.b", Tensor::zeros(&[d]), role, true);
        p.insert(
            "head",
            Tensor::randn(&[d, config.vocab_size], std, &mut rng),
            role,
            true,
        );
        Ok(Self::from_params(config, p))
    }

    pub fn from_params(config: BaseLmConfig, params: ParamStore<F>) -> Self {
        Self {
            config,
            params,
            frozen: false,
            positions_processed: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &BaseLmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    /// Mutable parameter access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<F>> {
        if self.frozen {
            return Err(L2dError::Contract("base LM is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.params.set_all_trainable(false);
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn new_cache(&self) -> KvCache<F> {
        KvCache::new(self.config.n_layers, self.config.d_model)
    }

    /// Number of positions pushed through the main path since the last reset.
    pub fn positions_processed(&self) -> usize {
        self.positions_processed.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.positions_processed.store(0, Ordering::Relaxed);
    }

    pub fn cast<G: Scalar>(&self) -> BaseLm<G> {
        BaseLm {
            config: self.config.clone(),
            params: self.params.cast(),
            frozen: self.frozen,
            positions_processed: AtomicUsize::new(0),
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(L2dError::Contract(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        adapters: Option<&AdapterBinding<'_, F>>,
        tokens: &[TokenId],
        positions: &[usize],
        layout: Arc<AttnLayout>,
        past: Option<&KvCache<F>>,
    ) -> MainForward {
        let cfg = &self.config;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut h = g.gather_rows(bound.var("tok_emb"), &idx);
        if cfg.position_encoding == PositionEncoding::LearnedAbsolute {
            let pe = g.gather_rows(bound.var("pos_emb"), positions);
            h = g.add(h, pe);
        }
        let past = past.filter(|c| !c.is_empty());
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = |s: &str| block_param(l, s);
            let x = affine_norm(g, h, bound.var(&name("ln1.g")), bound.var(&name("ln1.b")));
            let mut q = linear(g, x, bound, &name("attn.wq"), adapters);
            let mut k = linear(g, x, bound, &name("attn.wk"), adapters);
            let v = linear(g, x, bound, &name("attn.wv"), adapters);
            if cfg.position_encoding == PositionEncoding::Rotary {
                q = g.rope(q, positions, cfg.n_heads, cfg.rope_base);
                k = g.rope(k, positions, cfg.n_heads, cfg.rope_base);
            }
            keys.push(k);
            values.push(v);
            let (kk, vv) = match past {
                Some(c) => {
                    let pk = g.constant(c.keys(l));
                    let pv = g.constant(c.values(l));
                    (g.concat_rows(&[pk, k]), g.concat_rows(&[pv, v]))
                }
                None => (k, v),
            };
            let a = g.attention(q, kk, vv, Arc::clone(&layout), cfg.n_heads);
            let o = linear(g, a, bound, &name("attn.wo"), adapters);
            h = g.add(h, o);
            let x = affine_norm(g, h, bound.var(&name("ln2.g")), bound.var(&name("ln2.b")));
            let m = linear(g, x, bound, &name("mlp.w1"), adapters);
            let m = g.gelu(m);
            let m = linear(g, m, bound, &name("mlp.w2"), adapters);
            h = g.add(h, m);
        }
        let latents = affine_norm(g, h, bound.var("ln_f.g"), bound.var("ln_f.b"));
        let logits = g.matmul(latents, bound.var("head"));
        MainForward {
            logits,
            keys,
            values,
            latents,
        }
    }

    /// Runs `tokens` after the positions already in `cache`, appends their
    /// keys, values and latents, and returns next-token logits `[n, vocab]`.
    pub fn forward_with_cache(&self, tokens: &[TokenId], cache: &mut KvCache<F>) -> Result<Tensor<F>> {
        self.forward_with_cache_adapted(tokens, cache, None)
    }

    pub(crate) fn forward_with_cache_adapted(
        &self,
        tokens: &[TokenId],
        cache: &mut KvCache<F>,
        adapters: Option<(&ParamStore<F>, F)>,
    ) -> Result<Tensor<F>> {
        if tokens.is_empty() {
            return Err(L2dError::Contract("forward needs at least one token".into()));
        }
        let needed = cache.len() + tokens.len();
        if needed > self.config.max_seq_len {
            return Err(L2dError::ContextOverflow {
                needed,
                max: self.config.max_seq_len,
            });
        }
        self.check_tokens(tokens)?;
        let past_len = cache.len();
        let positions: Vec<usize> = (past_len..needed).collect();
        let layout = Arc::new(AttnLayout {
            segments: vec![AttnSegment {
                q_start: 0,
                q_len: tokens.len(),
                k_start: 0,
                k_len: needed,
                offset: past_len,
            }],
        });
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let ad_bound = adapters.map(|(store, _)| store.bind(&mut g, false));
        let binding = ad_bound.as_ref().map(|b| AdapterBinding {
            bound: b,
            scale: adapters.unwrap().1,
        });
        let out = self.forward_graph(
            &mut g,
            &bound,
            binding.as_ref(),
            tokens,
            &positions,
            layout,
            Some(cache),
        );
        let keys: Vec<&Tensor<F>> = out.keys.iter().map(|&k| g.value(k)).collect();
        let values: Vec<&Tensor<F>> = out.values.iter().map(|&v| g.value(v)).collect();
        cache.append(&keys, &values, g.value(out.latents));
        self.positions_processed.fetch_add(tokens.len(), Ordering::Relaxed);
        Ok(g.value(out.logits).clone())
    }

    /// Full-context forward from an empty cache.
    pub fn forward_sequence(&self, tokens: &[TokenId]) -> Result<(Tensor<F>, KvCache<F>)> {
        let mut cache = self.new_cache();
        let logits = self.forward_with_cache(tokens, &mut cache)?;
        Ok((logits, cache))
    }

    /// Gradient-free forward over independent sequences stacked row-wise.
    pub fn forward_batch(&self, seqs: &[&[TokenId]]) -> Result<BatchActivations<F>> {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > self.config.max_seq_len {
                return Err(L2dError::ContextOverflow {
                    needed: s.len(),
                    max: self.config.max_seq_len,
                });
            }
            self.check_tokens(s)?;
            offsets.push(tokens.len());
            lengths.push(s.len());
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let layout = Arc::new(AttnLayout::causal(&lengths));
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &bound, None, &tokens, &positions, layout, None);
        self.positions_processed.fetch_add(tokens.len(), Ordering::Relaxed);
        Ok(BatchActivations {
            offsets,
            lengths,
            keys: out.keys.iter().map(|&k| g.value(k).clone()).collect(),
            values: out.values.iter().map(|&v| g.value(v).clone()).collect(),
            latents: g.value(out.latents).clone(),
            logits: g.value(out.logits).clone(),
        })
    }

    /// Next-token cross-entropy of a batch, as a graph node.
    pub(crate) fn lm_loss_graph(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        adapters: Option<&AdapterBinding<'_, F>>,
        seqs: &[&LmSequence],
    ) -> Var {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for s in seqs {
            let n = s.tokens.len();
            lengths.push(n);
            tokens.extend_from_slice(&s.tokens);
            positions.extend(0..n);
            for p in 0..n {
                if p + 1 < n && s.is_target(p + 1) {
                    targets.push(s.tokens[p + 1] as usize);
                    weights.push(F::one());
                } else {
                    targets.push(0);
                    weights.push(F::zero());
                }
            }
        }
        let layout = Arc::new(AttnLayout::causal(&lengths));
        let out = self.forward_graph(g, bound, adapters, &tokens, &positions, layout, None);
        g.cross_entropy(out.logits, &targets, Some(&weights))
    }

    /// Mean next-token cross-entropy over the target positions of `seqs`.
    pub fn lm_loss(&self, seqs: &[LmSequence]) -> Result<f64> {
        self.lm_loss_adapted(seqs, None)
    }

    pub(crate) fn lm_loss_adapted(&self, seqs: &[LmSequence], adapters: Option<(&ParamStore<F>, F)>) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0.0;
        for chunk in seqs.chunks(32) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let ad_bound = adapters.map(|(store, _)| store.bind(&mut g, false));
            let binding = ad_bound.as_ref().map(|b| AdapterBinding {
                bound: b,
                scale: adapters.unwrap().1,
            });
            let refs: Vec<&LmSequence> = chunk.iter().collect();
            let loss = self.lm_loss_graph(&mut g, &bound, binding.as_ref(), &refs);
            let n: f64 = chunk.iter().map(|s| s.target_weights().iter().sum::<f64>()).sum();
            total += g.value(loss).item().as_f64() * n;
            count += n;
        }
        if count == 0.0 {
            return Ok(0.0);
        }
        Ok(total / count)
    }

    /// Greedy next-token accuracy over target positions.
    pub fn next_token_accuracy(&self, seqs: &[LmSequence]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for s in seqs {
            let (logits, _) = self.forward_sequence(&s.tokens)?;
            for k in 1..s.tokens.len() {
                if !s.is_target(k) {
                    continue;
                }
                total += 1;
                if argmax(logits.row(k - 1)) == s.tokens[k] as usize {
                    hit += 1;
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, BASE_LM_KIND, &self.config, &self.params)
    }

    /// Loads a checkpoint; the returned model is frozen.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        ck.expect_kind(BASE_LM_KIND)?;
        let config: BaseLmConfig = ck.config_as()?;
        config.validate()?;
        let reference = BaseLm::<f32>::init(config.clone(), 0)?;
        for (name, p) in reference.params().iter() {
            let found = ck
                .params
                .get(name)
                .ok_or_else(|| L2dError::Checkpoint(format!("missing tensor {name}")))?;
            if found.value.shape() != p.value.shape() {
                return Err(L2dError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    found.value.shape(),
                    p.value.shape()
                )));
            }
        }
        let mut lm = Self::from_params(config, ck.params.cast());
        lm.freeze();
        Ok(lm)
    }
}

pub(crate) fn argmax<F: Scalar>(x: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Draws a token from `softmax(logits / temperature)`; temperature 0 is argmax
/// with ties going to the lowest index.
pub fn sample_token<F: Scalar, R: Rng + ?Sized>(logits: &[F], temperature: f64, rng: &mut R) -> Result<TokenId> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(L2dError::NonFinite("logits".into()));
    }
    if !(temperature >= 0.0) {
        return Err(L2dError::Config(format!("temperature {temperature} must be >= 0")));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits) as TokenId);
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let probs = softmax_row(&scaled);
    Ok(sample_categorical(&probs, rng) as TokenId)
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u beyond the last cumulative value; take the last nonzero
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Optimizer settings shared by the main-path training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup: usize,
    #[serde(default)]
    pub adamw: AdamWConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr_peak: 3e-3,
            lr_floor: 1e-4,
            warmup: 100,
            adamw: AdamWConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Autoregressive next-token pretraining from a seeded initialization.
pub fn pretrain<F: Scalar>(
    config: &BaseLmConfig,
    train: &[LmSequence],
    val: &[LmSequence],
    opts: &PretrainConfig,
) -> Result<(BaseLm<F>, Vec<PretrainRecord>)> {
    let mut model = BaseLm::<F>::init(config.clone(), opts.seed)?;
    if opts.steps == 0 {
        return Ok((model, Vec::new()));
    }
    if train.is_empty() {
        return Err(L2dError::Config("empty pretraining corpus".into()));
    }
    let schedule = LrSchedule::new(opts.lr_peak, opts.lr_floor, opts.warmup, opts.steps)?;
    let mut opt = AdamW::new(opts.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0001);
    let mut sampler = BatchSampler::new(train.len(), opts.batch_size);
    let mut log = Vec::new();
    for step in 0..opts.steps {
        let idx = sampler.next_batch(&mut rng);
        let batch: Vec<&LmSequence> = idx.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true);
        let loss = model.lm_loss_graph(&mut g, &bound, None, &batch);
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(L2dError::Diverged {
                step,
                reason: format!("training loss {loss_value}"),
            });
        }
        let grads = g.backward(loss)?;
        let mut pg = ParamGrads::collect(&model.params, &bound, &grads);
        if let Some(c) = opts.grad_clip {
            pg.clip(c);
        }
        let lr = schedule.lr(step);
        opt.step(&mut model.params, &pg, lr);
        let last = step + 1 == opts.steps;
        let val_loss = if !val.is_empty() && (last || (opts.eval_every > 0 && (step + 1) % opts.eval_every == 0)) {
            Some(model.lm_loss(val)?)
        } else {
            None
        };
        log.push(PretrainRecord {
            step,
            lr,
            train_loss: loss_value,
            val_loss,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BaseLmConfig {
        BaseLmConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            position_encoding: PositionEncoding::Rotary,
            mlp_ratio: 2,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(BaseLm::<f32>::init(c, 0), Err(L2dError::Config(_))));
    }

    #[test]
    fn context_overflow_is_explicit() {
        let lm = BaseLm::<f32>::init(tiny(), 0).unwrap();
        let mut cache = lm.new_cache();
        lm.forward_with_cache(&[1; 30], &mut cache).unwrap();
        let err = lm.forward_with_cache(&[1; 3], &mut cache).unwrap_err();
        assert!(matches!(err, L2dError::ContextOverflow { needed: 33, max: 32 }));
        assert!(matches!(
            lm.forward_with_cache(&[], &mut cache),
            Err(L2dError::Contract(_))
        ));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut lm = BaseLm::<f64>::init(tiny(), 3).unwrap();
        let head = lm.params_mut().unwrap().get_mut("head").unwrap();
        head.value = Tensor::zeros(head.value.shape());
        let (logits, _) = lm.forward_sequence(&[0, 5]).unwrap();
        let row = logits.row(1);
        assert!(row.iter().all(|&v| v == row[0]));
    }

    #[test]
    fn sample_token_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&[0.0f32, 10.0, 0.0], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(sample_token(&[3.0f32, 3.0, 1.0], 0.0, &mut rng).unwrap(), 0);
        assert_eq!(sample_token(&[5.0f64, 0.0], 1e-6, &mut rng).unwrap(), 0);
        assert!(sample_token(&[f32::NAN, 0.0], 1.0, &mut rng).is_err());
        assert!(sample_token(&[0.0f32], -1.0, &mut rng).is_err());
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let mut lm = BaseLm::<f32>::init(tiny(), 0).unwrap();
        lm.freeze();
        assert!(lm.params_mut().is_err());
        assert_eq!(lm.params().trainable_count(), 0);
    }
}
