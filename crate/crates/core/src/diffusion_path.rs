//! The parallel diffusion path: vocabulary projection, translation module,
//! conditioned cross-attention blocks copied from the main path, and the
//! gated merge into the main path's final latent.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::{affine_norm, block_param, linear, AdapterBinding, BaseLm, KvCache, PositionEncoding};
use crate::diffusion_core::{check_timestep, input_scale, Schedule};
use crate::error::{L2dError, Result};
use crate::numerics::{AttnLayout, AttnSegment, Graph, Scalar, Tensor, Var};
use crate::params::{read_checkpoint, write_checkpoint, Bound, ParamRole, ParamStore};

pub const DIFFUSION_PATH_KIND: &str = "diffusion_path";

const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Frozen copies of the main-path weights plus trainable low-rank adapters.
    #[default]
    Lora,
    /// Copies of the main-path weights, all trainable.
    Full,
    /// Random initialization, all trainable.
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    #[default]
    Vector,
    Scalar,
}

/// Which main-path block supplies the keys and values of each path block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvSource {
    #[default]
    SameBlock,
    LastBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    /// Width of the diffusion token space.
    pub diffusion_dim: usize,
    /// Sinusoidal timestep feature width.
    pub time_dim: usize,
    pub cond_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub init_mode: InitMode,
    pub gate_shape: GateShape,
    pub kv_source: KvSource,
    /// Number of real classes; ids run `0..=n_classes` with 0 the null class.
    pub n_classes: usize,
    pub sigma: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            diffusion_dim: 256,
            time_dim: 256,
            cond_hidden: 256,
            lora_rank: 16,
            lora_alpha: 32.0,
            init_mode: InitMode::Lora,
            gate_shape: GateShape::Vector,
            kv_source: KvSource::SameBlock,
            n_classes: 4,
            sigma: 64.0,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diffusion_dim == 0 || self.cond_hidden == 0 {
            return Err(L2dError::Config(
                "diffusion_dim and cond_hidden must be positive".into(),
            ));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(L2dError::Config(format!(
                "time_dim must be even and positive, got {}",
                self.time_dim
            )));
        }
        if self.init_mode == InitMode::Lora && self.lora_rank == 0 {
            return Err(L2dError::Config("lora_rank must be positive in lora mode".into()));
        }
        Schedule::new(self.sigma)?;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.sigma).expect("validated sigma")
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank.max(1) as f64
    }
}

/// Normalized diffusion embeddings, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionVocab {
    table: Tensor<f64>,
}

impl DiffusionVocab {
    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        self.table.row(token)
    }

    pub fn table(&self) -> &Tensor<f64> {
        &self.table
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|y| self.embedding(y).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// `V_y = sqrt(dbar) * (V^l_y W_v) / |V^l_y W_v|` for every token `y`.
pub fn build_vocab<F: Scalar>(main_embeddings: &Tensor<F>, w_v: &Tensor<F>) -> Result<DiffusionVocab> {
    if main_embeddings.cols() != w_v.rows() {
        return Err(L2dError::Shape(format!(
            "embeddings are {:?} but W_v is {:?}",
            main_embeddings.shape(),
            w_v.shape()
        )));
    }
    let mut g = Graph::new();
    let e = g.constant(main_embeddings.clone());
    let w = g.constant(w_v.clone());
    let p = g.matmul(e, w);
    check_projection(g.value(p))?;
    let dbar = w_v.cols() as f64;
    let v = g.row_normalize(p, dbar.sqrt());
    Ok(DiffusionVocab {
        table: g.value(v).cast(),
    })
}

fn check_projection<F: Scalar>(p: &Tensor<F>) -> Result<()> {
    for y in 0..p.rows() {
        let norm = p.row(y).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(L2dError::DegenerateProjection { token: y, norm });
        }
    }
    Ok(())
}

/// Sinusoidal features of `1000 t`: cosines then sines over geometric frequencies.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let arg = 1000.0 * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (arg * freq).cos();
        out[half + i] = (arg * freq).sin();
    }
    out
}

/// Conditioning derived from `(t, class_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeConditioning {
    pub t: f64,
    pub class_id: usize,
    /// Per block: `[shift1, scale1, gate1, shift2, scale2, gate2]`, each of width d.
    pub blocks: Vec<[Vec<f64>; 6]>,
    pub final_shift: Vec<f64>,
    pub final_scale: Vec<f64>,
    /// Output gate `w(t, c) - w(0, c)`, width d (or 1 for a scalar gate).
    pub output_gate: Vec<f64>,
}

/// One diffusion-token evaluation request against a main-path cache.
#[derive(Debug, Clone, PartialEq)]
pub struct PathQuery {
    pub x: Vec<f64>,
    pub t: f64,
    pub class_id: usize,
    /// Position of the token being predicted; the cache must hold `0..target`.
    pub target: usize,
}

/// Graph-side inputs of a batched path evaluation over `R` rows.
pub(crate) struct PathInputs<'a, F> {
    /// Rescaled diffusion tokens `[R, dbar]`.
    pub x_in: Var,
    pub t: &'a [f64],
    pub class_ids: &'a [usize],
    /// Rotary position of each row, the index of the last visible context token.
    pub positions: &'a [usize],
    /// Per main-path block, stacked context keys and values.
    pub keys: &'a [Tensor<F>],
    pub values: &'a [Tensor<F>],
    /// Main-path final latents `[R, d]` merged into each row.
    pub latents: Var,
    pub layout: Arc<AttnLayout>,
}

pub struct DiffusionPath<F> {
    config: PathConfig,
    params: ParamStore<F>,
    base_digest: u64,
    forward_calls: AtomicUsize,
    rows_evaluated: AtomicUsize,
}

impl<F: Scalar> Clone for DiffusionPath<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            base_digest: self.base_digest,
            forward_calls: AtomicUsize::new(0),
            rows_evaluated: AtomicUsize::new(0),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for DiffusionPath<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionPath")
            .field("config", &self.config)
            .field("base_digest", &format_args!("{:016x}", self.base_digest))
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathMeta {
    path: PathConfig,
    base_digest: String,
}

const COPIED: [&str; 8] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.w2",
];
const ADAPTED: [&str; 4] = ["attn.wq", "attn.wo", "mlp.w1", "mlp.w2"];

impl<F: Scalar> DiffusionPath<F> {
    /// Builds a path whose blocks start from the frozen main path's weights.
    pub fn init_from_main(base: &BaseLm<F>, config: PathConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !base.is_frozen() {
            return Err(L2dError::Contract(
                "the main path must be frozen before building a diffusion path".into(),
            ));
        }
        let bc = base.config();
        let (d, dbar, td, ch) = (bc.d_model, config.diffusion_dim, config.time_dim, config.cond_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // copied blocks draw from their own stream so new modules do not
        // depend on the init mode
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        block_rng.set_stream(1);
        let mut p = ParamStore::new();
        let new = ParamRole::New;

        p.insert(
            "vocab.w_v",
            Tensor::randn(&[d, dbar], (1.0 / d as f64).sqrt(), &mut rng),
            new,
            true,
        );
        p.insert(
            "translate.w1",
            Tensor::randn(&[dbar, d], (1.0 / dbar as f64).sqrt(), &mut rng),
            new,
            true,
        );
        p.insert("translate.b1", Tensor::zeros(&[d]), new, true);
        p.insert(
            "translate.w2",
            Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), &mut rng),
            new,
            true,
        );
        p.insert("translate.b2", Tensor::zeros(&[d]), new, true);

        for l in 0..bc.n_layers {
            for name in COPIED {
                let key = block_param(l, name);
                let src = base.params().tensor(&key);
                match config.init_mode {
                    InitMode::Lora => p.insert(key, src.clone(), ParamRole::FrozenCopy, false),
                    InitMode::Full => p.insert(key, src.clone(), ParamRole::FrozenCopy, true),
                    InitMode::Scratch => {
                        let value = if name.ends_with(".g") {
                            Tensor::full(src.shape(), F::one())
                        } else if name.ends_with(".b") {
                            Tensor::zeros(src.shape())
                        } else {
                            Tensor::randn(src.shape(), 0.02, &mut block_rng)
                        };
                        p.insert(key, value, new, true);
                    }
                }
            }
            if config.init_mode == InitMode::Lora {
                let r = config.lora_rank;
                for name in ADAPTED {
                    let key = block_param(l, name);
                    let shape = base.params().tensor(&key).shape().to_vec();
                    let a = Tensor::randn(&[shape[0], r], (1.0 / shape[0] as f64).sqrt(), &mut block_rng);
                    p.insert(format!("{key}.lora_a"), a, ParamRole::Lora, true);
                    p.insert(
                        format!("{key}.lora_b"),
                        Tensor::zeros(&[r, shape[1]]),
                        ParamRole::Lora,
                        true,
                    );
                }
            }
        }
        for name in ["ln_f.g", "ln_f.b"] {
            let src = base.params().tensor(name).clone();
            let value = match config.init_mode {
                InitMode::Scratch if name.ends_with(".g") => Tensor::full(src.shape(), F::one()),
                InitMode::Scratch => Tensor::zeros(src.shape()),
                _ => src,
            };
            let (role, trainable) = match config.init_mode {
                InitMode::Lora => (ParamRole::FrozenCopy, false),
                InitMode::Full => (ParamRole::FrozenCopy, true),
                InitMode::Scratch => (new, true),
            };
            p.insert(format!("final.{name}"), value, role, trainable);
        }

        let mod_width = bc.n_layers * 6 * d + 2 * d;
        p.insert(
            "cond.class_emb",
            Tensor::randn(&[config.n_classes + 1, td], 1.0, &mut rng),
            new,
            true,
        );
        p.insert(
            "cond.w1",
            Tensor::randn(&[td, ch], (1.0 / td as f64).sqrt(), &mut rng),
            new,
            true,
        );
        p.insert("cond.b1", Tensor::zeros(&[ch]), new, true);
        p.insert("cond.w2", Tensor::zeros(&[ch, mod_width]), new, true);
        p.insert("cond.b2", Tensor::zeros(&[mod_width]), new, true);
        let gate_width = match config.gate_shape {
            GateShape::Vector => d,
            GateShape::Scalar => 1,
        };
        p.insert(
            "gate.w1",
            Tensor::randn(&[td, ch], (1.0 / td as f64).sqrt(), &mut rng),
            new,
            true,
        );
        p.insert("gate.b1", Tensor::zeros(&[ch]), new, true);
        p.insert("gate.w2", Tensor::zeros(&[ch, gate_width]), new, true);
        p.insert("gate.b2", Tensor::zeros(&[gate_width]), new, true);

        let path = Self {
            config,
            params: p,
            base_digest: base.params().storage_digest(),
            forward_calls: AtomicUsize::new(0),
            rows_evaluated: AtomicUsize::new(0),
        };
        path.vocab(base)?;
        Ok(path)
    }

    pub fn config(&self) -> &PathConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn schedule(&self) -> Schedule {
        self.config.schedule()
    }

    /// Digest of the main-path parameters this path was built against.
    pub fn base_digest(&self) -> u64 {
        self.base_digest
    }

    pub fn check_base(&self, base: &BaseLm<F>) -> Result<()> {
        let digest = base.params().storage_digest();
        if digest != self.base_digest {
            return Err(L2dError::Checkpoint(format!(
                "diffusion path was built for main path {:016x}, got {digest:016x}",
                self.base_digest
            )));
        }
        Ok(())
    }

    /// Number of `forward` calls since the last reset.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn rows_evaluated(&self) -> usize {
        self.rows_evaluated.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
        self.rows_evaluated.store(0, Ordering::Relaxed);
    }

    pub fn cast<G: Scalar>(&self) -> DiffusionPath<G> {
        DiffusionPath {
            config: self.config.clone(),
            params: self.params.cast(),
            base_digest: self.base_digest,
            forward_calls: AtomicUsize::new(0),
            rows_evaluated: AtomicUsize::new(0),
        }
    }

    pub fn vocab(&self, base: &BaseLm<F>) -> Result<DiffusionVocab> {
        build_vocab(base.params().tensor("tok_emb"), self.params.tensor("vocab.w_v"))
    }

    /// Vocabulary table as a graph node so that `W_v` receives gradients.
    pub(crate) fn vocab_graph(&self, g: &mut Graph<F>, bound: &Bound, base: &BaseLm<F>) -> Result<Var> {
        let e = g.constant(base.params().tensor("tok_emb").clone());
        let p = g.matmul(e, bound.var("vocab.w_v"));
        check_projection(g.value(p))?;
        Ok(g.row_normalize(p, (self.config.diffusion_dim as f64).sqrt()))
    }

    fn adapters<'a>(&self, bound: &'a Bound) -> AdapterBinding<'a, F> {
        AdapterBinding {
            bound,
            scale: F::lit(self.config.lora_scale()),
        }
    }

    /// Modulation vectors `[R, n_layers*6d + 2d]` and output gates `[R, d]`.
    fn conditioning_graph(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        t: &[f64],
        class_ids: &[usize],
        d: usize,
    ) -> (Var, Var) {
        let td = self.config.time_dim;
        let rows = t.len();
        let feats = |ts: &mut dyn Iterator<Item = f64>| {
            let data: Vec<F> = ts.flat_map(|t| time_features(t, td)).map(F::lit).collect();
            Tensor::from_parts(vec![rows, td], data)
        };
        let cls = g.gather_rows(bound.var("cond.class_emb"), class_ids);
        let ft = g.constant(feats(&mut t.iter().copied()));
        let e_t = g.add(ft, cls);

        let h = g.matmul(e_t, bound.var("cond.w1"));
        let h = g.add(h, bound.var("cond.b1"));
        let h = g.silu(h);
        let m = g.matmul(h, bound.var("cond.w2"));
        let modulation = g.add(m, bound.var("cond.b2"));

        // w(t, c) and w(0, c) through identical rows of one matmul
        let f0 = g.constant(feats(&mut std::iter::repeat_n(0.0, rows)));
        let e_0 = g.add(f0, cls);
        let e = g.concat_rows(&[e_t, e_0]);
        let h = g.matmul(e, bound.var("gate.w1"));
        let h = g.add(h, bound.var("gate.b1"));
        let h = g.gelu(h);
        let w = g.matmul(h, bound.var("gate.w2"));
        let w = g.add(w, bound.var("gate.b2"));
        let w_t = g.slice_rows(w, 0, rows);
        let w_0 = g.slice_rows(w, rows, rows);
        let mut gate = g.sub(w_t, w_0);
        if self.config.gate_shape == GateShape::Scalar {
            let ones = g.constant(Tensor::full(&[1, d], F::one()));
            gate = g.matmul(gate, ones);
        }
        (modulation, gate)
    }

    /// Logits `[R, vocab]` for a batch of diffusion tokens.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        base: &BaseLm<F>,
        inp: &PathInputs<'_, F>,
    ) -> Var {
        let bc = base.config();
        let d = bc.d_model;
        let (modulation, gate) = self.conditioning_graph(g, bound, inp.t, inp.class_ids, d);
        let ad = self.adapters(bound);
        let piece = |g: &mut Graph<F>, i: usize| g.slice_cols(modulation, i * d, d);
        let modulate = |g: &mut Graph<F>, x: Var, shift: Var, scale: Var| {
            let s = g.offset(scale, F::one());
            let y = g.mul(x, s);
            g.add(y, shift)
        };

        let h = g.matmul(inp.x_in, bound.var("translate.w1"));
        let h = g.add(h, bound.var("translate.b1"));
        let h = g.gelu(h);
        let h = g.matmul(h, bound.var("translate.w2"));
        let mut h = g.add(h, bound.var("translate.b2"));

        let mut kv: Vec<Option<(Var, Var)>> = vec![None; bc.n_layers];
        for l in 0..bc.n_layers {
            let name = |s: &str| block_param(l, s);
            let [shift1, scale1, gate1, shift2, scale2, gate2] = std::array::from_fn(|i| piece(g, 6 * l + i));

            let n = affine_norm(g, h, bound.var(&name("ln1.g")), bound.var(&name("ln1.b")));
            let n = modulate(g, n, shift1, scale1);
            let mut q = linear(g, n, bound, &name("attn.wq"), Some(&ad));
            if bc.position_encoding == PositionEncoding::Rotary {
                q = g.rope(q, inp.positions, bc.n_heads, bc.rope_base);
            }
            let src = match self.config.kv_source {
                KvSource::SameBlock => l,
                KvSource::LastBlock => bc.n_layers - 1,
            };
            let (k, v) = match kv[src] {
                Some(pair) => pair,
                None => {
                    let pair = (g.constant(inp.keys[src].clone()), g.constant(inp.values[src].clone()));
                    kv[src] = Some(pair);
                    pair
                }
            };
            let a = g.attention(q, k, v, Arc::clone(&inp.layout), bc.n_heads);
            let o = linear(g, a, bound, &name("attn.wo"), Some(&ad));
            let gate1 = g.offset(gate1, F::one());
            let o = g.mul(o, gate1);
            h = g.add(h, o);

            let n = affine_norm(g, h, bound.var(&name("ln2.g")), bound.var(&name("ln2.b")));
            let n = modulate(g, n, shift2, scale2);
            let m = linear(g, n, bound, &name("mlp.w1"), Some(&ad));
            let m = g.gelu(m);
            let m = linear(g, m, bound, &name("mlp.w2"), Some(&ad));
            let gate2 = g.offset(gate2, F::one());
            let m = g.mul(m, gate2);
            h = g.add(h, m);
        }
        let shift_f = piece(g, 6 * bc.n_layers);
        let scale_f = piece(g, 6 * bc.n_layers + 1);
        let z = affine_norm(g, h, bound.var("final.ln_f.g"), bound.var("final.ln_f.b"));
        let z = modulate(g, z, shift_f, scale_f);

        let contribution = g.mul(gate, z);
        let merged = g.add(inp.latents, contribution);
        let head = g.constant(base.params().tensor("head").clone());
        g.matmul(merged, head)
    }

    /// Conditioning vectors for one `(t, class_id)`.
    pub fn time_condition(&self, base: &BaseLm<F>, t: f64, class_id: usize) -> Result<TimeConditioning> {
        check_timestep(t)?;
        self.check_class(class_id)?;
        let d = base.config().d_model;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let (m, w) = self.conditioning_graph(&mut g, &bound, &[t], &[class_id], d);
        let m = g.value(m).to_f64_vec();
        let mut output_gate = g.value(w).to_f64_vec();
        if self.config.gate_shape == GateShape::Scalar {
            output_gate.truncate(1);
        }
        let piece = |i: usize| m[i * d..(i + 1) * d].to_vec();
        let n = base.config().n_layers;
        Ok(TimeConditioning {
            t,
            class_id,
            blocks: (0..n).map(|l| std::array::from_fn(|i| piece(6 * l + i))).collect(),
            final_shift: piece(6 * n),
            final_scale: piece(6 * n + 1),
            output_gate,
        })
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id > self.config.n_classes {
            return Err(L2dError::Contract(format!(
                "class id {class_id} outside 0..={}",
                self.config.n_classes
            )));
        }
        Ok(())
    }

    /// Next-token logits `[queries, vocab]`, each query attending the cached
    /// main path strictly before its target and merging into latent `target - 1`.
    pub fn forward(&self, base: &BaseLm<F>, cache: &KvCache<F>, queries: &[PathQuery]) -> Result<Tensor<F>> {
        if queries.is_empty() {
            return Err(L2dError::Contract("forward needs at least one query".into()));
        }
        let bc = base.config();
        let dbar = self.config.diffusion_dim;
        let schedule = self.schedule();
        let rows = queries.len();
        let mut x_in = Vec::with_capacity(rows * dbar);
        let mut latents = Vec::with_capacity(rows * bc.d_model);
        let mut segments = Vec::with_capacity(rows);
        for (i, q) in queries.iter().enumerate() {
            check_timestep(q.t)?;
            self.check_class(q.class_id)?;
            if q.x.len() != dbar {
                return Err(L2dError::Shape(format!(
                    "diffusion token has {} components, expected {dbar}",
                    q.x.len()
                )));
            }
            if q.target == 0 || q.target > cache.len() {
                return Err(L2dError::MissingCache {
                    target: q.target,
                    needed: q.target,
                    available: cache.len(),
                });
            }
            if !q.x.iter().all(|v| v.is_finite()) {
                return Err(L2dError::NonFinite("diffusion token".into()));
            }
            let s = input_scale(q.t, &schedule);
            x_in.extend(q.x.iter().map(|v| F::lit(v * s)));
            latents.extend_from_slice(cache.latent(q.target - 1));
            segments.push(AttnSegment {
                q_start: i,
                q_len: 1,
                k_start: 0,
                k_len: q.target,
                offset: q.target - 1,
            });
        }
        let t: Vec<f64> = queries.iter().map(|q| q.t).collect();
        let class_ids: Vec<usize> = queries.iter().map(|q| q.class_id).collect();
        let positions: Vec<usize> = queries.iter().map(|q| q.target - 1).collect();
        let keys: Vec<Tensor<F>> = (0..cache.n_layers()).map(|l| cache.keys(l)).collect();
        let values: Vec<Tensor<F>> = (0..cache.n_layers()).map(|l| cache.values(l)).collect();

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x_in = g.constant(Tensor::from_parts(vec![rows, dbar], x_in));
        let latents = g.constant(Tensor::from_parts(vec![rows, bc.d_model], latents));
        let inputs = PathInputs {
            x_in,
            t: &t,
            class_ids: &class_ids,
            positions: &positions,
            keys: &keys,
            values: &values,
            latents,
            layout: Arc::new(AttnLayout { segments }),
        };
        let logits = self.forward_graph(&mut g, &bound, base, &inputs);
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.rows_evaluated.fetch_add(rows, Ordering::Relaxed);
        let out = g.value(logits).clone();
        if !out.all_finite() {
            return Err(L2dError::NonFinite("diffusion path logits".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = PathMeta {
            path: self.config.clone(),
            base_digest: format!("{:016x}", self.base_digest),
        };
        write_checkpoint(path, DIFFUSION_PATH_KIND, &meta, &self.params)
    }

    /// Loads a checkpoint and checks it against the main path it will run with.
    pub fn load(path: &Path, base: &BaseLm<F>) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        ck.expect_kind(DIFFUSION_PATH_KIND)?;
        let meta: PathMeta = ck.config_as()?;
        meta.path.validate()?;
        let base_digest = u64::from_str_radix(&meta.base_digest, 16)
            .map_err(|e| L2dError::Checkpoint(format!("bad base digest: {e}")))?;
        let out = Self {
            config: meta.path,
            params: ck.params.cast(),
            base_digest,
            forward_calls: AtomicUsize::new(0),
            rows_evaluated: AtomicUsize::new(0),
        };
        out.check_base(base)?;
        let reference = DiffusionPath::init_from_main(base, out.config.clone(), 0)?;
        for (name, p) in reference.params().iter() {
            let found = out
                .params
                .get(name)
                .ok_or_else(|| L2dError::Checkpoint(format!("missing tensor {name}")))?;
            if found.value.shape() != p.value.shape() {
                return Err(L2dError::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
        }
        Ok(out)
    }
}
