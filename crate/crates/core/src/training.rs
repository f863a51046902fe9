//! Diffusion-path training with per-position corruption, and the plain LoRA
//! finetuning baseline on the main path.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::{block_param, AdapterBinding, BaseLm};
use crate::data::{BatchSampler, LmSequence};
use crate::diffusion_core::{input_scale, sample_noise, sample_timesteps, TimestepSampling};
use crate::diffusion_path::{DiffusionPath, PathInputs};
use crate::error::{L2dError, Result};
use crate::numerics::{AttnLayout, AttnSegment, Graph, Scalar, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, ParamGrads};
use crate::params::{ParamRole, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub timestep_sampling: TimestepSampling,
    pub class_dropout: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            lr_floor: 1e-6,
            warmup: 100,
            batch_size: 32,
            epochs: 1,
            max_steps: None,
            timestep_sampling: TimestepSampling::Uniform,
            class_dropout: 0.1,
            adamw: AdamWConfig::default(),
            grad_clip: Some(1.0),
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(L2dError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return Err(L2dError::Config(format!(
                "class_dropout {} outside [0, 1]",
                self.class_dropout
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n_train.div_ceil(self.batch_size.max(1)))
    }
}

/// One corrupted target position.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRow {
    /// Index into the batch's sequences.
    pub seq: usize,
    /// Position `k >= 1` being predicted from `0..k`.
    pub target: usize,
    pub t: f64,
    pub noise: Vec<f64>,
}

/// Sequences plus independent `(t, x0)` draws for each target position.
#[derive(Debug, Clone, PartialEq)]
pub struct L2dBatch {
    pub sequences: Vec<LmSequence>,
    pub rows: Vec<TargetRow>,
}

impl L2dBatch {
    /// Draws timesteps and noise per target, and drops class labels to the
    /// null class with probability `class_dropout` per sequence.
    pub fn sample<R: Rng + ?Sized>(
        seqs: &[&LmSequence],
        sampling: TimestepSampling,
        class_dropout: f64,
        dim: usize,
        schedule: &crate::diffusion_core::Schedule,
        rng: &mut R,
    ) -> Self {
        let mut sequences = Vec::with_capacity(seqs.len());
        let mut rows = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            let mut s = (*s).clone();
            if class_dropout > 0.0 && rng.random::<f64>() < class_dropout {
                s.class_id = 0;
            }
            for k in 1..s.tokens.len() {
                if !s.is_target(k) {
                    continue;
                }
                let t = sample_timesteps(1, sampling, rng)[0];
                let noise = sample_noise(dim, schedule, rng);
                rows.push(TargetRow {
                    seq: i,
                    target: k,
                    t,
                    noise,
                });
            }
            sequences.push(s);
        }
        Self { sequences, rows }
    }

    /// Every target at the same timestep, labels kept.
    pub fn at_fixed_t<R: Rng + ?Sized>(
        seqs: &[&LmSequence],
        t: f64,
        dim: usize,
        schedule: &crate::diffusion_core::Schedule,
        rng: &mut R,
    ) -> Self {
        let mut batch = Self::sample(seqs, TimestepSampling::Uniform, 0.0, dim, schedule, rng);
        for r in &mut batch.rows {
            r.t = t;
        }
        batch
    }

    /// The batch restricted to one target row.
    pub fn single(&self, row: usize) -> Self {
        let mut r = self.rows[row].clone();
        let seq = self.sequences[r.seq].clone();
        r.seq = 0;
        Self {
            sequences: vec![seq],
            rows: vec![r],
        }
    }
}

/// Mean target cross-entropy of the path over `batch`, as a graph node.
pub fn l2d_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    path: &DiffusionPath<F>,
    bound: &crate::params::Bound,
    base: &BaseLm<F>,
    batch: &L2dBatch,
) -> Result<Var> {
    if batch.rows.is_empty() {
        return Err(L2dError::Contract("batch has no target positions".into()));
    }
    let token_refs: Vec<&[u32]> = batch.sequences.iter().map(|s| s.tokens.as_slice()).collect();
    let acts = base.forward_batch(&token_refs)?;
    let schedule = path.schedule();
    let dbar = path.config().diffusion_dim;
    let d = base.config().d_model;

    let rows = batch.rows.len();
    let mut targets = Vec::with_capacity(rows);
    let mut signal = Vec::with_capacity(rows);
    let mut noise = Vec::with_capacity(rows * dbar);
    let mut latents = Vec::with_capacity(rows * d);
    let mut segments = Vec::with_capacity(rows);
    let mut t = Vec::with_capacity(rows);
    let mut class_ids = Vec::with_capacity(rows);
    let mut positions = Vec::with_capacity(rows);
    for (i, r) in batch.rows.iter().enumerate() {
        let seq = &batch.sequences[r.seq];
        if r.target == 0 || r.target >= seq.tokens.len() {
            return Err(L2dError::Contract(format!("target {} outside sequence", r.target)));
        }
        let s = input_scale(r.t, &schedule);
        targets.push(seq.tokens[r.target] as usize);
        signal.push(F::lit(r.t * s));
        noise.extend(r.noise.iter().map(|z| F::lit((1.0 - r.t) * s * z)));
        let start = acts.offsets[r.seq];
        latents.extend_from_slice(acts.latents.row(start + r.target - 1));
        segments.push(AttnSegment {
            q_start: i,
            q_len: 1,
            k_start: start,
            k_len: r.target,
            offset: r.target - 1,
        });
        t.push(r.t);
        class_ids.push(seq.class_id);
        positions.push(r.target - 1);
    }

    let vocab = path.vocab_graph(g, bound, base)?;
    let x1 = g.gather_rows(vocab, &targets);
    let x1 = g.scale_rows(x1, signal);
    let x0 = g.constant(Tensor::from_parts(vec![rows, dbar], noise));
    let x_in = g.add(x1, x0);
    let latents = g.constant(Tensor::from_parts(vec![rows, d], latents));
    let inputs = PathInputs {
        x_in,
        t: &t,
        class_ids: &class_ids,
        positions: &positions,
        keys: &acts.keys,
        values: &acts.values,
        latents,
        layout: Arc::new(AttnLayout { segments }),
    };
    let logits = path.forward_graph(g, bound, base, &inputs);
    Ok(g.cross_entropy(logits, &targets, None))
}

/// Mean over target positions of `-log p(y_k | x_{t_k}, context)`.
pub fn l2d_loss<F: Scalar>(path: &DiffusionPath<F>, base: &BaseLm<F>, batch: &L2dBatch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = path.params().bind(&mut g, false);
    let loss = l2d_loss_graph(&mut g, path, &bound, base, batch)?;
    let v = g.value(loss).item().as_f64();
    if !v.is_finite() {
        return Err(L2dError::NonFinite("diffusion loss".into()));
    }
    Ok(v)
}

/// Loss over `seqs` with every target at timestep `t`; the noise stream is
/// fixed by `seed` so repeated calls agree.
pub fn validation_loss<F: Scalar>(
    path: &DiffusionPath<F>,
    base: &BaseLm<F>,
    seqs: &[LmSequence],
    t: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = path.schedule();
    let dim = path.config().diffusion_dim;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in seqs.chunks(32) {
        let refs: Vec<&LmSequence> = chunk.iter().collect();
        let batch = L2dBatch::at_fixed_t(&refs, t, dim, &schedule, &mut rng);
        if batch.rows.is_empty() {
            continue;
        }
        total += l2d_loss(path, base, &batch)? * batch.rows.len() as f64;
        count += batch.rows.len();
    }
    if count == 0 {
        return Err(L2dError::Contract("validation set has no targets".into()));
    }
    Ok(total / count as f64)
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss_at_t0: Option<f64>,
    pub val_loss_at_t1: Option<f64>,
    pub wallclock_s: f64,
}

/// Where a training run writes its metrics and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint cadence in steps; 0 writes only at the end.
    pub checkpoint_every: usize,
}

pub const METRICS_HEADER: [&str; 6] = [
    "step",
    "lr",
    "train_loss",
    "val_loss_at_t0",
    "val_loss_at_t1",
    "wallclock_s",
];

struct MetricsSink {
    writer: Option<csv::Writer<File>>,
}

impl MetricsSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let writer = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_path(p)
                    .map_err(csv_err)?;
                w.write_record(METRICS_HEADER).map_err(csv_err)?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        Ok(Self { writer })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(row).map_err(csv_err)?;
            w.flush()?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> L2dError {
    L2dError::Io(std::io::Error::other(e.to_string()))
}

/// Trains the diffusion path in place against a frozen main path.
pub fn train_l2d<F: Scalar>(
    cfg: &TrainConfig,
    base: &BaseLm<F>,
    path: &mut DiffusionPath<F>,
    train: &[LmSequence],
    val: &[LmSequence],
    outputs: &TrainOutputs,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if !base.is_frozen() {
        return Err(L2dError::Contract(
            "the main path must be frozen during diffusion training".into(),
        ));
    }
    path.check_base(base)?;
    let total = cfg.total_steps(train.len());
    let mut sink = MetricsSink::open(outputs.metrics_csv.as_deref())?;
    if total == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(L2dError::Config("empty training corpus".into()));
    }
    let schedule = LrSchedule::new(cfg.lr_peak, cfg.lr_floor, cfg.warmup, total)?;
    let mut opt = AdamW::new(cfg.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size);
    let noise_schedule = path.schedule();
    let dim = path.config().diffusion_dim;
    let clock = Instant::now();
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let idx = sampler.next_batch(&mut rng);
        let seqs: Vec<&LmSequence> = idx.iter().map(|&i| &train[i]).collect();
        let batch = L2dBatch::sample(
            &seqs,
            cfg.timestep_sampling,
            cfg.class_dropout,
            dim,
            &noise_schedule,
            &mut rng,
        );
        if batch.rows.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let bound = path.params().bind(&mut g, true);
        let loss = l2d_loss_graph(&mut g, path, &bound, base, &batch)?;
        let loss_value = g.value(loss).item().as_f64();
        let grads = g.backward(loss)?;
        let mut pg = ParamGrads::collect(path.params(), &bound, &grads);
        if !loss_value.is_finite() || !pg.all_finite() {
            return Err(abort(
                path,
                outputs,
                step,
                format!("loss {loss_value} or gradients not finite"),
            ));
        }
        if let Some(c) = cfg.grad_clip {
            pg.clip(c);
        }
        let lr = schedule.lr(step);
        opt.step(path.params_mut(), &pg, lr);

        let last = step + 1 == total;
        let evaluate = !val.is_empty() && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0));
        let (v0, v1) = if evaluate {
            let eval_seed = cfg.seed ^ 0x7661_6c00;
            (
                Some(validation_loss(path, base, val, 0.0, eval_seed)?),
                Some(validation_loss(path, base, val, 1.0, eval_seed)?),
            )
        } else {
            (None, None)
        };
        let row = MetricsRow {
            step,
            lr,
            train_loss: loss_value,
            val_loss_at_t0: v0,
            val_loss_at_t1: v1,
            wallclock_s: clock.elapsed().as_secs_f64(),
        };
        sink.push(&row)?;
        log.push(row);
        if let Some(ck) = &outputs.checkpoint {
            if last || (outputs.checkpoint_every > 0 && (step + 1) % outputs.checkpoint_every == 0) {
                path.save(ck)?;
            }
        }
    }
    Ok(log)
}

fn abort<F: Scalar>(path: &DiffusionPath<F>, outputs: &TrainOutputs, step: usize, reason: String) -> L2dError {
    if let Some(ck) = &outputs.checkpoint {
        let good = ck.with_extension("last_good.ckpt");
        if let Err(e) = path.save(&good) {
            return L2dError::Diverged {
                step,
                reason: format!("{reason}; saving the last good state failed: {e}"),
            };
        }
    }
    L2dError::Diverged { step, reason }
}

/// Configuration of the main-path LoRA finetuning baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub train: TrainConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                lr_peak: 1e-5,
                class_dropout: 0.0,
                ..TrainConfig::default()
            },
            lora_rank: 16,
            lora_alpha: 64.0,
        }
    }
}

const BASELINE_ADAPTED: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"];

/// Trains low-rank adapters on the main path with next-token cross-entropy
/// and returns the main path with the adapters merged in.
pub fn baseline_lora_finetune<F: Scalar>(
    cfg: &BaselineConfig,
    base: &BaseLm<F>,
    train: &[LmSequence],
    val: &[LmSequence],
    metrics_csv: Option<&Path>,
) -> Result<(BaseLm<F>, Vec<MetricsRow>)> {
    cfg.train.validate()?;
    if cfg.lora_rank == 0 {
        return Err(L2dError::Config("lora_rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let r = cfg.lora_rank;
    let mut adapters = ParamStore::<F>::new();
    for l in 0..base.config().n_layers {
        for name in BASELINE_ADAPTED {
            let key = block_param(l, name);
            let shape = base.params().tensor(&key).shape().to_vec();
            let a = Tensor::randn(&[shape[0], r], (1.0 / shape[0] as f64).sqrt(), &mut rng);
            adapters.insert(format!("{key}.lora_a"), a, ParamRole::Lora, true);
            adapters.insert(
                format!("{key}.lora_b"),
                Tensor::zeros(&[r, shape[1]]),
                ParamRole::Lora,
                true,
            );
        }
    }
    let scale = F::lit(cfg.lora_alpha / r as f64);
    let total = cfg.train.total_steps(train.len());
    let mut sink = MetricsSink::open(metrics_csv)?;
    let mut log = Vec::new();
    if total > 0 {
        if train.is_empty() {
            return Err(L2dError::Config("empty training corpus".into()));
        }
        let schedule = LrSchedule::new(cfg.train.lr_peak, cfg.train.lr_floor, cfg.train.warmup, total)?;
        let mut opt = AdamW::new(cfg.train.adamw);
        let mut sampler = BatchSampler::new(train.len(), cfg.train.batch_size);
        let clock = Instant::now();
        for step in 0..total {
            let idx = sampler.next_batch(&mut rng);
            let seqs: Vec<&LmSequence> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let bound = base.params().bind(&mut g, false);
            let ad_bound = adapters.bind(&mut g, true);
            let binding = AdapterBinding {
                bound: &ad_bound,
                scale,
            };
            let loss = base.lm_loss_graph(&mut g, &bound, Some(&binding), &seqs);
            let loss_value = g.value(loss).item().as_f64();
            let grads = g.backward(loss)?;
            let mut pg = ParamGrads::collect(&adapters, &ad_bound, &grads);
            if !loss_value.is_finite() || !pg.all_finite() {
                return Err(L2dError::Diverged {
                    step,
                    reason: format!("baseline loss {loss_value} or gradients not finite"),
                });
            }
            if let Some(c) = cfg.train.grad_clip {
                pg.clip(c);
            }
            let lr = schedule.lr(step);
            opt.step(&mut adapters, &pg, lr);
            let last = step + 1 == total;
            let evaluate =
                !val.is_empty() && (last || (cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0));
            let v = if evaluate {
                Some(base.lm_loss_adapted(val, Some((&adapters, scale)))?)
            } else {
                None
            };
            let row = MetricsRow {
                step,
                lr,
                train_loss: loss_value,
                val_loss_at_t0: v,
                val_loss_at_t1: None,
                wallclock_s: clock.elapsed().as_secs_f64(),
            };
            sink.push(&row)?;
            log.push(row);
        }
    }
    Ok((merge_adapters(base, &adapters, scale), log))
}

/// `W + scale * A B` for every adapted weight; the result is frozen.
fn merge_adapters<F: Scalar>(base: &BaseLm<F>, adapters: &ParamStore<F>, scale: F) -> BaseLm<F> {
    let mut params = base.params().clone();
    for (name, p) in params.iter_mut() {
        let (Some(a), Some(b)) = (
            adapters.get(&format!("{name}.lora_a")),
            adapters.get(&format!("{name}.lora_b")),
        ) else {
            continue;
        };
        let mut g = Graph::new();
        let av = g.constant(a.value.clone());
        let bv = g.constant(b.value.clone());
        let ab = g.matmul(av, bv);
        let delta = g.value(ab);
        let w = p.value.data_mut();
        for (wi, di) in w.iter_mut().zip(delta.data()) {
            *wi += scale * *di;
        }
    }
    let mut out = BaseLm::from_params(base.config().clone(), params);
    out.freeze();
    out
}

/// Writes rows to `path` as CSV (header included).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut sink = MetricsSink::open(Some(path))?;
    for r in rows {
        sink.push(r)?;
    }
    Ok(())
}
